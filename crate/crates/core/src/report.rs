//! Experiment orchestration and report files.
//!
//! `run_pipeline` writes one file per stage into the output directory;
//! `write_summary` reads them back and derives `summary.json`, so a summary
//! can be regenerated from the stage files alone.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::frustration_engine::{active_frustration, run_replicas, ReplicaConfig, ReplicaOutcome};
use crate::graph_builder::{assemble, symmetrize, SignedSparseGraph};
use crate::inference::{extract_active, forward, load_input};
use crate::model_ir::synthetic::{generate_synthetic, Template};
use crate::model_ir::{load_manifest, Model};
use crate::monotonicity::{
    class_stability, direction_consistency, lambda_from_samples, run_protocol, synthetic_images,
    LambdaResult, OmegaRecord, OmegaSampleSet, OrderMode, PartialOrderPair, ProtocolConfig,
};
use crate::null_models::{generate_null, InitScheme, NullModelKind, NullModelSpec};
use crate::seeding::split_seed;

pub const SUMMARY_SCHEMA_VERSION: u32 = 1;
pub const HISTOGRAM_BINS: usize = 50;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WelchResult {
    pub t: f64,
    pub df: f64,
    /// Two-sided p-value.
    pub p: f64,
}

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    if x.iter().all(|&v| v == x[0]) {
        return (x[0], 0.0);
    }
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

/// Welch's unequal-variance t-test with Welch-Satterthwaite degrees of freedom.
pub fn welch_t(a: &[f64], b: &[f64]) -> Result<WelchResult> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::DegenerateVariance(format!(
            "samples of size {} and {}; both need at least 2 values",
            a.len(),
            b.len()
        )));
    }
    let (ma, va) = mean_var(a);
    let (mb, vb) = mean_var(b);
    let (sa, sb) = (va / a.len() as f64, vb / b.len() as f64);
    let se2 = sa + sb;
    if se2 <= 0.0 || !se2.is_finite() {
        return Err(Error::DegenerateVariance(
            "both samples are constant".into(),
        ));
    }
    let t = (ma - mb) / se2.sqrt();
    let df = se2 * se2 / (sa * sa / (a.len() - 1) as f64 + sb * sb / (b.len() - 1) as f64);
    let dist =
        StudentsT::new(0.0, 1.0, df).map_err(|e| Error::DegenerateVariance(e.to_string()))?;
    let p = (2.0 * (1.0 - dist.cdf(t.abs()))).clamp(0.0, 1.0);
    Ok(WelchResult { t, df, p })
}

/// Uniform-bin histogram; `edges` has one more entry than `counts`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

pub fn histogram(values: &[f64], bins: usize) -> Histogram {
    if values.is_empty() || bins == 0 {
        return Histogram {
            edges: Vec::new(),
            counts: Vec::new(),
        };
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (lo, hi) = if lo == hi {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    };
    let width = (hi - lo) / bins as f64;
    let edges = (0..=bins)
        .map(|i| if i == bins { hi } else { lo + width * i as f64 })
        .collect();
    let mut counts = vec![0; bins];
    for &v in values {
        let bin = (((v - lo) / width) as usize).min(bins - 1);
        counts[bin] += 1;
    }
    Histogram { edges, counts }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub n: usize,
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

impl Stats {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            mean_var(values).1.sqrt()
        } else {
            0.0
        };
        Some(Self {
            n,
            mean,
            std,
            min: values.iter().copied().fold(f64::INFINITY, f64::min),
            max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplicaRecord {
    pub seed: u64,
    pub epsilon: f64,
    pub flips: u64,
}

/// Contents of `eps_real.json` and of the `frustration` command output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrustrationReport {
    pub best_epsilon: f64,
    pub replicas: Vec<ReplicaRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub best_spins: Option<Vec<i8>>,
}

impl FrustrationReport {
    pub fn from_outcome(outcome: &ReplicaOutcome, with_spins: bool) -> Self {
        Self {
            best_epsilon: outcome.best_epsilon(),
            replicas: outcome
                .results
                .iter()
                .map(|r| ReplicaRecord {
                    seed: r.replica_seed,
                    epsilon: r.epsilon_hat,
                    flips: r.flips_performed,
                })
                .collect(),
            best_spins: with_spins.then(|| outcome.best().spins.as_slice().to_vec()),
        }
    }

    pub fn epsilons(&self) -> Vec<f64> {
        self.replicas.iter().map(|r| r.epsilon).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NullInstance {
    pub seed: u64,
    pub best_epsilon: f64,
    pub replicas: Vec<ReplicaRecord>,
}

/// Contents of `eps_n1.json`, `eps_n2.json` and `eps_n3.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NullReport {
    pub kind: NullModelKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init: Option<InitScheme>,
    pub instances: Vec<NullInstance>,
}

impl NullReport {
    pub fn epsilons(&self) -> Vec<f64> {
        self.instances.iter().map(|i| i.best_epsilon).collect()
    }
}

/// One row of `eps_act.csv`; `epsilon_act` is empty when the active graph
/// has no edges.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActiveRow {
    pub image_id: usize,
    pub predicted_class: usize,
    pub nodes: usize,
    pub edges: usize,
    pub epsilon_act: Option<f64>,
}

/// One row of `omega.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OmegaRow {
    pub image_id: usize,
    pub perturbation_id: usize,
    pub magnitude: f64,
    pub omega: f64,
    pub class_before: usize,
    pub class_after: usize,
}

impl From<&OmegaRecord> for OmegaRow {
    fn from(r: &OmegaRecord) -> Self {
        Self {
            image_id: r.image_id,
            perturbation_id: r.perturbation_id,
            magnitude: r.magnitude,
            omega: r.omega,
            class_before: r.class_before,
            class_after: r.class_after,
        }
    }
}

fn to_samples(rows: &[OmegaRow]) -> OmegaSampleSet {
    OmegaSampleSet {
        records: rows
            .iter()
            .map(|r| OmegaRecord {
                image_id: r.image_id,
                perturbation_id: r.perturbation_id,
                magnitude: r.magnitude,
                delta_norm: r.magnitude,
                omega: r.omega,
                class_before: r.class_before,
                class_after: r.class_after,
            })
            .collect(),
    }
}

pub fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn write_csv<T: Serialize>(path: impl AsRef<Path>, rows: &[T]) -> Result<()> {
    let path = path.as_ref();
    let mut writer = csv::Writer::from_path(path)?;
    for row in rows {
        writer.serialize(row)?;
    }
    writer.flush().map_err(|e| Error::io(path, e))
}

pub fn read_csv<T: for<'de> Deserialize<'de>>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    let mut reader = csv::Reader::from_path(path.as_ref())?;
    reader
        .deserialize()
        .map(|r| r.map_err(Error::from))
        .collect()
}

pub fn write_omega_csv(path: impl AsRef<Path>, samples: &OmegaSampleSet) -> Result<()> {
    let rows: Vec<OmegaRow> = samples.records.iter().map(OmegaRow::from).collect();
    write_csv(path, &rows)
}

/// Reads every `*.blob` file in `dir`, sorted by file name, as one input.
pub fn load_images(dir: impl AsRef<Path>, model: &Model) -> Result<Vec<Vec<f64>>> {
    let dir = dir.as_ref();
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|ext| ext == "blob"))
        .collect();
    files.sort();
    files
        .iter()
        .map(|f| load_input(f, model.manifest.input_shape()))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelSource {
    Manifest(PathBuf),
    Template { name: String, seed: u64 },
}

impl ModelSource {
    pub fn load(&self) -> Result<Model> {
        match self {
            ModelSource::Manifest(path) => load_manifest(path),
            ModelSource::Template { name, seed } => {
                generate_synthetic(*seed, name.parse::<Template>()?)
            }
        }
    }

    fn describe(&self) -> String {
        match self {
            ModelSource::Manifest(path) => path.display().to_string(),
            ModelSource::Template { name, seed } => format!("template:{name}:{seed}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NullRequest {
    pub kind: NullModelKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init: Option<InitScheme>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub model: ModelSource,
    pub seed: u64,
    /// Replica settings; the seed field is replaced by a stage seed.
    pub replicas: ReplicaConfig,
    pub null_models: Vec<NullRequest>,
    pub null_instances: usize,
    /// Replicas run on each null instance; the instance keeps the best.
    pub null_replicas: usize,
    /// Directory of input blobs; synthetic inputs are drawn when absent.
    pub images: Option<PathBuf>,
    pub image_count: usize,
    pub active_images: usize,
    pub per_image: usize,
    pub magnitudes: Vec<f64>,
    pub output_dir: PathBuf,
}

impl ExperimentConfig {
    /// Desk-scale defaults for `model`, writing into `output_dir`.
    pub fn desk_scale(model: ModelSource, output_dir: impl Into<PathBuf>) -> Self {
        Self {
            model,
            seed: 0,
            replicas: ReplicaConfig {
                replica_count: 20,
                initial_flips: 10_000,
                ..ReplicaConfig::default()
            },
            null_models: vec![
                NullRequest {
                    kind: NullModelKind::N1,
                    init: None,
                },
                NullRequest {
                    kind: NullModelKind::N2,
                    init: None,
                },
                NullRequest {
                    kind: NullModelKind::N3,
                    init: Some(InitScheme::XavierUniform),
                },
            ],
            null_instances: 20,
            null_replicas: 1,
            images: None,
            image_count: 50,
            active_images: 10,
            per_image: 20,
            magnitudes: vec![0.5, 1.0, 2.0, 4.0],
            output_dir: output_dir.into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let ModelSource::Manifest(path) = &self.model {
            if !path.is_file() {
                return Err(Error::InvalidArgument(format!(
                    "model manifest {} does not exist",
                    path.display()
                )));
            }
        }
        if let Some(dir) = &self.images {
            if !dir.is_dir() {
                return Err(Error::InvalidArgument(format!(
                    "image directory {} does not exist",
                    dir.display()
                )));
            }
        }
        for request in &self.null_models {
            NullModelSpec::new(request.kind, 0, request.init)?;
        }
        if self.replicas.replica_count == 0 || self.null_replicas == 0 {
            return Err(Error::InvalidArgument(
                "replica counts must be at least 1".into(),
            ));
        }
        if self.magnitudes.is_empty() || self.magnitudes.iter().any(|m| !(*m > 0.0)) {
            return Err(Error::InvalidArgument("magnitudes must be positive".into()));
        }
        Ok(())
    }
}

fn stage<T>(name: &str, result: Result<T>) -> Result<T> {
    result.map_err(|e| Error::Stage {
        stage: name.to_string(),
        source: Box::new(e),
    })
}

fn null_file(kind: NullModelKind) -> &'static str {
    match kind {
        NullModelKind::N1 => "eps_n1.json",
        NullModelKind::N2 => "eps_n2.json",
        NullModelKind::N3 => "eps_n3.json",
    }
}

fn null_label(kind: NullModelKind) -> &'static str {
    match kind {
        NullModelKind::N1 => "n1",
        NullModelKind::N2 => "n2",
        NullModelKind::N3 => "n3",
    }
}

/// Runs every stage and writes its output file as soon as it completes;
/// a failing stage aborts with its name and leaves earlier files in place.
pub fn run_pipeline(config: &ExperimentConfig) -> Result<Summary> {
    stage("config", config.validate())?;
    let out = &config.output_dir;
    stage(
        "config",
        fs::create_dir_all(out).map_err(|e| Error::io(out, e)),
    )?;
    let root = config.seed;

    let model = stage("build", config.model.load())?;
    let graph = stage("build", assemble(&model))?;
    stage("build", graph.write(out.join("graph.fsg")))?;

    let view = symmetrize(&graph);
    let real_config = ReplicaConfig {
        seed: split_seed(root, "replicas", 0),
        ..config.replicas.clone()
    };
    let real = stage("frustration", run_replicas(&view, &real_config))?;
    stage(
        "frustration",
        write_json(
            out.join("eps_real.json"),
            &FrustrationReport::from_outcome(&real, true),
        ),
    )?;

    for request in &config.null_models {
        let label = null_label(request.kind);
        let instances = (0..config.null_instances as u64)
            .map(|i| {
                let spec =
                    NullModelSpec::new(request.kind, split_seed(root, label, i), request.init)?;
                let null_graph = generate_null(&model, &graph, &spec)?;
                let replicas = ReplicaConfig {
                    replica_count: config.null_replicas,
                    seed: split_seed(root, &format!("{label}_replicas"), i),
                    ..config.replicas.clone()
                };
                let outcome = run_replicas(&symmetrize(&null_graph), &replicas)?;
                let report = FrustrationReport::from_outcome(&outcome, false);
                Ok(NullInstance {
                    seed: spec.seed,
                    best_epsilon: report.best_epsilon,
                    replicas: report.replicas,
                })
            })
            .collect::<Result<Vec<_>>>();
        let report = NullReport {
            kind: request.kind,
            init: request.init,
            instances: stage(&format!("null_{label}"), instances)?,
        };
        stage(
            &format!("null_{label}"),
            write_json(out.join(null_file(request.kind)), &report),
        )?;
    }

    let images = match &config.images {
        Some(dir) => stage("images", load_images(dir, &model))?,
        None => synthetic_images(
            model.manifest.input_shape().len(),
            config.image_count,
            split_seed(root, "images", 0),
        ),
    };

    let active_rows = images
        .iter()
        .take(config.active_images)
        .enumerate()
        .map(|(id, x)| {
            let trace = forward(&model, x)?;
            let act = extract_active(&model, &graph, &trace)?;
            let replicas = ReplicaConfig {
                seed: split_seed(root, "active", id as u64),
                ..config.replicas.clone()
            };
            let epsilon_act = match active_frustration(&act.graph, &replicas) {
                Ok(outcome) => Some(outcome.best_epsilon()),
                Err(Error::EmptyGraph) => None,
                Err(e) => return Err(e),
            };
            Ok(ActiveRow {
                image_id: id,
                predicted_class: trace.predicted_class,
                nodes: act.graph.node_count(),
                edges: act.graph.edge_count(),
                epsilon_act,
            })
        })
        .collect::<Result<Vec<_>>>();
    stage(
        "active",
        write_csv(out.join("eps_act.csv"), &stage("active", active_rows)?),
    )?;

    let spins = &real.best().spins;
    let order = stage("monotonicity", PartialOrderPair::from_spins(&model, spins))?;
    let protocol = ProtocolConfig {
        per_image: config.per_image,
        magnitudes: config.magnitudes.clone(),
        seed: split_seed(root, "monotone", 0),
    };
    let samples = stage(
        "monotonicity",
        run_protocol(&model, &OrderMode::Fixed(order), &images, &protocol),
    )?;
    stage(
        "monotonicity",
        write_omega_csv(out.join("omega.csv"), &samples),
    )?;
    let null_protocol = ProtocolConfig {
        seed: split_seed(root, "monotone_null", 0),
        ..protocol
    };
    let null_samples = stage(
        "monotonicity",
        run_protocol(&model, &OrderMode::RandomNull, &images, &null_protocol),
    )?;
    stage(
        "monotonicity",
        write_omega_csv(out.join("omega_null.csv"), &null_samples),
    )?;
    if !samples.records.is_empty() {
        let lambda = stage("monotonicity", lambda_from_samples(&samples.omegas()))?;
        stage("monotonicity", write_json(out.join("lambda.json"), &lambda))?;
    }
    if !null_samples.records.is_empty() {
        let lambda = stage("monotonicity", lambda_from_samples(&null_samples.omegas()))?;
        stage(
            "monotonicity",
            write_json(out.join("lambda_null.json"), &lambda),
        )?;
    }

    let meta = RunInfo {
        model: config.model.describe(),
        seed: root,
        node_count: graph.node_count(),
        edge_count: graph.edge_count(),
    };
    stage("report", write_json(out.join("run.json"), &meta))?;
    stage("report", write_summary(out))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunInfo {
    pub model: String,
    pub seed: u64,
    pub node_count: usize,
    pub edge_count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WelchComparison {
    pub a: String,
    pub b: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub result: Option<WelchResult>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrderingCheck {
    pub expected: String,
    /// Absent when one of the three distributions was not computed.
    pub holds: Option<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MonotonicitySummary {
    pub samples: usize,
    pub mean_omega: f64,
    pub lambda: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub null_mean_omega: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub null_standard_error: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub null_lambda: Option<f64>,
    /// `[magnitude, fraction of perturbations keeping the class]`.
    pub class_stability: Vec<[f64; 2]>,
    pub direction_consistency: Histogram,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub schema_version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run: Option<RunInfo>,
    pub epsilon: BTreeMap<String, Stats>,
    pub welch: Vec<WelchComparison>,
    pub ordering: OrderingCheck,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub active: Option<Stats>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub monotonicity: Option<MonotonicitySummary>,
    pub histograms: BTreeMap<String, Histogram>,
}

fn summarize_omega(
    samples: &OmegaSampleSet,
    null: Option<&OmegaSampleSet>,
) -> Result<MonotonicitySummary> {
    let LambdaResult { lambda, .. } = lambda_from_samples(&samples.omegas())?;
    let consistency: Vec<f64> = direction_consistency(samples)
        .into_iter()
        .map(|d| d.1)
        .collect();
    let (null_mean_omega, null_standard_error, null_lambda) = match null {
        Some(ns) if !ns.records.is_empty() => {
            let om = ns.omegas();
            let stats = Stats::of(&om).expect("nonempty");
            (
                Some(stats.mean),
                Some(stats.std / (om.len() as f64).sqrt()),
                Some(lambda_from_samples(&om)?.lambda),
            )
        }
        _ => (None, None, None),
    };
    Ok(MonotonicitySummary {
        samples: samples.records.len(),
        mean_omega: samples.mean_omega(),
        lambda,
        null_mean_omega,
        null_standard_error,
        null_lambda,
        class_stability: class_stability(samples)
            .into_iter()
            .map(|(m, f)| [m, f])
            .collect(),
        direction_consistency: histogram(&consistency, HISTOGRAM_BINS),
    })
}

/// Builds `summary.json` from the stage files present in `dir`.
pub fn write_summary(dir: impl AsRef<Path>) -> Result<Summary> {
    let dir = dir.as_ref();
    let mut epsilon = BTreeMap::new();
    let mut samples: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let real_path = dir.join("eps_real.json");
    if real_path.exists() {
        let real: FrustrationReport = read_json(&real_path)?;
        samples.insert("real".into(), real.epsilons());
    }
    for kind in [NullModelKind::N1, NullModelKind::N2, NullModelKind::N3] {
        let path = dir.join(null_file(kind));
        if path.exists() {
            let report: NullReport = read_json(&path)?;
            samples.insert(null_label(kind).into(), report.epsilons());
        }
    }
    let mut histograms = BTreeMap::new();
    for (name, values) in &samples {
        if let Some(stats) = Stats::of(values) {
            epsilon.insert(name.clone(), stats);
        }
        histograms.insert(format!("epsilon_{name}"), histogram(values, HISTOGRAM_BINS));
    }

    let mut welch = Vec::new();
    for (a, b) in [("real", "n1"), ("real", "n2"), ("n1", "n2"), ("real", "n3")] {
        if let (Some(x), Some(y)) = (samples.get(a), samples.get(b)) {
            let (result, error) = match welch_t(x, y) {
                Ok(r) => (Some(r), None),
                Err(e) => (None, Some(e.to_string())),
            };
            welch.push(WelchComparison {
                a: a.into(),
                b: b.into(),
                result,
                error,
            });
        }
    }
    let holds = match (epsilon.get("real"), epsilon.get("n1"), epsilon.get("n2")) {
        (Some(r), Some(n1), Some(n2)) => Some(r.mean < n1.mean && n1.mean < n2.mean),
        _ => None,
    };

    let act_path = dir.join("eps_act.csv");
    let active = if act_path.exists() {
        let rows: Vec<ActiveRow> = read_csv(&act_path)?;
        let values: Vec<f64> = rows.iter().filter_map(|r| r.epsilon_act).collect();
        histograms.insert("epsilon_act".into(), histogram(&values, HISTOGRAM_BINS));
        Stats::of(&values)
    } else {
        None
    };

    let omega_path = dir.join("omega.csv");
    let monotonicity = if omega_path.exists() {
        let rows: Vec<OmegaRow> = read_csv(&omega_path)?;
        let null_path = dir.join("omega_null.csv");
        let null = if null_path.exists() {
            Some(to_samples(&read_csv::<OmegaRow>(&null_path)?))
        } else {
            None
        };
        let set = to_samples(&rows);
        histograms.insert("omega".into(), histogram(&set.omegas(), HISTOGRAM_BINS));
        if let Some(ns) = &null {
            histograms.insert("omega_null".into(), histogram(&ns.omegas(), HISTOGRAM_BINS));
        }
        if set.records.is_empty() {
            None
        } else {
            Some(summarize_omega(&set, null.as_ref())?)
        }
    } else {
        None
    };

    let run_path = dir.join("run.json");
    let run = if run_path.exists() {
        Some(read_json(&run_path)?)
    } else {
        None
    };
    let summary = Summary {
        schema_version: SUMMARY_SCHEMA_VERSION,
        run,
        epsilon,
        welch,
        ordering: OrderingCheck {
            expected: "mean(real) < mean(n1) < mean(n2)".into(),
            holds,
        },
        active,
        monotonicity,
        histograms,
    };
    write_json(dir.join("summary.json"), &summary)?;
    Ok(summary)
}

/// Frustration of `graph` as written by the `frustration` command.
pub fn frustration_report(
    graph: &SignedSparseGraph,
    config: &ReplicaConfig,
) -> Result<FrustrationReport> {
    let outcome = run_replicas(&symmetrize(graph), config)?;
    Ok(FrustrationReport::from_outcome(&outcome, true))
}

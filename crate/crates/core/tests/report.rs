use std::fs;

use frustra::frustration_engine::ReplicaConfig;
use frustra::null_models::{InitScheme, NullModelKind};
use frustra::report::{
    histogram, run_pipeline, welch_t, write_json, write_summary, ExperimentConfig,
    FrustrationReport, ModelSource, NullInstance, NullReport, NullRequest, ReplicaRecord,
};
use frustra::Error;
use statrs::function::gamma::ln_gamma;

/// Two-sided tail of Student's t by Simpson integration of the density.
fn t_two_sided(t: f64, df: f64) -> f64 {
    let log_norm =
        ln_gamma((df + 1.0) / 2.0) - ln_gamma(df / 2.0) - 0.5 * (df * std::f64::consts::PI).ln();
    let pdf = |x: f64| (log_norm - (df + 1.0) / 2.0 * (1.0 + x * x / df).ln()).exp();
    let steps = 20_000;
    let h = t.abs() / steps as f64;
    let mut acc = pdf(0.0) + pdf(t.abs());
    for i in 1..steps {
        acc += pdf(i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    1.0 - 2.0 * acc * h / 3.0
}

fn welch_by_hand(a: &[f64], b: &[f64]) -> (f64, f64) {
    let stats = |x: &[f64]| {
        let n = x.len() as f64;
        let m = x.iter().sum::<f64>() / n;
        (
            m,
            x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0),
            n,
        )
    };
    let (ma, va, na) = stats(a);
    let (mb, vb, nb) = stats(b);
    let t = (ma - mb) / (va / na + vb / nb).sqrt();
    let df = (va / na + vb / nb).powi(2)
        / ((va / na).powi(2) / (na - 1.0) + (vb / nb).powi(2) / (nb - 1.0));
    (t, df)
}

#[test]
fn welch_examples_and_hand_evaluation() {
    let r = welch_t(&[1.0, 2.0, 3.0, 4.0, 5.0], &[2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
    assert!((r.t + 1.0).abs() < 1e-12);
    assert!((r.df - 8.0).abs() < 1e-12);
    assert!((r.p - t_two_sided(-1.0, 8.0)).abs() < 1e-8);

    let a = [0.31, 0.35, 0.29, 0.4, 0.33, 0.36, 0.3];
    let b = [0.41, 0.39, 0.45, 0.38, 0.47];
    let (t, df) = welch_by_hand(&a, &b);
    let r = welch_t(&a, &b).unwrap();
    assert!((r.t - t).abs() < 1e-12 && (r.df - df).abs() < 1e-9);
    assert!((r.p - t_two_sided(t, df)).abs() < 1e-8);

    let same = welch_t(&a, &a).unwrap();
    assert_eq!((same.t, same.p), (0.0, 1.0));
    assert!(matches!(
        welch_t(&[0.0; 4], &[1.0; 4]),
        Err(Error::DegenerateVariance(_))
    ));
    assert!(welch_t(&[1.0], &[1.0, 2.0]).is_err());
}

#[test]
fn histogram_has_fifty_bins_with_edges() {
    let values: Vec<f64> = (0..1000).map(|i| (i as f64 * 0.37).sin()).collect();
    let h = histogram(&values, 50);
    assert_eq!((h.edges.len(), h.counts.len()), (51, 50));
    assert_eq!(h.counts.iter().sum::<usize>(), 1000);
    assert!(h.edges.windows(2).all(|w| w[0] < w[1]));
}

fn eps_report(values: &[f64]) -> FrustrationReport {
    FrustrationReport {
        best_epsilon: values.iter().copied().fold(f64::INFINITY, f64::min),
        replicas: values
            .iter()
            .enumerate()
            .map(|(i, &e)| ReplicaRecord {
                seed: i as u64,
                epsilon: e,
                flips: 10,
            })
            .collect(),
        best_spins: None,
    }
}

fn null_report(kind: NullModelKind, values: &[f64]) -> NullReport {
    NullReport {
        kind,
        init: None,
        instances: values
            .iter()
            .enumerate()
            .map(|(i, &e)| NullInstance {
                seed: i as u64,
                best_epsilon: e,
                replicas: Vec::new(),
            })
            .collect(),
    }
}

#[test]
fn summary_flags_the_ordering_and_records_failed_comparisons() {
    let dir = tempfile::tempdir().unwrap();
    write_json(
        dir.path().join("eps_real.json"),
        &eps_report(&[0.1, 0.12, 0.11]),
    )
    .unwrap();
    write_json(
        dir.path().join("eps_n1.json"),
        &null_report(NullModelKind::N1, &[0.2, 0.22, 0.21]),
    )
    .unwrap();
    write_json(
        dir.path().join("eps_n2.json"),
        &null_report(NullModelKind::N2, &[0.3; 3]),
    )
    .unwrap();
    let summary = write_summary(dir.path()).unwrap();
    assert_eq!(summary.schema_version, 1);
    assert_eq!(summary.ordering.holds, Some(true));
    let real_n1 = summary
        .welch
        .iter()
        .find(|w| w.a == "real" && w.b == "n1")
        .unwrap();
    assert!(real_n1.result.unwrap().t < 0.0);
    write_json(
        dir.path().join("eps_n2.json"),
        &null_report(NullModelKind::N2, &[0.15, 0.16, 0.14]),
    )
    .unwrap();
    let summary = write_summary(dir.path()).unwrap();
    assert_eq!(summary.ordering.holds, Some(false));

    write_json(dir.path().join("eps_real.json"), &eps_report(&[0.2; 3])).unwrap();
    write_json(
        dir.path().join("eps_n2.json"),
        &null_report(NullModelKind::N2, &[0.2; 3]),
    )
    .unwrap();
    let summary = write_summary(dir.path()).unwrap();
    let degenerate = summary
        .welch
        .iter()
        .find(|w| w.a == "real" && w.b == "n2")
        .unwrap();
    assert!(degenerate.result.is_none() && degenerate.error.is_some());

    let text = fs::read_to_string(dir.path().join("summary.json")).unwrap();
    assert!(text.contains("\"schema_version\": 1"));
}

fn small_config(dir: &std::path::Path) -> ExperimentConfig {
    let mut config = ExperimentConfig::desk_scale(
        ModelSource::Template {
            name: "tiny_mlp".into(),
            seed: 3,
        },
        dir,
    );
    config.replicas = ReplicaConfig {
        replica_count: 4,
        initial_flips: 100,
        ..ReplicaConfig::default()
    };
    config.null_instances = 4;
    config.image_count = 6;
    config.active_images = 3;
    config.per_image = 4;
    config
}

#[test]
fn pipeline_is_byte_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    run_pipeline(&small_config(&a)).unwrap();
    run_pipeline(&small_config(&b)).unwrap();
    for file in [
        "eps_act.csv",
        "omega.csv",
        "omega_null.csv",
        "eps_real.json",
        "eps_n3.json",
        "summary.json",
    ] {
        assert_eq!(
            fs::read(a.join(file)).unwrap(),
            fs::read(b.join(file)).unwrap(),
            "{file}"
        );
    }
    let mut other = small_config(&b);
    other.seed = 1;
    run_pipeline(&other).unwrap();
    assert_ne!(
        fs::read(a.join("omega.csv")).unwrap(),
        fs::read(b.join("omega.csv")).unwrap()
    );
}

#[test]
fn config_validation_rejects_missing_paths_and_bad_null_requests() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = small_config(dir.path());
    config.model = ModelSource::Manifest(dir.path().join("absent.json"));
    assert!(run_pipeline(&config).unwrap_err().is_validation());

    let mut config = small_config(dir.path());
    config.images = Some(dir.path().join("absent"));
    assert!(config.validate().is_err());

    let mut config = small_config(dir.path());
    config.null_models = vec![NullRequest {
        kind: NullModelKind::N1,
        init: Some(InitScheme::HeNormal),
    }];
    assert!(config.validate().is_err());

    let config = small_config(dir.path());
    let json = serde_json::to_string(&config).unwrap();
    let back: ExperimentConfig = serde_json::from_str(&json).unwrap();
    assert_eq!(back, config);
}

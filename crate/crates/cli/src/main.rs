use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use frustra::frustration_engine::{active_frustration, ReplicaConfig, SpinAssignment};
use frustra::graph_builder::{assemble, SignedSparseGraph};
use frustra::inference::{
    extract_active, forward, jacobian_sign_check, load_input, JacobianConfig,
};
use frustra::model_ir::Model;
use frustra::monotonicity::{
    lambda_from_samples, run_protocol, synthetic_images, OrderMode, PartialOrderPair,
    ProtocolConfig,
};
use frustra::null_models::{n1_shuffle, n2_shuffle, n3_reinit, InitScheme, NullModelKind};
use frustra::report::{
    self, frustration_report, load_images, read_json, run_pipeline, write_json, write_omega_csv,
    ExperimentConfig, FrustrationReport, ModelSource, NullRequest,
};
use frustra::seeding::split_seed;
use frustra::{Error, Result};

#[derive(Parser)]
#[command(
    name = "frustra",
    version,
    about = "Signed-graph frustration analysis of feed-forward networks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the signed graph of a model.
    Build(BuildArgs),
    /// Estimate the frustration index of a graph with greedy replicas.
    Frustration(FrustrationArgs),
    /// Write a randomized null-model graph.
    Nullmodel(NullArgs),
    /// Extract the active subgraph for one input.
    Active(ActiveArgs),
    /// Check Jacobian signs against the signed graph by finite differences.
    Jaccheck(JacArgs),
    /// Run the perturbation protocol and write omega samples.
    Monotone(MonotoneArgs),
    /// Run every stage and write a report bundle.
    Pipeline(PipelineArgs),
    /// Rebuild summary.json from the files of a report directory.
    Report(ReportArgs),
}

#[derive(Args, Clone)]
struct ModelArgs {
    /// Model manifest (JSON with blobs alongside).
    #[arg(long, conflicts_with = "template")]
    model: Option<PathBuf>,
    /// Built-in synthetic model: tiny_mlp, tiny_cnn, residual_cnn, grouped_cnn.
    #[arg(long)]
    template: Option<String>,
    #[arg(long, default_value_t = 0)]
    template_seed: u64,
}

impl ModelArgs {
    fn source(&self) -> Result<ModelSource> {
        match (&self.model, &self.template) {
            (Some(path), _) => Ok(ModelSource::Manifest(path.clone())),
            (None, Some(name)) => Ok(ModelSource::Template {
                name: name.clone(),
                seed: self.template_seed,
            }),
            (None, None) => Err(Error::InvalidArgument(
                "either --model or --template is required".into(),
            )),
        }
    }

    fn load(&self) -> Result<Model> {
        self.source()?.load()
    }
}

#[derive(Args)]
struct BuildArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    out: PathBuf,
    /// Also write the model manifest and blobs to this path.
    #[arg(long)]
    save_model: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct ReplicaArgs {
    #[arg(long, default_value_t = 80)]
    replicas: usize,
    /// Random spin flips applied before the greedy descent.
    #[arg(long, default_value_t = 1_000_000)]
    nu: u64,
    #[arg(long, default_value_t = 100_000_000)]
    max_iterations: u64,
    /// Disable cluster moves and run plain single-spin greedy descent.
    #[arg(long)]
    single_flip_only: bool,
}

impl ReplicaArgs {
    fn config(&self, seed: u64) -> ReplicaConfig {
        ReplicaConfig {
            replica_count: self.replicas,
            initial_flips: self.nu,
            max_iterations: self.max_iterations,
            seed,
            record_trace: false,
            cluster_moves: !self.single_flip_only,
        }
    }
}

#[derive(Args)]
struct FrustrationArgs {
    #[arg(long)]
    graph: PathBuf,
    #[command(flatten)]
    replicas: ReplicaArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct NullArgs {
    #[arg(long)]
    graph: Option<PathBuf>,
    #[arg(long)]
    kind: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Initialization scheme for n3: xavier or he.
    #[arg(long)]
    init: Option<String>,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ActiveArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Graph of the model; rebuilt from the model when omitted.
    #[arg(long)]
    graph: Option<PathBuf>,
    /// Input tensor in the blob format.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Replicas used to estimate the frustration of the active graph (0 skips it).
    #[arg(long, default_value_t = 0)]
    replicas: usize,
    #[arg(long, default_value_t = 1_000_000)]
    nu: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct JacArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    graph: Option<PathBuf>,
    /// Input tensor in the blob format; a random input is drawn when omitted.
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-4)]
    step: f64,
    #[arg(long, default_value_t = 1e-6)]
    tolerance: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum, PartialEq)]
enum NullOrder {
    Random,
    None,
}

#[derive(Args)]
struct MonotoneArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Graph of the model, used to check the spin vector length.
    #[arg(long)]
    graph: Option<PathBuf>,
    /// Output of `frustration`; its best spins define the order pair.
    #[arg(long)]
    spins: Option<PathBuf>,
    /// Directory of input blobs; random inputs are drawn when omitted.
    #[arg(long)]
    images: Option<PathBuf>,
    #[arg(long, default_value_t = 50)]
    image_count: usize,
    #[arg(long, default_value_t = 100)]
    per_image: usize,
    #[arg(long, value_delimiter = ',', default_value = "0.5,1,2,4")]
    magnitudes: Vec<f64>,
    /// `random` draws a fresh random order pair for every perturbation.
    #[arg(long, value_enum, default_value_t = NullOrder::None)]
    null: NullOrder,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Where to write the lambda curve; defaults to lambda.json beside --out.
    #[arg(long)]
    lambda_out: Option<PathBuf>,
}

#[derive(Args)]
struct PipelineArgs {
    /// Experiment configuration as JSON; overrides every other option.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 20)]
    replicas: usize,
    #[arg(long, default_value_t = 10_000)]
    nu: u64,
    #[arg(long, default_value_t = 100_000_000)]
    max_iterations: u64,
    #[arg(long, value_delimiter = ',', default_value = "n1,n2,n3")]
    nulls: Vec<String>,
    #[arg(long, default_value = "xavier")]
    n3_init: String,
    #[arg(long, default_value_t = 20)]
    null_instances: usize,
    #[arg(long, default_value_t = 1)]
    null_replicas: usize,
    #[arg(long)]
    images: Option<PathBuf>,
    #[arg(long, default_value_t = 50)]
    image_count: usize,
    #[arg(long, default_value_t = 10)]
    active_images: usize,
    #[arg(long, default_value_t = 20)]
    per_image: usize,
    #[arg(long, value_delimiter = ',', default_value = "0.5,1,2,4")]
    magnitudes: Vec<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    dir: PathBuf,
}

fn read_graph_or_build(graph: Option<&Path>, model: &Model) -> Result<SignedSparseGraph> {
    match graph {
        Some(path) => SignedSparseGraph::read(path),
        None => assemble(model),
    }
}

fn print_json(value: &serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    match writeln!(std::io::stdout().lock(), "{text}") {
        Err(source) if source.kind() != std::io::ErrorKind::BrokenPipe => Err(Error::Io {
            path: "<stdout>".into(),
            source,
        }),
        _ => Ok(()),
    }
}

fn build(args: &BuildArgs) -> Result<()> {
    let model = args.model.load()?;
    let graph = assemble(&model)?;
    graph.write(&args.out)?;
    if let Some(path) = &args.save_model {
        model.save(path)?;
    }
    print_json(&serde_json::json!({
        "nodes": graph.node_count(),
        "edges": graph.edge_count(),
        "out": args.out,
    }))
}

fn frustration(args: &FrustrationArgs) -> Result<()> {
    let graph = SignedSparseGraph::read(&args.graph)?;
    let report = frustration_report(&graph, &args.replicas.config(args.seed))?;
    write_json(&args.out, &report)?;
    print_json(&serde_json::json!({ "best_epsilon": report.best_epsilon }))
}

fn nullmodel(args: &NullArgs) -> Result<()> {
    let kind: NullModelKind = args.kind.parse()?;
    let graph = match kind {
        NullModelKind::N1 | NullModelKind::N2 => {
            if args.init.is_some() {
                return Err(Error::InvalidArgument("--init applies only to n3".into()));
            }
            let path = args.graph.as_ref().ok_or_else(|| {
                Error::InvalidArgument("--graph is required for n1 and n2".into())
            })?;
            let graph = SignedSparseGraph::read(path)?;
            if kind == NullModelKind::N1 {
                n1_shuffle(&graph, args.seed)?
            } else {
                n2_shuffle(&graph, args.seed)?
            }
        }
        NullModelKind::N3 => {
            let init: InitScheme = args
                .init
                .as_deref()
                .ok_or_else(|| Error::InvalidArgument("--init is required for n3".into()))?
                .parse()?;
            assemble(&n3_reinit(&args.model.load()?, init, args.seed)?)?
        }
    };
    graph.write(&args.out)?;
    print_json(&serde_json::json!({ "nodes": graph.node_count(), "edges": graph.edge_count() }))
}

fn active(args: &ActiveArgs) -> Result<()> {
    let model = args.model.load()?;
    let graph = read_graph_or_build(args.graph.as_deref(), &model)?;
    let x = load_input(&args.input, model.manifest.input_shape())?;
    let trace = forward(&model, &x)?;
    let act = extract_active(&model, &graph, &trace)?;
    act.graph.write(&args.out)?;
    let mut summary = serde_json::json!({
        "predicted_class": trace.predicted_class,
        "nodes": act.graph.node_count(),
        "edges": act.graph.edge_count(),
        "output_node": act.output_node,
    });
    if args.replicas > 0 {
        let config = ReplicaConfig {
            replica_count: args.replicas,
            initial_flips: args.nu,
            seed: args.seed,
            ..ReplicaConfig::default()
        };
        let eps = match active_frustration(&act.graph, &config) {
            Ok(outcome) => Some(outcome.best_epsilon()),
            Err(Error::EmptyGraph) => None,
            Err(e) => return Err(e),
        };
        summary["epsilon_act"] = serde_json::json!(eps);
    }
    print_json(&summary)
}

fn jaccheck(args: &JacArgs) -> Result<()> {
    let model = args.model.load()?;
    let graph = read_graph_or_build(args.graph.as_deref(), &model)?;
    let x = match &args.input {
        Some(path) => load_input(path, model.manifest.input_shape())?,
        None => synthetic_images(
            model.manifest.input_shape().len(),
            1,
            split_seed(args.seed, "images", 0),
        )
        .remove(0),
    };
    let config = JacobianConfig {
        step: args.step,
        tolerance: args.tolerance,
        seed: args.seed,
        ..JacobianConfig::default()
    };
    let report = jacobian_sign_check(&model, &graph, &x, &config)?;
    if let Some(out) = &args.out {
        write_json(out, &report)?;
    }
    print_json(&serde_json::json!({
        "passed": report.passed(),
        "checked_entries": report.checked_entries,
        "nonzero_entries": report.nonzero_entries,
        "violations": report.violations.len(),
        "skipped_layers": report.skipped_layers,
        "attempts": report.attempts,
    }))?;
    if report.passed() {
        Ok(())
    } else {
        Err(Error::SignViolations {
            count: report.violations.len(),
        })
    }
}

fn monotone(args: &MonotoneArgs) -> Result<()> {
    let model = args.model.load()?;
    let order = match (args.null, &args.spins) {
        (NullOrder::Random, _) => OrderMode::RandomNull,
        (NullOrder::None, Some(path)) => {
            let eps: FrustrationReport = read_json(path)?;
            let spins = eps.best_spins.ok_or_else(|| {
                Error::InvalidArgument(format!("{} has no best_spins", path.display()))
            })?;
            if let Some(graph) = &args.graph {
                let n = SignedSparseGraph::read(graph)?.node_count();
                if n != spins.len() {
                    return Err(Error::InvalidArgument(format!(
                        "spin vector has length {}, graph has {n} nodes",
                        spins.len()
                    )));
                }
            }
            OrderMode::Fixed(PartialOrderPair::from_spins(
                &model,
                &SpinAssignment::new(spins)?,
            )?)
        }
        (NullOrder::None, None) => {
            return Err(Error::InvalidArgument(
                "--spins is required unless --null random".into(),
            ))
        }
    };
    let images = match &args.images {
        Some(dir) => load_images(dir, &model)?,
        None => synthetic_images(
            model.manifest.input_shape().len(),
            args.image_count,
            split_seed(args.seed, "images", 0),
        ),
    };
    let config = ProtocolConfig {
        per_image: args.per_image,
        magnitudes: args.magnitudes.clone(),
        seed: args.seed,
    };
    let samples = run_protocol(&model, &order, &images, &config)?;
    write_omega_csv(&args.out, &samples)?;
    let lambda = lambda_from_samples(&samples.omegas())?;
    let lambda_path = args.lambda_out.clone().unwrap_or_else(|| {
        args.out
            .parent()
            .map(|p| p.join("lambda.json"))
            .unwrap_or_else(|| PathBuf::from("lambda.json"))
    });
    write_json(&lambda_path, &lambda)?;
    print_json(&serde_json::json!({
        "samples": samples.records.len(),
        "mean_omega": samples.mean_omega(),
        "lambda": lambda.lambda,
    }))
}

fn pipeline(args: &PipelineArgs) -> Result<()> {
    let config: ExperimentConfig = match &args.config {
        Some(path) => read_json(path)?,
        None => {
            let out = args.out.clone().ok_or_else(|| {
                Error::InvalidArgument("--out is required without --config".into())
            })?;
            let init: InitScheme = args.n3_init.parse()?;
            let null_models = args
                .nulls
                .iter()
                .map(|name| {
                    let kind: NullModelKind = name.parse()?;
                    Ok(NullRequest {
                        kind,
                        init: (kind == NullModelKind::N3).then_some(init),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            ExperimentConfig {
                model: args.model.source()?,
                seed: args.seed,
                replicas: ReplicaConfig {
                    replica_count: args.replicas,
                    initial_flips: args.nu,
                    max_iterations: args.max_iterations,
                    ..ReplicaConfig::default()
                },
                null_models,
                null_instances: args.null_instances,
                null_replicas: args.null_replicas,
                images: args.images.clone(),
                image_count: args.image_count,
                active_images: args.active_images,
                per_image: args.per_image,
                magnitudes: args.magnitudes.clone(),
                output_dir: out,
            }
        }
    };
    let summary = run_pipeline(&config)?;
    print_json(&serde_json::json!({
        "output_dir": config.output_dir,
        "epsilon": summary.epsilon,
        "ordering_holds": summary.ordering.holds,
    }))
}

fn report_cmd(args: &ReportArgs) -> Result<()> {
    let summary = report::write_summary(&args.dir)?;
    print_json(&serde_json::to_value(&summary)?)
}

fn configure_threads() -> Result<()> {
    if let Ok(value) = std::env::var("FRUSTRA_THREADS") {
        let threads: usize = value.parse().map_err(|_| {
            Error::InvalidArgument(format!("FRUSTRA_THREADS=`{value}` is not a count"))
        })?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    configure_threads()?;
    match &cli.command {
        Command::Build(a) => build(a),
        Command::Frustration(a) => frustration(a),
        Command::Nullmodel(a) => nullmodel(a),
        Command::Active(a) => active(a),
        Command::Jaccheck(a) => jaccheck(a),
        Command::Monotone(a) => monotone(a),
        Command::Pipeline(a) => pipeline(a),
        Command::Report(a) => report_cmd(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(2)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 2 } else { 3 })
        }
    }
}

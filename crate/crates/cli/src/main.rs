use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use geo_spd::commands::{self, ExportKind, QuerySource, RunConfig, SplitName, Variant};
use geo_spd::gradcheck::DEFAULT_TOLERANCE;
use geo_spd::{Error, Result};

#[derive(Parser)]
#[command(name = "geo-spd", version, about = "SPD-manifold representation learning on multichannel signals")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    GenData(ConfigArgs),
    /// Train a model and write checkpoint, loss history and metrics.
    Train(ConfigArgs),
    /// Evaluate a checkpoint on one split of a dataset.
    Eval(EvalArgs),
    /// Export attention maps, tangent embeddings, adjacency or class scores as CSV.
    Export(ExportArgs),
    /// Compare analytic gradients against central finite differences.
    CheckGrad(CheckGradArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args, Default)]
struct Overrides {
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    channels: Option<usize>,
    #[arg(long)]
    trial_epochs: Option<usize>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    sample_rate: Option<f64>,
    #[arg(long)]
    classes: Option<usize>,
    /// default or alignment-sensitive
    #[arg(long, value_parser = parse_variant)]
    variant: Option<Variant>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    split_train: Option<f64>,
    #[arg(long)]
    split_val: Option<f64>,
    #[arg(long)]
    split_test: Option<f64>,
    #[arg(long)]
    spatial_filters: Option<usize>,
    #[arg(long)]
    temporal_kernel: Option<usize>,
    #[arg(long)]
    feature_dim: Option<usize>,
    #[arg(long)]
    bimap_dim: Option<usize>,
    #[arg(long)]
    gru_hidden: Option<usize>,
    #[arg(long)]
    proj_dim: Option<usize>,
    #[arg(long)]
    stft_window: Option<usize>,
    #[arg(long)]
    stft_hop: Option<usize>,
    #[arg(long)]
    tau_top: Option<usize>,
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long)]
    reeig_threshold: Option<f64>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    kappa: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Training epochs.
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    meta_optimizer: Option<bool>,
    /// Only node-spd is available.
    #[arg(long, value_parser = parse_query_source)]
    query_source: Option<QuerySource>,
}

fn parse_variant(s: &str) -> std::result::Result<Variant, String> {
    serde_json::from_value(serde_json::Value::String(s.into())).map_err(|_| format!("unknown variant {s}"))
}

fn parse_query_source(s: &str) -> std::result::Result<QuerySource, String> {
    serde_json::from_value(serde_json::Value::String(s.into())).map_err(|_| format!("unknown query source {s}"))
}

macro_rules! apply {
    ($cfg:ident, $o:ident, $($field:ident),+) => {
        $(if let Some(v) = $o.$field { $cfg.$field = v; })+
    };
}

impl ConfigArgs {
    fn resolve(self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::from_file(path)?,
            None => RunConfig::default(),
        };
        let o = self.overrides;
        apply!(
            cfg,
            o,
            dataset,
            output,
            trials,
            channels,
            trial_epochs,
            samples,
            sample_rate,
            classes,
            variant,
            spatial_filters,
            temporal_kernel,
            feature_dim,
            bimap_dim,
            gru_hidden,
            proj_dim,
            stft_window,
            stft_hop,
            tau_top,
            eps,
            reeig_threshold,
            temperature,
            beta,
            kappa,
            lr,
            batch_size,
            epochs,
            seed,
            meta_optimizer,
            query_source
        );
        if o.noise.is_some() {
            cfg.noise = o.noise;
        }
        if let Some(v) = o.split_train {
            cfg.split.train = v;
        }
        if let Some(v) = o.split_val {
            cfg.split.val = v;
        }
        if let Some(v) = o.split_test {
            cfg.split.test = v;
        }
        cfg.validate()?;
        eprintln!("effective config:\n{}", cfg.to_json());
        Ok(cfg)
    }
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    /// train, val, test or all
    #[arg(long, default_value = "test")]
    split: SplitName,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    /// attention, tangent, adjacency or scores
    #[arg(long)]
    what: ExportKind,
    #[arg(long, default_value = "test")]
    split: SplitName,
    /// Directory for the CSV files.
    #[arg(long, default_value = "export")]
    output: PathBuf,
}

#[derive(Args)]
struct CheckGradArgs {
    /// Restrict to one module (spd-layers, manifold-attention, dynamic-graph,
    /// pipeline) or one operation.
    #[arg(long)]
    module: Option<String>,
    #[arg(long, default_value_t = 10)]
    seeds: u64,
    #[arg(long, default_value_t = DEFAULT_TOLERANCE)]
    tolerance: f64,
}

fn to_json<T: serde::Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("serializable")
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(args) => {
            let cfg = args.resolve()?;
            let manifest = commands::cmd_gen_data(&cfg)?;
            println!("{}", to_json(&manifest));
        }
        Command::Train(args) => {
            let cfg = args.resolve()?;
            let report = commands::cmd_train(&cfg)?;
            println!("{}", to_json(&report));
        }
        Command::Eval(args) => {
            let metrics = commands::cmd_eval(&args.checkpoint, &args.dataset, args.split)?;
            println!("{}", to_json(&metrics));
        }
        Command::Export(args) => {
            let paths = commands::cmd_export(&args.checkpoint, &args.dataset, args.what, args.split, &args.output)?;
            for p in paths {
                println!("{}", p.display());
            }
        }
        Command::CheckGrad(args) => {
            let outcomes = commands::cmd_check_grad(args.module.as_deref(), args.seeds, args.tolerance)?;
            for o in &outcomes {
                println!(
                    "{} {:<10} {:<20} worst rel err {:.3e} (seed {}) over {} seeds",
                    if o.passed { "PASS" } else { "FAIL" },
                    o.operation,
                    o.module,
                    o.worst_error,
                    o.worst_seed,
                    o.seeds
                );
            }
            let failed: Vec<&str> = outcomes.iter().filter(|o| !o.passed).map(|o| o.operation).collect();
            if !failed.is_empty() {
                return Err(Error::NumericalFailure(format!("gradient check failed for {}", failed.join(", "))));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let threads = std::env::var(commands::THREADS_ENV).ok();
    let result = commands::init_thread_pool(threads.as_deref()).and_then(|()| run(cli));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(commands::exit_code(&e) as u8)
        }
    }
}

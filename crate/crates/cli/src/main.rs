//! `deeprobe` command-line harness: train the ensemble, generate
//! corner-case corpora, run hyperparameter sweeps, and evaluate
//! augmenting retraining.

mod commands;
mod render;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use deeprobe_core::config::RunConfig;
use deeprobe_core::Error as CoreError;

#[derive(Parser)]
#[command(
    name = "deeprobe",
    about = "Differential testing for small convolutional classifiers",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the three model variants and save their weights.
    Train(CommonArgs),
    /// Generate a corner-case corpus from test-set seeds.
    Generate(GenerateArgs),
    /// Runtime grid over lambda1 x lambda2 (time to first divergence).
    SweepLambda(CommonArgs),
    /// Coverage as a function of the activation threshold.
    SweepThreshold(CommonArgs),
    /// Coverage as a function of the number of seeds.
    SweepSeeds(CommonArgs),
    /// Retrain on corpus-augmented data and compare control strategies.
    AugmentRetrain(AugmentArgs),
    /// Render any report JSON as a human-readable table.
    Report(ReportArgs),
}

#[derive(Args, Clone, Default)]
struct CommonArgs {
    /// Flat key=value config file; CLI flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset path (directory for idx/image_dir_csv).
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Dataset format: idx, image_dir_csv or builtin_synthetic.
    #[arg(long)]
    format: Option<String>,
    /// Model variants, comma separated (exactly three).
    #[arg(long, value_delimiter = ',')]
    models: Option<Vec<String>>,
    #[arg(long)]
    lambda1: Option<f64>,
    #[arg(long)]
    lambda2: Option<f64>,
    #[arg(long)]
    step: Option<f64>,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    max_iters: Option<usize>,
    /// Constraint family: light, contrast, affine, blur, occl_rect,
    /// occl_dots or overlay:<mask.png>.
    #[arg(long)]
    constraint: Option<String>,
    /// Number of seed images sampled from the test set.
    #[arg(long)]
    seeds: Option<usize>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    rng_seed: Option<u64>,
    /// Output directory for this run.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Directory holding trained weights (<variant>.dprb).
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    retrain_epochs: Option<usize>,
    /// Control strategies for augment-retrain: none, random_original,
    /// random_transform or both.
    #[arg(long)]
    control: Option<String>,
    /// Deviating-model policy: least_confident or round_robin.
    #[arg(long)]
    policy: Option<String>,
    #[arg(long)]
    coverage_model: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    lambda1_grid: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    lambda2_grid: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    threshold_grid: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    seed_counts: Option<Vec<usize>>,
    /// Repetitions per runtime cell (trimmed mean).
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long)]
    occl_width: Option<usize>,
    #[arg(long)]
    occl_height: Option<usize>,
    #[arg(long)]
    dots_count: Option<usize>,
    #[arg(long)]
    dots_color: Option<String>,
    #[arg(long)]
    synthetic_train: Option<usize>,
    #[arg(long)]
    synthetic_test: Option<usize>,
}

#[derive(Args)]
struct GenerateArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Replay a previous run: take the config from its manifest (inputs
    /// are hash-verified first).
    #[arg(long)]
    from_manifest: Option<PathBuf>,
}

#[derive(Args)]
struct AugmentArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Output directory of a `generate` run (holds corpus/ and seeds.json).
    #[arg(long)]
    corpus: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// Report file to render (any deeprobe JSON output).
    #[arg(long = "in")]
    input: PathBuf,
}

impl CommonArgs {
    fn build_config(&self) -> Result<RunConfig, CoreError> {
        let mut config = RunConfig::default();
        if let Some(path) = &self.config {
            config.apply_file(path)?;
        }
        if let Some(v) = &self.dataset {
            config.dataset = Some(v.clone());
        }
        if let Some(v) = &self.format {
            config.format = v.clone();
        }
        if let Some(v) = &self.models {
            config.models = v.clone();
        }
        if let Some(v) = self.lambda1 {
            config.lambda1 = v;
        }
        if let Some(v) = self.lambda2 {
            config.lambda2 = v;
        }
        if let Some(v) = self.step {
            config.step = v;
        }
        if let Some(v) = self.threshold {
            config.threshold = v;
        }
        if let Some(v) = self.max_iters {
            config.max_iters = v;
        }
        if let Some(v) = &self.constraint {
            config.constraint = v.clone();
        }
        if let Some(v) = self.seeds {
            config.seeds = v;
        }
        if let Some(v) = self.workers {
            config.workers = v;
        }
        if let Some(v) = self.rng_seed {
            config.rng_seed = v;
        }
        if let Some(v) = &self.out {
            config.out = v.clone();
        }
        if let Some(v) = &self.weights {
            config.weights = Some(v.clone());
        }
        if let Some(v) = self.epochs {
            config.epochs = v;
        }
        if let Some(v) = self.learning_rate {
            config.learning_rate = v;
        }
        if let Some(v) = self.batch_size {
            config.batch_size = v;
        }
        if let Some(v) = self.retrain_epochs {
            config.retrain_epochs = v;
        }
        if let Some(v) = &self.control {
            config.control = v.clone();
        }
        if let Some(v) = &self.policy {
            config.policy = v.clone();
        }
        if let Some(v) = self.coverage_model {
            config.coverage_model = v;
        }
        if let Some(v) = &self.lambda1_grid {
            config.lambda1_grid = v.clone();
        }
        if let Some(v) = &self.lambda2_grid {
            config.lambda2_grid = v.clone();
        }
        if let Some(v) = &self.threshold_grid {
            config.threshold_grid = v.clone();
        }
        if let Some(v) = &self.seed_counts {
            config.seed_counts = v.clone();
        }
        if let Some(v) = self.reps {
            config.reps = v;
        }
        if let Some(v) = self.occl_width {
            config.occl_width = v;
        }
        if let Some(v) = self.occl_height {
            config.occl_height = v;
        }
        if let Some(v) = self.dots_count {
            config.dots_count = v;
        }
        if let Some(v) = &self.dots_color {
            config.dots_color = v.clone();
        }
        if let Some(v) = self.synthetic_train {
            config.synthetic_train = v;
        }
        if let Some(v) = self.synthetic_test {
            config.synthetic_test = v;
        }
        Ok(config)
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let _ = e.print();
            // Explicit --help/--version succeed; everything else (no
            // arguments, unknown flags, bad values) is a usage error.
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    let result = match cli.command {
        Command::Train(args) => args.build_config().and_then(commands::train),
        Command::Generate(args) => args.common.build_config().and_then(|config| {
            commands::generate(config, args.from_manifest.as_deref(), args.common.out.clone())
        }),
        Command::SweepLambda(args) => args.build_config().and_then(commands::sweep_lambda),
        Command::SweepThreshold(args) => args.build_config().and_then(commands::sweep_threshold),
        Command::SweepSeeds(args) => args.build_config().and_then(commands::sweep_seeds),
        Command::AugmentRetrain(args) => args
            .common
            .build_config()
            .and_then(|config| commands::augment_retrain(config, args.corpus.clone())),
        Command::Report(args) => commands::report(&args.input),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                CoreError::Usage(_) | CoreError::Config(_) => ExitCode::from(1),
                _ => ExitCode::from(2),
            }
        }
    }
}

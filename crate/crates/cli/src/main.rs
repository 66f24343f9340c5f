mod commands;
mod figures;
mod manifest;

use clap::{Args, Parser, Subcommand, ValueEnum};
use std::path::PathBuf;
use std::process::ExitCode;
use stedr::StedrError;

/// Subgroup-aware treatment effect estimation and drug screening.
#[derive(Debug, Parser)]
#[command(name = "stedr", version, about, propagate_version = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a benchmark dataset or a synthetic claims corpus.
    Gen(GenArgs),
    /// Train a model on a dataset and write a checkpoint.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset and write a metrics JSON.
    Eval(EvalArgs),
    /// Emulate one trial for one drug on a claims corpus.
    Emulate(EmulateArgs),
    /// Run the drug screen over a claims corpus.
    Screen(ScreenArgs),
    /// Render figures from screen and attention CSV files.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Generator {
    /// Static covariates with a time-dependent effect.
    A,
    /// Sequential covariates.
    B,
    /// Response surface over a covariate table.
    Surface,
    /// Claims corpus with planted drug effects.
    Claims,
}

#[derive(Debug, Args)]
struct GenArgs {
    /// Which generator to run.
    #[arg(long, value_enum)]
    generator: Generator,
    /// Number of samples (patients for `claims`). Required except for `surface`.
    #[arg(long)]
    n: Option<usize>,
    /// Random seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output JSON-lines file.
    #[arg(long)]
    out: PathBuf,
    /// Covariate CSV for `surface`; a built-in table is used when absent.
    #[arg(long)]
    covariates: Option<PathBuf>,
    /// Treatment column name in the covariate CSV.
    #[arg(long, default_value = "treatment")]
    treatment_column: String,
    /// Claims corpus configuration JSON (fields of the corpus config).
    #[arg(long)]
    config: Option<PathBuf>,
}

/// Training flags; each overrides the same field of the config file.
#[derive(Debug, Args, Default)]
struct TrainOverrides {
    /// Number of subgroups.
    #[arg(long)]
    k: Option<usize>,
    /// Overlap penalty strength.
    #[arg(long)]
    alpha: Option<f64>,
    /// Learning rate.
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Mini-batch size.
    #[arg(long)]
    batch_size: Option<usize>,
    /// Maximum number of epochs.
    #[arg(long)]
    max_epochs: Option<usize>,
    /// Early-stopping patience in epochs.
    #[arg(long)]
    patience: Option<usize>,
    /// Drop the mixture prior (single global distribution).
    #[arg(long)]
    ablate_gmm: bool,
    /// Drop the input attention.
    #[arg(long)]
    ablate_attention: bool,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Dataset written by `gen`.
    #[arg(long)]
    data: PathBuf,
    /// Training config JSON; field names follow the training config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output checkpoint path.
    #[arg(long)]
    out: PathBuf,
    /// Random seed; overrides the config file.
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    overrides: TrainOverrides,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum EvalSplit {
    /// The checkpoint's held-out test indices.
    Test,
    /// Every sample in the file.
    All,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Checkpoint written by `train`.
    #[arg(long)]
    model: PathBuf,
    /// Dataset to score.
    #[arg(long)]
    data: PathBuf,
    /// Samples to score.
    #[arg(long, value_enum, default_value_t = EvalSplit::All)]
    split: EvalSplit,
    /// Metrics JSON path; defaults to `<model>.metrics.json`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ControlModeArg {
    Random,
    SameClass,
}

#[derive(Debug, Args)]
struct EmulateArgs {
    /// Claims corpus written by `gen --generator claims`.
    #[arg(long)]
    corpus: PathBuf,
    /// Trial drug id.
    #[arg(long)]
    drug: usize,
    /// Trial index, used with the seed to derive the trial seed.
    #[arg(long, default_value_t = 0)]
    trial_index: usize,
    /// How controls are drawn.
    #[arg(long, value_enum, default_value_t = ControlModeArg::Random)]
    control_mode: ControlModeArg,
    /// Screen seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Screen config JSON (criteria and per-trial training config).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Debug, Args)]
struct ScreenArgs {
    /// Claims corpus written by `gen --generator claims`.
    #[arg(long)]
    corpus: PathBuf,
    /// Comma-separated drug ids; every catalog drug when absent.
    #[arg(long, value_delimiter = ',')]
    drugs: Option<Vec<usize>>,
    /// Trials per drug.
    #[arg(long)]
    n_trials: Option<usize>,
    /// Screen seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Screen config JSON.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Worker threads; falls back to STEDR_THREADS, then all cores.
    #[arg(long)]
    threads: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Debug, Args)]
struct ReportArgs {
    /// Screen CSV written by `screen` (report.csv).
    #[arg(long)]
    screen_csv: Option<PathBuf>,
    /// Attention CSV written by `emulate` (attention.csv).
    #[arg(long)]
    attention_csv: Option<PathBuf>,
    /// Output directory for SVG figures.
    #[arg(long)]
    out_dir: PathBuf,
}

/// Exit status for configuration problems: bad flags, unreadable inputs,
/// invalid config values.
const EXIT_CONFIG: u8 = 2;
/// Exit status for failures while running a valid configuration.
const EXIT_RUNTIME: u8 = 3;

/// Marks an error as a configuration problem.
#[derive(Debug)]
struct ConfigError(String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.downcast_ref::<ConfigError>().is_some() {
            return EXIT_CONFIG;
        }
        if let Some(e) = cause.downcast_ref::<StedrError>() {
            return match e {
                StedrError::InvalidArgument(_) | StedrError::InvalidConfig(_) | StedrError::Json(_) => EXIT_CONFIG,
                StedrError::Io(io) if io.kind() == std::io::ErrorKind::NotFound => EXIT_CONFIG,
                _ => EXIT_RUNTIME,
            };
        }
        if cause.downcast_ref::<serde_json::Error>().is_some() {
            return EXIT_CONFIG;
        }
    }
    EXIT_RUNTIME
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            eprintln!("{}", msg.lines().next().unwrap_or("invalid arguments"));
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    let result = match cli.command {
        Command::Gen(a) => commands::gen(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Emulate(a) => commands::emulate(a),
        Command::Screen(a) => commands::screen(a),
        Command::Report(a) => commands::report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let chain: Vec<String> = e.chain().map(|c| c.to_string()).collect();
            eprintln!("error: {}", chain.join(": ").replace('\n', " "));
            ExitCode::from(exit_code(&e))
        }
    }
}

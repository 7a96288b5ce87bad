use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use exposura::{Error, ErrorKind};

mod commands;

#[derive(Parser)]
#[command(name = "exposura", version, about = "Exposure-correction GAN toolkit")]
struct Cli {
    /// Worker threads for per-image work and GEMM fan-out. Falls back to
    /// EXPOSURA_THREADS, then to the number of cores.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train generator and discriminator on paired images.
    Train(TrainArgs),
    /// Correct every image under a directory with a trained generator.
    Infer(InferArgs),
    /// PSNR/SSIM (and optionally NIQE/PI) of predictions against references.
    Eval(EvalArgs),
    /// Write EV-shifted copies of every image under a directory.
    SimulateEv(SimulateArgs),
    /// Alpha-matte MSE/MAE grid over conditions and EVs.
    MattingEval(MattingArgs),
    /// Fit a NIQE pristine model to a folder of sharp, well-exposed images.
    FitPristine(FitPristineArgs),
    /// Check analytic gradients against central finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// key=value config; defaults are used for absent keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset root holding input/ and target/ (or train/input, train/target).
    #[arg(long)]
    data_root: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Continue from this checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Adds a NIQE column.
    #[arg(long)]
    pristine_model: Option<PathBuf>,
    /// CSV with columns id,ma. Adds a PI column; needs --pristine-model.
    #[arg(long, requires = "pristine_model")]
    ma_scores: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Png,
    Imgf,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    input: PathBuf,
    /// Comma-separated stops, e.g. "-1.5,-1,+1,+1.5".
    #[arg(long, allow_hyphen_values = true)]
    evs: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "png")]
    format: Format,
}

#[derive(Args)]
struct MattingArgs {
    /// Root that manifest `pred` paths are relative to.
    #[arg(long)]
    pred: PathBuf,
    /// Holds `<dataset>/<image>` ground-truth mattes.
    #[arg(long)]
    gt: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FitPristineArgs {
    #[arg(long)]
    input: PathBuf,
    /// Output `.expw` file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Restrict to these cases; repeatable.
    #[arg(long = "case")]
    cases: Vec<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also run a deliberately broken gradient, which must fail.
    #[arg(long)]
    negative_control: bool,
    /// Also write gradcheck.csv here.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn exit_code(kind: ErrorKind) -> u8 {
    match kind {
        ErrorKind::Usage => 1,
        ErrorKind::Data => 2,
        ErrorKind::Numeric => 3,
    }
}

fn threads(flag: Option<usize>) -> Result<Option<usize>, Error> {
    if flag.is_some() {
        return Ok(flag);
    }
    match std::env::var("EXPOSURA_THREADS") {
        Ok(v) => v.trim().parse().map(Some).map_err(|_| {
            Error::InvalidArgument(format!(
                "EXPOSURA_THREADS must be a thread count, got {v:?}"
            ))
        }),
        Err(_) => Ok(None),
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    if let Some(n) = threads(cli.threads)? {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    }
    match cli.command {
        Command::Train(a) => commands::train(a),
        Command::Infer(a) => commands::infer(a),
        Command::Eval(a) => commands::eval(a),
        Command::SimulateEv(a) => commands::simulate_ev(a),
        Command::MattingEval(a) => commands::matting_eval(a),
        Command::FitPristine(a) => commands::fit_pristine(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(e.kind()))
        }
    }
}

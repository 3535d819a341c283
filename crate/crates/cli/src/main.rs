mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use distilab::Error;

/// Train teachers, distill students and measure how closely they agree.
#[derive(Debug, Parser)]
#[command(name = "distilab", version)]
struct Cli {
    /// Overrides every run seed in the config (and the trial seed list, if any).
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Format {
    Json,
    Csv,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the config's teacher; writes teacher.ckpt and teacher.{json,csv}.
    TrainTeacher {
        #[arg(long)]
        config: PathBuf,
    },
    /// Train M teachers with seeds seed..seed+M-1 and evaluate their ensemble.
    TrainEnsemble {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        m: usize,
    },
    /// Distill the config's student from its teacher checkpoints.
    Distill {
        #[arg(long)]
        config: PathBuf,
    },
    /// Fidelity of a student checkpoint to one or more teacher checkpoints.
    Eval {
        #[arg(long)]
        student: PathBuf,
        #[arg(long, required = true, num_args = 1..)]
        teacher: Vec<PathBuf>,
        /// JSON data spec: {"dir", "split": "train"|"test", "subset"?, "data_split"?}.
        #[arg(long)]
        data: PathBuf,
        /// Also write eval.{json,csv} here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Teacher on D0, then students distilled on D0, D1 and D0 ∪ D1.
    Recycle {
        #[arg(long)]
        config: PathBuf,
    },
    /// Students initialized at λ·teacher + (1 − λ)·random.
    ConvexSweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, num_args = 1.., value_delimiter = ',')]
        lambdas: Option<Vec<f32>>,
    },
    /// Distillation loss over the plane through teacher, initial and final student.
    Surface {
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        init: PathBuf,
        #[arg(long = "final")]
        final_: PathBuf,
        #[arg(long)]
        config: PathBuf,
    },
    /// Students across optimizers and epoch budgets.
    OptAblation {
        #[arg(long)]
        config: PathBuf,
    },
    /// Students sharing the teacher's initialization versus fresh ones.
    SharedInit {
        #[arg(long)]
        config: PathBuf,
    },
    /// Writes raw logits (τ = 1) as CSV with a JSON sidecar.
    DumpLogits {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Summarizes every metrics report in a directory.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, value_enum, default_value = "csv")]
        format: Format,
    },
    /// Renders a surface CSV as an SVG heatmap.
    PlotSurface {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn root(e: &Error) -> &Error {
    match e {
        Error::TrainingFault { source, .. } => root(source),
        other => other,
    }
}

/// Exit code and one-word category for an error.
fn classify(e: &Error) -> (u8, &'static str) {
    match root(e) {
        Error::Config(_)
        | Error::Json(_)
        | Error::Parse { .. }
        | Error::InvalidArgument(_)
        | Error::UnknownStage(_) => (2, "config"),
        Error::MissingFile(_) => (3, "missing-file"),
        Error::NumericFault { .. } => (4, "numeric"),
        Error::Interrupted => (5, "interrupted"),
        Error::ArchitectureMismatch(_) | Error::Shape { .. } => (2, "architecture"),
        Error::Checkpoint(_) => (1, "checkpoint"),
        Error::DegeneratePlane(_) => (1, "degenerate-plane"),
        Error::Io { .. } | Error::TrainingFault { .. } => (1, "io"),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let cancel = distilab::protocols::CancelToken::default();
    let handler = cancel.clone();
    if let Err(e) = ctrlc::set_handler(move || handler.cancel()) {
        log::warn!("cannot install interrupt handler: {e}");
    }
    match commands::run(cli.command, cli.seed, cancel) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (code, category) = classify(&e);
            eprintln!("error[{category}]: {e}");
            ExitCode::from(code)
        }
    }
}

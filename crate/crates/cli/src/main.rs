use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rgbt_cli::commands::{
    parse_sweep, run_cost, run_eval, run_init_weights, run_make_toy, run_params, run_track, run_train,
};
use rgbt_cli::config::RunConfig;
use rgbt_cli::selftest::run_selftest;
use rgbt_cli::toydata::ToyBenchmark;
use rgbt_cli::{CliError, CliResult};

/// RGB-T tracking with a frozen transformer tracker and tuned prompters.
#[derive(Parser)]
#[command(name = "rgbt", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// key = value file; omitted keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key after the file is read, e.g. `--set epochs=2`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> CliResult<RunConfig> {
        Ok(RunConfig::load(self.config.as_deref(), &self.sets)?)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Track one sequence and write one x,y,w,h line per frame.
    Track {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        sequence: PathBuf,
        /// Weight archive with the foundation (and optionally prompters).
        #[arg(long)]
        weights: PathBuf,
        /// Prompter archive written by `train`.
        #[arg(long)]
        prompter: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Tune the prompters on synthetic pairs.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Foundation archive; a seeded random foundation otherwise.
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score result files against a benchmark manifest.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        manifest: PathBuf,
        /// Directory with one `<sequence>.txt` per sequence.
        #[arg(long)]
        results: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print tuned versus frozen parameter counts.
    Params {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Print the forward-pass cost per fusion location.
    Cost {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Fusion locations `A..B`; bare `--sweep` covers 1..L-1.
        #[arg(long, num_args = 0..=1, default_missing_value = "")]
        sweep: Option<String>,
    },
    /// Run the built-in invariant checks.
    Selftest,
    /// Write a seeded random foundation archive.
    InitWeights {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a small synthetic benchmark with a manifest.
    MakeToy {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 3)]
        sequences: usize,
        #[arg(long, default_value_t = 6)]
        frames: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn run(cli: Cli, out: &mut dyn Write) -> CliResult<()> {
    match cli.command {
        Command::Track { cfg, sequence, weights, prompter, out: results } => {
            run_track(&cfg.load()?, &sequence, &weights, prompter.as_deref(), &results, out)
        }
        Command::Train { cfg, weights, out: dir } => run_train(&cfg.load()?, weights.as_deref(), &dir, out),
        Command::Eval { cfg, manifest, results, out: report } => {
            run_eval(&cfg.load()?, &manifest, &results, &report, out)
        }
        Command::Params { cfg } => run_params(&cfg.load()?, out),
        Command::Cost { cfg, sweep } => {
            let cfg = cfg.load()?;
            let range = match sweep.as_deref() {
                None => None,
                Some("") => Some(1..=cfg.tracker.foundation.num_blocks - 1),
                Some(s) => Some(parse_sweep(s)?),
            };
            run_cost(&cfg, range, out)
        }
        Command::Selftest => run_selftest(out),
        Command::InitWeights { cfg, out: path } => run_init_weights(&cfg.load()?, &path, out),
        Command::MakeToy { out: dir, sequences, frames, seed } => {
            let spec = ToyBenchmark { sequences, frames, seed, ..ToyBenchmark::default() };
            run_make_toy(&spec, &dir, out)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let stdout = io::stdout();
    let mut lock = stdout.lock();
    match run(cli, &mut lock) {
        Ok(()) => ExitCode::SUCCESS,
        // Downstream closed the pipe (`rgbt params | head`); nothing left to report.
        Err(CliError::Output(e)) if e.kind() == io::ErrorKind::BrokenPipe => ExitCode::SUCCESS,
        Err(e) => {
            let _ = lock.flush();
            let err: &CliError = &e;
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mudemod_core::{Error, Result};
use mudemod_harness::config::ExperimentConfig;
use mudemod_harness::experiment::{self, Layout};
use mudemod_harness::plot;

/// Multi-user MIMO demodulation experiments.
#[derive(Parser)]
#[command(name = "mudemod", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration file (TOML).
    config: PathBuf,
    /// Override a configuration key, e.g. `--set dit.epochs=5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Shorthand for `--set seed=N`.
    #[arg(long)]
    seed: Option<u64>,
    /// Shorthand for `--set output_dir=PATH`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(short, long)]
    quiet: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate training and validation datasets.
    GenData(Common),
    /// Train the timestep aligner.
    TrainAligner(Common),
    /// Train the diffusion transformer teacher.
    TrainDit(Common),
    /// Distill a single-step student from the trained teacher.
    Distill(Common),
    /// Evaluate all configured methods on the validation sets.
    Evaluate(Common),
    /// Run every stage, reusing datasets and checkpoints that already exist.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Rebuild datasets and checkpoints even if present.
        #[arg(long)]
        fresh: bool,
    },
    /// Redraw plots from an existing metrics CSV.
    Plot(Common),
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut overrides = self.overrides.clone();
        if let Some(s) = self.seed {
            overrides.push(format!("seed={s}"));
        }
        if let Some(o) = &self.out {
            overrides.push(format!("output_dir={}", toml_string(&o.display().to_string())));
        }
        ExperimentConfig::load(&self.config, &overrides)
    }
}

fn toml_string(s: &str) -> String {
    format!("\"{}\"", s.replace('\\', "\\\\").replace('"', "\\\""))
}

fn run(cli: Cli) -> Result<()> {
    let common = match &cli.command {
        Command::GenData(c)
        | Command::TrainAligner(c)
        | Command::TrainDit(c)
        | Command::Distill(c)
        | Command::Evaluate(c)
        | Command::Plot(c)
        | Command::Sweep { common: c, .. } => c,
    };
    let cfg = common.load()?;
    let quiet = common.quiet;
    let mut log = |msg: &str| {
        if !quiet {
            eprintln!("{msg}");
        }
    };
    match cli.command {
        Command::GenData(_) => {
            let dirs = experiment::generate_dataset(&cfg, &mut log)?;
            println!("wrote {} dataset directories under {}", dirs.len(), cfg.output_dir.display());
        }
        Command::TrainAligner(_) => println!("{}", experiment::train_aligner_stage(&cfg, &mut log)?.display()),
        Command::TrainDit(_) => println!("{}", experiment::train_dit_stage(&cfg, &mut log)?.display()),
        Command::Distill(_) => println!("{}", experiment::distill_stage(&cfg, &mut log)?.display()),
        Command::Evaluate(_) => {
            experiment::evaluate(&cfg, &mut log)?;
            println!("{}", Layout::of(&cfg).metrics_csv().display());
        }
        Command::Sweep { fresh, .. } => {
            experiment::run_experiment(&cfg, !fresh, &mut log)?;
            println!("{}", Layout::of(&cfg).metrics_csv().display());
        }
        Command::Plot(_) => {
            let layout = Layout::of(&cfg);
            let csv = layout.metrics_csv();
            if !csv.exists() {
                return Err(Error::Config(format!("{} not found; run `mudemod evaluate` first", csv.display())));
            }
            for p in plot::render_ber_plots(&csv, &layout.plot_dir())? {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_user_error() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}

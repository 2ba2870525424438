use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use pidsteer::cli::{self, ArmSelection, Context, SweepGrid};
use pidsteer::config::HarnessConfig;
use pidsteer::{Error, Execution, Result};

#[derive(Debug, Parser)]
#[command(name = "pidsteer", version, about = "PID-modulated activation steering harness")]
struct Cli {
    /// TOML configuration file (defaults are used when omitted).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override the master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory. Falls back to $PIDSTEER_OUT_DIR, then to the config.
    #[arg(long, global = true, env = "PIDSTEER_OUT_DIR")]
    out: Option<PathBuf>,

    /// Run episodes on a single thread.
    #[arg(long, global = true)]
    sequential: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ArmArg {
    Both,
    Steered,
    Baseline,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Sample labeled training and held-out chunks from the unsteered plant.
    GenData,
    /// Fit the redundancy classifier on the generated dataset.
    TrainClassifier,
    /// Compute the control vector from the generated dataset.
    ExtractVector,
    /// Run matched-seed episodes and write per-episode records and summaries.
    Simulate {
        #[arg(long, value_enum, default_value = "both")]
        arm: ArmArg,
        /// Shorthand for --arm steered.
        #[arg(long, conflicts_with_all = ["arm", "baseline"])]
        steered: bool,
        /// Shorthand for --arm baseline.
        #[arg(long, conflicts_with = "arm")]
        baseline: bool,
        /// Also record the first N steered episodes as replayable traces.
        #[arg(long, default_value_t = 0)]
        record: usize,
    },
    /// Grid search over controller gains.
    Sweep {
        /// Comma-separated values; defaults to the configured gain.
        #[arg(long)]
        kp: Option<String>,
        #[arg(long)]
        ki: Option<String>,
        #[arg(long)]
        kd: Option<String>,
        #[arg(long)]
        p_target: Option<String>,
        /// Allowed solve-rate drop below the baseline.
        #[arg(long, default_value_t = 0.02)]
        solve_margin: f64,
    },
    /// Run the controller over a recorded trace.
    Replay {
        #[arg(long)]
        trace: PathBuf,
    },
    /// Compare the baseline and steered summaries in the output directory.
    Report,
    /// Write the default configuration as TOML.
    InitConfig {
        /// Destination; printed to stdout when omitted.
        #[arg(long)]
        path: Option<PathBuf>,
    },
}

fn load_config(cli: &Cli) -> Result<HarnessConfig> {
    let mut cfg = match &cli.config {
        Some(path) => HarnessConfig::load(path)?,
        None => HarnessConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.paths.out_dir = out.clone();
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<String> {
    if let Command::InitConfig { path } = &cli.command {
        let text = HarnessConfig::default().to_toml()?;
        return match path {
            Some(p) => std::fs::write(p, &text)
                .map(|_| format!("wrote {}\n", p.display()))
                .map_err(|e| Error::Io {
                    path: p.clone(),
                    source: e,
                }),
            None => Ok(text),
        };
    }

    let cfg = load_config(&cli)?;
    let mut ctx = Context::new(cfg)?;
    if cli.sequential {
        ctx.exec = Execution::Sequential;
    }
    let grid_axis = |arg: &Option<String>, default: f64| match arg {
        Some(s) => cli::parse_list(s),
        None => Ok(vec![default]),
    };

    match &cli.command {
        Command::GenData => cli::gen_data(&ctx),
        Command::TrainClassifier => cli::train_classifier(&ctx),
        Command::ExtractVector => cli::extract_vector(&ctx),
        Command::Simulate {
            arm,
            steered,
            baseline,
            record,
        } => {
            let selection = match (arm, steered, baseline) {
                (_, true, _) => ArmSelection::Steered,
                (_, _, true) => ArmSelection::Baseline,
                (ArmArg::Both, ..) => ArmSelection::Both,
                (ArmArg::Steered, ..) => ArmSelection::Steered,
                (ArmArg::Baseline, ..) => ArmSelection::Baseline,
            };
            cli::simulate(&ctx, selection, *record)
        }
        Command::Sweep {
            kp,
            ki,
            kd,
            p_target,
            solve_margin,
        } => {
            let g = &ctx.cfg.gains;
            let grid = SweepGrid {
                kp: grid_axis(kp, g.kp)?,
                ki: grid_axis(ki, g.ki)?,
                kd: grid_axis(kd, g.kd)?,
                p_target: grid_axis(p_target, g.p_target)?,
            };
            cli::sweep(&ctx, &grid, *solve_margin)
        }
        Command::Replay { trace } => cli::replay(&ctx, trace),
        Command::Report => cli::report(&ctx),
        Command::InitConfig { .. } => unreachable!("handled above"),
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
        Ok(text) => {
            print!("{text}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

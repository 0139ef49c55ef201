//! `cme-synth`: run the synthesis pipeline from a configuration file, or
//! re-render the report of a finished run.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use cme_synth::pipeline::{self, RunOptions, Stage};

#[derive(Parser)]
#[command(
    name = "cme-synth",
    version,
    about = "Policy synthesis with reach-avoid guarantees from trajectory data"
)]
struct Cli {
    /// Log progress (repeat for more detail).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every stage up to `--stage`.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum, default_value = "report")]
        stage: StageArg,
        /// Worker threads (0 uses every core).
        #[arg(long)]
        workers: Option<usize>,
        /// Overrides `sim.seed`.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides `output.dir`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Rebuild the plot and summary of a completed run directory.
    Report {
        #[arg(long)]
        dir: PathBuf,
    },
    /// Print the default configuration.
    DefaultConfig,
}

#[derive(Clone, Copy, ValueEnum)]
enum StageArg {
    GenData,
    Fit,
    Abstract,
    Synthesize,
    Validate,
    Report,
}

impl From<StageArg> for Stage {
    fn from(s: StageArg) -> Self {
        match s {
            StageArg::GenData => Stage::GenData,
            StageArg::Fit => Stage::Fit,
            StageArg::Abstract => Stage::Abstract,
            StageArg::Synthesize => Stage::Synthesize,
            StageArg::Validate => Stage::Validate,
            StageArg::Report => Stage::Report,
        }
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".into(), |x| format!("{x:.4}"))
}

fn print_summary(s: &cme_synth::report::Summary) {
    println!(
        "regions {}  safe {}  eps1 {}  e_avg {}  p_lower_avg {}  p_upper_avg {}  p_hat_avg {}  abstraction {} min  synthesis {} min",
        s.regions,
        s.safe_regions,
        fmt_opt(s.eps1),
        fmt_opt(s.e_avg),
        fmt_opt(s.p_lower_avg),
        fmt_opt(s.p_upper_avg),
        fmt_opt(s.p_hat_avg),
        fmt_opt(s.abstraction_time_min),
        fmt_opt(s.synthesis_time_min),
    );
    if s.degenerate {
        println!("warning: no safe regions, the specification is degenerate");
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let result = match cli.command {
        Command::Run {
            config,
            stage,
            workers,
            seed,
            out,
        } => {
            let opts = RunOptions {
                stage: stage.into(),
                workers,
                seed,
                out,
            };
            pipeline::run_file(&config, &opts).map(|o| {
                println!("artifacts in {}", o.dir.display());
                if let Some(s) = &o.manifest.summary {
                    print_summary(s);
                }
            })
        }
        Command::Report { dir } => pipeline::report_dir(&dir).map(|s| print_summary(&s)),
        Command::DefaultConfig => {
            print!("{}", cme_synth::config::RunConfig::default().to_toml());
            Ok(())
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // messages already embed their causes
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

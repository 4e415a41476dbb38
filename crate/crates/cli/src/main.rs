mod config;
mod data;
mod runs;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use pathloss_core::experiment::CellKey;
use pathloss_core::transforms::AugmentationPlan;

use data::{ExtractConfig, GenConfig};
use runs::SweepConfig;

#[derive(Parser)]
#[command(
    name = "pathloss",
    version,
    about = "Path profile extraction, CNN path loss training and reflection augmentation sweeps"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// More logging (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    /// Only errors.
    #[arg(short, long, global = true)]
    quiet: bool,
}

#[derive(Args)]
struct Common {
    /// JSON config file; missing keys take their defaults.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set training.epochs=5`. Values are
    /// parsed as JSON, falling back to a plain string. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory.
    #[arg(short, long, env = "PATHLOSS_OUT", default_value = "pathloss-out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate procedural regions (DSM/DTM rasters) and labelled link tables.
    #[command(after_help = config::keys_help::<GenConfig>("Config keys", data::GEN_DOCS))]
    Gen(Common),

    /// Turn link tables and rasters into `.rppl` profile tensors.
    #[command(after_help = config::keys_help::<ExtractConfig>("Config keys", data::PROFILE_DOCS))]
    Extract {
        #[command(flatten)]
        common: Common,
        /// Directory holding `<region>_dsm.asc` and `<region>_dtm.asc`.
        #[arg(long)]
        rasters: PathBuf,
        /// Link CSV files.
        #[arg(long, required = true, num_args = 1..)]
        links: Vec<PathBuf>,
        /// Exit non-zero when any link fails.
        #[arg(long)]
        strict: bool,
    },

    /// Write reflected copies of selected profiles.
    #[command(after_help = config::keys_help::<AugmentationPlan>("Config keys", data::AUGMENT_DOCS))]
    Augment {
        #[command(flatten)]
        common: Common,
        /// Directory of `.rppl` profiles.
        #[arg(long)]
        profiles: PathBuf,
    },

    /// Train and evaluate a single sweep cell.
    #[command(after_help = config::keys_help::<SweepConfig>("Config keys", runs::SWEEP_DOCS))]
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        holdout: String,
        /// Reflected copies per training region.
        #[arg(long, default_value_t = 0)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        repeat: usize,
    },

    /// Run every (holdout, n, repeat) cell, then write the report.
    #[command(after_help = config::keys_help::<SweepConfig>("Config keys", runs::SWEEP_DOCS))]
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Skip cells already completed in the manifest.
        #[arg(long)]
        resume: bool,
        /// Worker threads; cells run in parallel.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },

    /// Score a checkpoint on a profile directory.
    Eval {
        /// Output directory.
        #[arg(short, long, env = "PATHLOSS_OUT", default_value = "pathloss-out")]
        out: PathBuf,
        /// `.rpnn` checkpoint.
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        profiles: PathBuf,
        /// Also score the reflected profiles and the reciprocity gap.
        #[arg(long)]
        reciprocity: bool,
    },

    /// Rebuild summary tables and KDE curves from a sweep directory.
    Report {
        /// Sweep output directory.
        #[arg(long)]
        run: PathBuf,
        /// Report directory; defaults to `<run>/report`.
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Gen(c) => {
            let cfg: GenConfig = config::load(c.config.as_deref(), &c.overrides)?;
            data::gen(&cfg, &c.out)?;
            Ok(true)
        }
        Command::Extract {
            common: c,
            rasters,
            links,
            strict,
        } => {
            let cfg: ExtractConfig = config::load(c.config.as_deref(), &c.overrides)?;
            let failures = data::extract(&cfg, &rasters, &links, &c.out)?;
            for f in &failures {
                let line = f.line.map(|l| format!(":{l}")).unwrap_or_default();
                eprintln!("failed {}{line}: {}", f.file, f.reason);
            }
            Ok(!(strict && !failures.is_empty()))
        }
        Command::Augment { common: c, profiles } => {
            let plan: AugmentationPlan = config::load(c.config.as_deref(), &c.overrides)?;
            let n = data::augment(&plan, &profiles, &c.out)?;
            log::info!("wrote {n} reflected profiles to {}", c.out.display());
            Ok(true)
        }
        Command::Train {
            common: c,
            holdout,
            n,
            repeat,
        } => {
            let cfg: SweepConfig = config::load(c.config.as_deref(), &c.overrides)?;
            let r = runs::train(&cfg, &CellKey { holdout, n, repeat }, &c.out)?;
            println!(
                "identity {:.3} dB, reflected {:.3} dB, gap mean {:.3} dB sd {:.3} dB",
                r.identity.rmse, r.reflected.rmse, r.gap.mean, r.gap.sd
            );
            Ok(true)
        }
        Command::Sweep {
            common: c,
            resume,
            jobs,
        } => {
            let cfg: SweepConfig = config::load(c.config.as_deref(), &c.overrides)?;
            let summary = runs::sweep(&cfg, &c.out, resume, jobs)?;
            let written = runs::report(&c.out, &c.out.join("report"))?;
            log::info!("report: {} files", written.len());
            println!("{}", serde_json::to_string_pretty(&summary)?);
            Ok(summary.failed.is_empty())
        }
        Command::Eval {
            out,
            model,
            profiles,
            reciprocity,
        } => {
            let reports = runs::eval(&model, &profiles, reciprocity)?;
            std::fs::create_dir_all(&out)?;
            let path = out.join("eval.json");
            std::fs::write(&path, serde_json::to_vec_pretty(&reports)?)?;
            for (k, r) in &reports {
                println!(
                    "{k}: rmse {:.3} dB, mean error {:.3} dB, sd {:.3} dB",
                    r.rmse, r.mean_error, r.sd_error
                );
            }
            Ok(true)
        }
        Command::Report { run, out } => {
            let out = out.unwrap_or_else(|| run.join("report"));
            for p in runs::report(&run, &out)? {
                println!("{}", p.display());
            }
            Ok(true)
        }
    }
}

fn init_logging(verbose: u8, quiet: bool) {
    let level = match (quiet, verbose) {
        (true, _) => "error",
        (false, 0) => "warn",
        (false, 1) => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_logging(cli.verbose, cli.quiet);
    match run(cli).context("pathloss") {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

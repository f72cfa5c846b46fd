//! Command-line harness: pretraining, adaptation runs, ablation grids,
//! reports, and the built-in invariant suite.

use std::path::PathBuf;
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use comac_core::adapter::MethodVariant;
use comac_core::harness::runner::pretrain_for_seed;
use comac_core::harness::{self, ExperimentConfig};
use comac_core::stream::pretrain_default;

#[derive(Parser)]
#[command(
    name = "comac",
    about = "Continual multi-modal test-time adaptation lab",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Experiment config (TOML). Omit to use built-in defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Replace the config's seed list with this single seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Replace the config's variant list with this single variant.
    #[arg(long)]
    variant: Option<String>,
    /// Output directory (overrides config and COMAC_OUT_DIR).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads (0 = one per CPU).
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Print or validate configuration.
    Config {
        /// Print the full default config as TOML.
        #[arg(long)]
        defaults: bool,
        /// Validate a config file and echo the resolved settings.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Pretrain the source models and report holdout accuracy per seed.
    Pretrain(ConfigArgs),
    /// Run the (variant x seed) adaptation grid and write summary files.
    Adapt(ConfigArgs),
    /// Run the configured ablation grid (augmentation counts or sensitivity).
    Ablate(ConfigArgs),
    /// Render the table and SVG chart for a results directory.
    Report {
        /// Results directory containing summary.csv.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the built-in invariant suite.
    Selftest {
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
}

fn load_config(args: &ConfigArgs) -> Result<ExperimentConfig> {
    let mut cfg = match &args.config {
        Some(path) => ExperimentConfig::load(path)
            .with_context(|| format!("loading {}", path.display()))?,
        None => {
            let mut cfg = ExperimentConfig::default();
            cfg.world.ensure_prototypes();
            cfg
        }
    };
    if let Some(seed) = args.seed {
        cfg.run.seeds = vec![seed];
    }
    if let Some(v) = &args.variant {
        cfg.run.variants = vec![MethodVariant::from_str(v)?];
    }
    if let Some(out) = &args.out {
        cfg.run.output_dir = Some(out.clone());
    }
    if let Some(w) = args.workers {
        cfg.run.workers = w;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn main() {
    let cli = Cli::parse();
    let code = match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    };
    std::process::exit(code);
}

fn dispatch(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Config { defaults, config } => {
            if defaults {
                print!("{}", ExperimentConfig::defaults_toml());
                return Ok(0);
            }
            match config {
                Some(path) => {
                    let cfg = ExperimentConfig::load(&path)?;
                    println!(
                        "ok: {} variants x {} seeds, {} segments, output {}",
                        cfg.run.variants.len(),
                        cfg.run.seeds.len(),
                        cfg.effective_segments().len(),
                        cfg.output_dir().display()
                    );
                    Ok(0)
                }
                None => bail!("pass --defaults or --config <path>"),
            }
        }
        Command::Pretrain(args) => {
            let cfg = load_config(&args)?;
            let out_dir = cfg.output_dir();
            std::fs::create_dir_all(&out_dir)?;
            let mut lines = Vec::new();
            for &seed in &cfg.run.seeds {
                let pcfg = pretrain_for_seed(&cfg.pretrain, seed);
                let outcome = pretrain_default(&cfg.world, &pcfg)?;
                println!(
                    "seed {seed}: holdout accuracy 2d {:.4}, 3d {:.4}",
                    outcome.holdout_accuracy[0], outcome.holdout_accuracy[1]
                );
                lines.push(serde_json::json!({
                    "seed": seed,
                    "holdout_accuracy_2d": outcome.holdout_accuracy[0],
                    "holdout_accuracy_3d": outcome.holdout_accuracy[1],
                }));
            }
            std::fs::write(
                out_dir.join("pretrain.json"),
                serde_json::to_string_pretty(&lines)?,
            )?;
            Ok(0)
        }
        Command::Adapt(args) => {
            let cfg = load_config(&args)?;
            let summary = harness::run(&cfg)?;
            for r in &summary.results {
                println!(
                    "{:<12} seed {:<3} overall accuracy {:.4} miou {:.4} ({:.1}s)",
                    r.variant.name(),
                    r.seed,
                    r.overall.accuracy,
                    r.overall.miou,
                    r.wall_s
                );
            }
            for f in &summary.failures {
                eprintln!("FAILED {} seed {}: {}", f.variant.name(), f.seed, f.message);
            }
            println!("wrote {}", cfg.output_dir().join("summary.csv").display());
            if summary.results.is_empty() && !summary.failures.is_empty() {
                return Ok(1);
            }
            Ok(0)
        }
        Command::Ablate(args) => {
            let cfg = load_config(&args)?;
            let out_dir = cfg.output_dir();
            let path = harness::ablate(&cfg, &out_dir)?;
            println!("wrote {}", path.display());
            print!("{}", std::fs::read_to_string(&path)?);
            Ok(0)
        }
        Command::Report { out } => {
            let dir = out
                .or_else(|| std::env::var(harness::OUT_DIR_ENV).ok().map(PathBuf::from))
                .unwrap_or_else(|| PathBuf::from("results"));
            let table = harness::report::report(&dir)?;
            print!("{table}");
            println!("wrote {}", dir.join("report.svg").display());
            Ok(0)
        }
        Command::Selftest { seed } => {
            let report = harness::selftest(seed)?;
            for check in &report.checks {
                let tag = if check.passed { "ok  " } else { "FAIL" };
                println!("[{tag}] {:<28} {}", check.name, check.detail);
            }
            if report.all_passed() {
                println!("selftest passed ({} checks)", report.checks.len());
                Ok(0)
            } else {
                println!("selftest FAILED");
                Ok(1)
            }
        }
    }
}

//! `fedfs` — experiment driver for the federated personalization simulator.
//!
//! Subcommands: `generate` (synthetic universe to JSON lines), `pretrain`
//! (reference encoder to a flat .bin + .json sidecar), `run` (one of the
//! four experiment presets, artifacts to a directory), `report` (summary
//! table of a finished directory), `gradcheck` (finite-difference audit of
//! every loss gradient).
//!
//! The output root defaults to `./runs` and can be overridden with the
//! `FEDFS_OUT_ROOT` environment variable.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use fedfs::datagen::{generate_universe, save_dataset};
use fedfs::experiment::{plan_runs, run_experiment, ExperimentConfig, Preset};
use fedfs::pretrain::init_pretrained;
use fedfs::report::{render_report, write_artifacts};
use fedfs::rng::derive_seed;

const OUT_ROOT_ENV: &str = "FEDFS_OUT_ROOT";

#[derive(Parser)]
#[command(name = "fedfs", version, about = "Federated personalization simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArg {
    /// TOML experiment config; defaults reproduce the published setup.
    #[arg(long)]
    config: Option<PathBuf>,
}

impl ConfigArg {
    fn load(&self) -> fedfs::Result<ExperimentConfig> {
        match &self.config {
            Some(path) => ExperimentConfig::load(path),
            None => Ok(ExperimentConfig::default()),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic identity universe and write it as JSON lines.
    Generate {
        #[command(flatten)]
        config: ConfigArg,
        /// Output file (.jsonl).
        #[arg(long)]
        out: PathBuf,
        /// Master seed for the universe (defaults to the first config seed).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Pre-train the reference encoder on the public pool and save it.
    Pretrain {
        #[command(flatten)]
        config: ConfigArg,
        /// Output parameter file (.bin; a .json sidecar is written next to it).
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run an experiment preset end to end and write artifacts.
    Run {
        /// main | sweep | ablation | similarity
        #[arg(long, default_value = "main")]
        preset: String,
        #[command(flatten)]
        config: ConfigArg,
        /// Artifact directory (default: <out root>/<preset>).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Worker threads (overrides the config; 0 = all cores).
        #[arg(long)]
        threads: Option<usize>,
        /// Comma-separated master seeds (overrides the config).
        #[arg(long)]
        seeds: Option<String>,
        /// Validate the config and print the resolved plan without training.
        #[arg(long)]
        dry_run: bool,
        /// Also emit ROC curves as SVG.
        #[arg(long)]
        svg: bool,
    },
    /// Print the summary table of a finished experiment directory.
    Report { dir: PathBuf },
    /// Finite-difference audit of every loss gradient.
    Gradcheck {
        #[arg(long, default_value_t = 10)]
        points: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn out_root() -> PathBuf {
    std::env::var_os(OUT_ROOT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"))
}

fn run() -> fedfs::Result<()> {
    match Cli::parse().command {
        Command::Generate { config, out, seed } => {
            let cfg = config.load()?;
            let mut ucfg = cfg.universe.clone();
            // same derivation the experiment engine uses, so a generated
            // file matches what `run` would train on
            let master = seed.unwrap_or(cfg.seeds[0]);
            ucfg.seed = derive_seed(&[master, 0xA1]);
            let universe = generate_universe(&ucfg)?;
            save_dataset(&universe, &out)?;
            println!(
                "wrote {} ({} clients, {} impostors, {} public identities)",
                out.display(),
                universe.clients.len(),
                universe.impostors.len(),
                universe.public_pool.len()
            );
            Ok(())
        }
        Command::Pretrain { config, out, seed } => {
            let cfg = config.load()?;
            let master = seed.unwrap_or(cfg.seeds[0]);
            let mut ucfg = cfg.universe.clone();
            ucfg.seed = derive_seed(&[master, 0xA1]);
            let universe = generate_universe(&ucfg)?;
            let reference = init_pretrained(
                derive_seed(&[master, 0xA2]),
                &cfg.encoder,
                &universe.public_pool,
                &cfg.pretrain,
            )?;
            reference.save(&out)?;
            println!(
                "wrote {} ({} parameters, checksum {:016x})",
                out.display(),
                reference.param_count(),
                reference.checksum()
            );
            Ok(())
        }
        Command::Run {
            preset,
            config,
            out,
            threads,
            seeds,
            dry_run,
            svg,
        } => {
            let preset = Preset::parse(&preset)?;
            let mut cfg = config.load()?;
            if let Some(t) = threads {
                cfg.threads = t;
            }
            if let Some(list) = seeds {
                cfg.seeds = list
                    .split(',')
                    .map(|s| {
                        s.trim()
                            .parse::<u64>()
                            .map_err(|e| fedfs::Error::Config(format!("bad seed {s:?}: {e}")))
                    })
                    .collect::<fedfs::Result<Vec<_>>>()?;
            }
            cfg.emit_svg |= svg;
            cfg.validate()?;

            let out_dir = out.unwrap_or_else(|| out_root().join(preset.label()));
            let arms = plan_runs(preset, &cfg);
            println!("preset {} -> {}", preset.label(), out_dir.display());
            println!(
                "  {} clients, {} rounds, seeds {:?}, {} threads",
                cfg.universe.num_clients,
                cfg.rounds.total_rounds,
                cfg.seeds,
                cfg.effective_threads()
            );
            for arm in &arms {
                println!(
                    "  arm {:<12} rate {:<5} reg={} soft_labels={}",
                    arm.name, arm.participation_rate, arm.use_reg_loss, arm.use_adaptive_soft_label
                );
            }
            if dry_run {
                println!("dry run: config valid, nothing executed");
                return Ok(());
            }

            let result = run_experiment(&cfg, preset)?;
            write_artifacts(&out_dir, &cfg, preset, &result)?;
            println!();
            print!("{}", render_report(&out_dir)?);
            println!("artifacts in {}", out_dir.display());
            Ok(())
        }
        Command::Report { dir } => {
            print!("{}", render_report(&dir)?);
            Ok(())
        }
        Command::Gradcheck { points, seed } => {
            let report = fedfs::losses::gradient_check_report(points, seed)?;
            let mut ok = true;
            for (name, err) in report {
                let pass = err < 1e-4;
                ok &= pass;
                println!(
                    "{:<22} max relative error {:>12.3e}  {}",
                    name,
                    err,
                    if pass { "ok" } else { "FAIL" }
                );
            }
            if ok {
                Ok(())
            } else {
                Err(fedfs::Error::Numeric(
                    "a loss gradient failed its finite-difference check".into(),
                ))
            }
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

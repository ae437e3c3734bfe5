use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use nexvitad::cli::{self, RunConfig, ScoreSource, TrainOptions};
use nexvitad::metrics::ThresholdMode;
use nexvitad::{Error, Result};

#[derive(Parser)]
#[command(
    name = "nexvitad",
    version,
    about = "Cross-domain anomaly detection on a synthetic texture corpus"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Run directory.
    #[arg(long)]
    out: PathBuf,
    /// Start from this config instead of `<out>/config.json`.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed (only when creating a new config).
    #[arg(long)]
    seed: Option<u64>,
    /// Source/target class counts, e.g. 11/1 or 8/4 (only when creating a new config).
    #[arg(long)]
    split: Option<String>,
    /// Worker threads; NEXVITAD_THREADS overrides.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the PNG corpus and manifest.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        force: bool,
    },
    /// Train the adapters and decoder heads.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        force: bool,
        /// Continue from checkpoints/last.
        #[arg(long)]
        resume: bool,
        #[arg(long)]
        epochs: Option<usize>,
        /// Stop after this many epochs, leaving a resumable checkpoint.
        #[arg(long)]
        stop_after: Option<usize>,
        /// Disable the pseudo-label terms.
        #[arg(long)]
        no_pseudo: bool,
        /// Use one shared source head.
        #[arg(long)]
        no_mtl: bool,
    },
    /// Cluster normal target images into prototype banks.
    BuildBank {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        m: Option<usize>,
        /// Build a bank for every K in the configured sweep.
        #[arg(long)]
        k_sweep: bool,
    },
    /// Score target test images.
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        sigma: Option<f64>,
        /// Score with the trained target head instead of the bank.
        #[arg(long)]
        decoder_inference: bool,
        #[arg(long, conflicts_with = "decoder_inference")]
        k_sweep: bool,
    },
    /// Compute AUC, AP and PRO for a score set.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Score set under scores/ (default: bank at the configured K).
        #[arg(long)]
        tag: Option<String>,
        /// Fixed PRO threshold instead of the best of the sweep.
        #[arg(long)]
        tau: Option<f64>,
    },
    /// Finite-difference check of every trainable gradient.
    GradCheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Time bank inference against K and batch size.
    Bench {
        #[command(flatten)]
        common: Common,
    },
    /// gen-data, train, build-bank, infer and eval.
    Run {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        force: bool,
        #[arg(long)]
        epochs: Option<usize>,
    },
}

fn parse_split(s: &str) -> Result<usize> {
    let bad = || Error::Config(format!("split {s:?} is not of the form S/T"));
    let (a, b) = s.split_once('/').ok_or_else(bad)?;
    let (a, b): (usize, usize) = (
        a.trim().parse().map_err(|_| bad())?,
        b.trim().parse().map_err(|_| bad())?,
    );
    if a + b != nexvitad::datagen::NUM_CLASSES {
        return Err(Error::Config(format!(
            "split {s} must cover all {} classes",
            nexvitad::datagen::NUM_CLASSES
        )));
    }
    Ok(b)
}

fn resolve(c: &Common) -> Result<RunConfig> {
    cli::init_threads(c.threads)?;
    let existing = c.out.join("config.json");
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None if existing.exists() => RunConfig::load(&existing)?,
        None => {
            let n_target = c.split.as_deref().map(parse_split).transpose()?.unwrap_or(1);
            return RunConfig::new(&c.out, c.seed.unwrap_or(0), n_target);
        }
    };
    if c.seed.is_some_and(|s| s != cfg.seed) || c.split.is_some() {
        return Err(Error::Config(
            "--seed and --split only apply when creating a new run".into(),
        ));
    }
    cfg.out = c.out.clone();
    Ok(cfg)
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData { common, force } => {
            let cfg = resolve(&common)?;
            cfg.validate()?;
            cfg.save()?;
            let n = cli::cmd_gen_data(&cfg, force)?.len();
            println!("{n} samples, split {}", cfg.split.label());
        }
        Command::Train {
            common,
            force,
            resume,
            epochs,
            stop_after,
            no_pseudo,
            no_mtl,
        } => {
            let mut cfg = resolve(&common)?;
            if let Some(e) = epochs {
                cfg.train.epochs = e;
                cfg.train.warmup_epochs = cfg.train.warmup_epochs.min(e.saturating_sub(1));
            }
            cfg.train.pseudo_enabled &= !no_pseudo;
            cfg.train.mtl_enabled &= !no_mtl;
            cfg.validate()?;
            cfg.save()?;
            let log = cli::cmd_train(
                &cfg,
                TrainOptions {
                    force,
                    resume,
                    stop_after,
                },
            )?;
            if let Some(last) = log.last() {
                println!("epoch {} total loss {:.5}", last.epoch, last.total);
            }
        }
        Command::BuildBank { common, k, m, k_sweep } => {
            let mut cfg = resolve(&common)?;
            if let Some(k) = k {
                cfg.inference.k = k;
            }
            if let Some(m) = m {
                cfg.inference.m = m;
                cfg.split.bank_size = m;
            }
            cfg.validate()?;
            cfg.save()?;
            let ks = if k_sweep {
                cfg.inference.k_sweep.clone()
            } else {
                vec![cfg.inference.k]
            };
            let banks = cli::cmd_build_bank(&cfg, &ks)?;
            println!("{} banks", banks.len());
        }
        Command::Infer {
            common,
            k,
            sigma,
            decoder_inference,
            k_sweep,
        } => {
            let mut cfg = resolve(&common)?;
            if let Some(k) = k {
                cfg.inference.k = k;
            }
            if let Some(s) = sigma {
                cfg.inference.sigma = s;
            }
            cfg.validate()?;
            cfg.save()?;
            let sources: Vec<ScoreSource> = if decoder_inference {
                vec![ScoreSource::Decoder]
            } else if k_sweep {
                cfg.inference.k_sweep.iter().map(|&k| ScoreSource::Bank(k)).collect()
            } else {
                vec![ScoreSource::Bank(cfg.inference.k)]
            };
            for s in sources {
                let n = cli::cmd_infer(&cfg, s)?.len();
                println!("{}: {n} score maps", s.tag());
            }
        }
        Command::Eval { common, tag, tau } => {
            let mut cfg = resolve(&common)?;
            if let Some(t) = tau {
                cfg.threshold = ThresholdMode::Fixed(t);
            }
            cfg.validate()?;
            let tag = tag.unwrap_or_else(|| ScoreSource::Bank(cfg.inference.k).tag());
            let report = cli::cmd_eval(&cfg, &tag)?;
            cli::print_report(&mut std::io::stdout(), &tag, &report)?;
        }
        Command::GradCheck { seed, out, threads } => {
            cli::init_threads(threads)?;
            let report = cli::cmd_grad_check(seed, out.as_deref())?;
            println!(
                "{} entries, max rel err {:.3e} (tol {:.0e})",
                report.entries, report.max_rel_err, report.tol
            );
        }
        Command::Bench { common } => {
            let cfg = resolve(&common)?;
            let report = cli::cmd_bench(&cfg)?;
            for f in &report.fits {
                println!(
                    "batch {:>2}: {:.3} ms/K, R2 {:.3}, monotone {}",
                    f.batch, f.slope_ms_per_k, f.r2, f.monotone
                );
            }
        }
        Command::Run { common, force, epochs } => {
            let mut cfg = resolve(&common)?;
            if let Some(e) = epochs {
                cfg.train.epochs = e;
                cfg.train.warmup_epochs = cfg.train.warmup_epochs.min(e.saturating_sub(1));
            }
            cfg.validate()?;
            let report = cli::cmd_run(&cfg, force)?;
            cli::print_report(
                &mut std::io::stdout(),
                &ScoreSource::Bank(cfg.inference.k).tag(),
                &report,
            )?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

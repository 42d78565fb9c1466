//! `flmgrow`: staged function-preserving growth of decoder-only
//! transformers at desk scale.
//!
//! Exit codes: 0 success, 2 validation/usage, 3 numerical gate failure,
//! 4 I/O failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use flmgrow::ckptio::Dtype;
use flmgrow::commands;
use flmgrow::error::AppError;
use flmgrow::presets::{preset, RunConfig, PRESET_NAMES};
use flmgrow::runner::StopRule;
use flmgrow_core::growth::GrowthPlan;
use flmgrow_core::train::SftPreset;

#[derive(Parser)]
#[command(
    name = "flmgrow",
    version,
    about = "Train, grow, verify, curate and fine-tune decoder-only transformers"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct ConfigSource {
    /// Built-in preset name.
    #[arg(long, value_parser = PRESET_NAMES)]
    preset: Option<String>,
    /// RunConfig JSON file (overrides --preset).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed override.
    #[arg(long)]
    seed: Option<u64>,
    /// Element type override.
    #[arg(long)]
    dtype: Option<Dtype>,
}

impl ConfigSource {
    fn resolve(&self) -> Result<RunConfig, AppError> {
        let mut cfg = match (&self.config, &self.preset) {
            (Some(path), _) => serde_json::from_slice(&std::fs::read(path)?)?,
            (None, Some(name)) => preset(name)?,
            (None, None) => {
                return Err(AppError::Validation(
                    "one of --preset or --config is required".into(),
                ))
            }
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(dtype) = self.dtype {
            cfg.dtype = dtype;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Create a fresh checkpoint (or just report its parameter count).
    Init {
        #[command(flatten)]
        source: ConfigSource,
        /// Checkpoint directory to create.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Validate and print count_params without allocating tensors.
        #[arg(long)]
        dry_run: bool,
    },
    /// Train a checkpoint on a byte-level corpus.
    Train {
        #[command(flatten)]
        source: ConfigSource,
        /// Checkpoint directory to start from.
        #[arg(long)]
        ckpt: PathBuf,
        /// Corpus file (overrides the config's corpus path).
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Output directory (metrics.log, snapshots/, checkpoint/).
        #[arg(long)]
        out: PathBuf,
        /// Run exactly this many steps.
        #[arg(long, conflicts_with = "tokens")]
        steps: Option<u64>,
        /// Run until this many tokens have been consumed by this run.
        #[arg(long)]
        tokens: Option<u64>,
        /// Save snapshots/step-<n> every N steps.
        #[arg(long)]
        snapshot_every: Option<u64>,
    },
    /// Apply a growth plan (width, depth, or both).
    Grow {
        /// Checkpoint directory to grow.
        #[arg(long)]
        ckpt: PathBuf,
        /// Growth plan JSON file.
        #[arg(long, conflicts_with = "preset")]
        plan: Option<PathBuf>,
        /// Take the growth plan from this preset.
        #[arg(long, value_parser = PRESET_NAMES)]
        preset: Option<String>,
        /// Output checkpoint directory.
        #[arg(long)]
        out: PathBuf,
        /// Probe sequences for distance-based layer selection.
        #[arg(long, default_value_t = 8)]
        probes: usize,
        #[arg(long, default_value_t = 64)]
        probe_len: usize,
    },
    /// Check function preservation between two checkpoints.
    Verify {
        #[arg(long)]
        pre: PathBuf,
        #[arg(long)]
        post: PathBuf,
        #[arg(long, default_value_t = 32)]
        probes: usize,
        #[arg(long, default_value_t = 64)]
        probe_len: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Write the JSON report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-layer input/output distances of the hidden stream.
    Distances {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 8)]
        probes: usize,
        #[arg(long, default_value_t = 64)]
        probe_len: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Keep the lowest-perplexity fraction of instruction samples.
    Curate {
        #[arg(long)]
        samples: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        fraction: f64,
        /// Kept-samples JSONL output.
        #[arg(long)]
        out: PathBuf,
        /// Report path (defaults next to --out).
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Supervised fine-tuning on response tokens.
    Sft {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        samples: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<u64>,
        #[arg(long)]
        batch_samples: Option<usize>,
        #[arg(long)]
        lr_begin: Option<f64>,
        #[arg(long)]
        lr_end: Option<f64>,
    },
    /// Merge metrics logs into a plotting-ready JSON summary.
    Report {
        /// Metrics files, in run order.
        #[arg(long, required = true, num_args = 1..)]
        metrics: Vec<PathBuf>,
        /// Distance-stats JSON files to include as tables.
        #[arg(long, num_args = 0..)]
        distances: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<(), AppError> {
    match cli.cmd {
        Cmd::Init { source, out, dry_run } => {
            let cfg = source.resolve()?;
            commands::cmd_init(&cfg, out.as_deref(), dry_run)?;
        }
        Cmd::Train {
            source,
            ckpt,
            corpus,
            out,
            steps,
            tokens,
            snapshot_every,
        } => {
            let mut cfg = source.resolve()?;
            if corpus.is_some() {
                cfg.corpus = corpus;
            }
            let stop = match (steps, tokens) {
                (Some(n), _) => StopRule::Steps(n),
                (None, Some(t)) => StopRule::Tokens(t),
                (None, None) => StopRule::Tokens(cfg.schedule.total_tokens),
            };
            commands::cmd_train(&ckpt, &cfg, stop, snapshot_every, &out)?;
        }
        Cmd::Grow {
            ckpt,
            plan,
            preset: preset_name,
            out,
            probes,
            probe_len,
        } => {
            let plan: GrowthPlan = match (plan, preset_name) {
                (Some(path), _) => serde_json::from_slice(&std::fs::read(path)?)?,
                (None, Some(name)) => preset(&name)?.growth.ok_or_else(|| {
                    AppError::Validation(format!("preset {name} carries no growth plan"))
                })?,
                (None, None) => {
                    return Err(AppError::Validation(
                        "one of --plan or --preset is required".into(),
                    ))
                }
            };
            commands::cmd_grow(&ckpt, &plan, &out, probes, probe_len)?;
        }
        Cmd::Verify {
            pre,
            post,
            probes,
            probe_len,
            seed,
            out,
        } => {
            commands::cmd_verify(&pre, &post, probes, probe_len, seed, out.as_deref())?;
        }
        Cmd::Distances {
            ckpt,
            probes,
            probe_len,
            seed,
            out,
        } => {
            commands::cmd_distances(&ckpt, probes, probe_len, seed, out.as_deref())?;
        }
        Cmd::Curate {
            samples,
            ckpt,
            fraction,
            out,
            report,
        } => {
            commands::cmd_curate(&samples, &ckpt, fraction, &out, report.as_deref())?;
        }
        Cmd::Sft {
            ckpt,
            samples,
            out,
            epochs,
            batch_samples,
            lr_begin,
            lr_end,
        } => {
            let mut preset = SftPreset::default();
            if let Some(e) = epochs {
                preset.epochs = e;
            }
            if let Some(b) = batch_samples {
                preset.batch_samples = b;
            }
            if let Some(lr) = lr_begin {
                preset.lr_begin = lr;
            }
            if let Some(lr) = lr_end {
                preset.lr_end = lr;
            }
            commands::cmd_sft(&ckpt, &samples, &preset, &out)?;
        }
        Cmd::Report {
            metrics,
            distances,
            out,
        } => {
            commands::cmd_report(&metrics, &distances, out.as_deref())?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

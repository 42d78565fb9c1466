//! Training runs: sequential batching, metrics emission, periodic
//! checkpointing, and the fine-tuning loop.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use flmgrow_core::checkpoint::Checkpoint;
use flmgrow_core::curation::{sft_loss_mask, InstructSample};
use flmgrow_core::optim::AdamHyper;
use flmgrow_core::real::Real;
use flmgrow_core::schedule::{lr_curve, ScheduleKind, TrainSchedule};
use flmgrow_core::train::{train_step, train_step_at, SftPreset, StepMetrics};

use crate::ckptio;
use crate::corpus::{Batcher, Corpus};
use crate::error::{AppError, Result};

/// Stop condition, relative to the start of this run.
#[derive(Debug, Clone, Copy)]
pub enum StopRule {
    Steps(u64),
    Tokens(u64),
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub stop: StopRule,
    /// Save `snapshots/step-<n>` every this many steps.
    pub snapshot_every: Option<u64>,
    pub out_dir: PathBuf,
}

/// One metrics-log line. Scientific notation for the rates keeps the file
/// compact; all fields parse back with `str::parse::<f64>`.
pub fn metrics_line(m: &StepMetrics) -> String {
    format!(
        "step={} tokens={} loss={} lr_vector={:e} lr_matrix={:e} mask={}\n",
        m.step, m.tokens, m.loss, m.lr_vector, m.lr_matrix, m.mask
    )
}

/// Trains until the stop rule fires. Writes one metrics line per step to
/// `<out>/metrics.log`, optional snapshots, and the final checkpoint to
/// `<out>/checkpoint`.
pub fn train_run<R: Real>(
    ckpt: &mut Checkpoint<R>,
    corpus: &Corpus,
    schedule: &TrainSchedule,
    hyper: &AdamHyper,
    opts: &RunOptions,
) -> Result<Vec<StepMetrics>> {
    schedule.validate().map_err(AppError::from)?;
    if corpus.seq_len() != schedule.seq_len {
        return Err(AppError::Validation(format!(
            "corpus windows use seq_len {}, schedule wants {}",
            corpus.seq_len(),
            schedule.seq_len
        )));
    }
    fs::create_dir_all(&opts.out_dir)?;
    let mut log = fs::File::create(opts.out_dir.join("metrics.log"))?;
    let mut batcher = Batcher::new(corpus, ckpt.rng.seed(), schedule.batch_tokens)?;

    let start_step = ckpt.step;
    let start_tokens = ckpt.consumed_tokens;
    let mut history = Vec::new();
    loop {
        let done = match opts.stop {
            StopRule::Steps(n) => ckpt.step - start_step >= n,
            StopRule::Tokens(t) => ckpt.consumed_tokens - start_tokens >= t,
        };
        if done {
            break;
        }
        let batch = batcher.batch_at(ckpt.step);
        let metrics = train_step(ckpt, &batch, schedule, hyper).map_err(AppError::from)?;
        log.write_all(metrics_line(&metrics).as_bytes())?;
        if let Some(every) = opts.snapshot_every {
            if every > 0 && metrics.step % every == 0 {
                let snap = opts.out_dir.join("snapshots").join(format!("step-{}", metrics.step));
                ckptio::save(ckpt, &snap)?;
            }
        }
        history.push(metrics);
    }
    log.sync_all()?;
    ckptio::save(ckpt, &ckptio::checkpoint_dir(&opts.out_dir))?;
    Ok(history)
}

#[derive(Debug, Clone)]
pub struct SftReport {
    pub eligible: usize,
    pub steps: u64,
    pub skipped: Vec<(String, String)>,
}

/// Epoch-based fine-tuning on response tokens only. Over-long samples are
/// skipped with a warning and reported. A checkpoint lands in
/// `<out>/epoch-<n>` at each epoch end and in `<out>/checkpoint` at the
/// end; metrics stream to `<out>/metrics.log`.
pub fn sft_run<R: Real>(
    ckpt: &mut Checkpoint<R>,
    samples: &[InstructSample],
    preset: &SftPreset,
    hyper: &AdamHyper,
    out_dir: &Path,
) -> Result<SftReport> {
    if samples.is_empty() {
        return Err(AppError::Validation("no fine-tuning samples".into()));
    }
    if preset.epochs == 0 || preset.batch_samples == 0 {
        return Err(AppError::Validation(
            "sft preset needs positive epochs and batch size".into(),
        ));
    }
    let mut skipped = Vec::new();
    let mut eligible: Vec<(Vec<u32>, Vec<bool>)> = Vec::new();
    for s in samples {
        if s.response.is_empty() {
            skipped.push((s.id.clone(), "empty response".to_string()));
            continue;
        }
        let (tokens, mask) = sft_loss_mask(s);
        if tokens.len() > ckpt.config.max_seq_len {
            eprintln!(
                "warning: skipping sample {} ({} tokens > max_seq_len {})",
                s.id,
                tokens.len(),
                ckpt.config.max_seq_len
            );
            skipped.push((
                s.id.clone(),
                format!("{} tokens exceed max_seq_len", tokens.len()),
            ));
            continue;
        }
        eligible.push((tokens, mask));
    }
    if eligible.is_empty() {
        return Err(AppError::Validation("no eligible fine-tuning samples".into()));
    }

    fs::create_dir_all(out_dir)?;
    let mut log = fs::File::create(out_dir.join("metrics.log"))?;
    let steps_per_epoch = eligible.len().div_ceil(preset.batch_samples) as u64;
    let total_steps = preset.epochs * steps_per_epoch;
    let mut local_step = 0u64;
    for epoch in 0..preset.epochs {
        for chunk in eligible.chunks(preset.batch_samples) {
            local_step += 1;
            let lr = lr_curve(
                local_step,
                0,
                total_steps,
                preset.lr_begin,
                preset.lr_end,
                ScheduleKind::Linear,
            );
            let batch: Vec<Vec<u32>> = chunk.iter().map(|(t, _)| t.clone()).collect();
            let masks: Vec<Vec<bool>> = chunk.iter().map(|(_, m)| m.clone()).collect();
            let metrics = train_step_at(ckpt, &batch, Some(&masks), lr, lr, hyper)
                .map_err(AppError::from)?;
            log.write_all(metrics_line(&metrics).as_bytes())?;
        }
        ckptio::save(ckpt, &out_dir.join(format!("epoch-{}", epoch + 1)))?;
    }
    log.sync_all()?;
    ckptio::save(ckpt, &ckptio::checkpoint_dir(out_dir))?;
    Ok(SftReport {
        eligible: eligible.len(),
        steps: local_step,
        skipped,
    })
}

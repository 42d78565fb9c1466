//! One deterministic training step: forward/backward over a batch,
//! global-norm clipping, the dual-rate Adam update, and the mask advance.
//!
//! Gradients accumulate per sequence in batch order (grad accumulation is
//! exact for a mean loss), so a step is a pure function of the checkpoint,
//! the batch and the learning rates.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{CoreError, Result};
use crate::growth::mask_value;
use crate::model::{build_sum_nll, register_params, ParamRef, ParamVars};
use crate::optim::{adam_step, clip_global_norm, AdamHyper};
use crate::real::Real;
use crate::schedule::{lr_at, Group, TrainSchedule};
use crate::tape::{Tape, VarId};
use crate::tensor::Tensor;

/// Per-step metrics, mirrored one-to-one into the metrics log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    /// Cumulative consumed tokens after this step.
    pub tokens: u64,
    pub loss: f64,
    pub lr_vector: f64,
    pub lr_matrix: f64,
    /// Mask value used by this step's forward.
    pub mask: f64,
}

/// Fine-tuning preset. The defaults are the published settings: 4 epochs,
/// global batch of 128 samples, 2.7e-5 decayed to 1e-9 on a linear
/// schedule with no warmup; one rate drives both parameter groups.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SftPreset {
    pub epochs: u64,
    pub batch_samples: usize,
    pub lr_begin: f64,
    pub lr_end: f64,
}

impl Default for SftPreset {
    fn default() -> Self {
        SftPreset {
            epochs: 4,
            batch_samples: 128,
            lr_begin: 2.7e-5,
            lr_end: 1e-9,
        }
    }
}

fn ordered_vars(vars: &ParamVars) -> Vec<VarId> {
    let mut out = Vec::with_capacity(3 + vars.layers.len() * 9 + 1);
    out.push(vars.embedding);
    for l in &vars.layers {
        out.extend([
            l.attn_q,
            l.attn_k,
            l.attn_v,
            l.attn_o,
            l.ffn_gate,
            l.ffn_up,
            l.ffn_down,
            l.norm_attn_gain,
            l.norm_ffn_gain,
        ]);
    }
    out.push(vars.final_ln_gain);
    out.push(vars.final_ln_bias);
    out.push(vars.lm_head);
    out
}

/// Mean loss and mean parameter gradients over a batch of sequences.
/// `loss_masks`, when given, selects scored prediction positions per
/// sequence. Returns (loss, scored positions, gradients in canonical
/// order).
pub fn batch_loss_and_grads<R: Real>(
    ckpt: &Checkpoint<R>,
    batch: &[Vec<u32>],
    loss_masks: Option<&[Vec<bool>]>,
) -> Result<(f64, u64, Vec<Tensor<R>>)> {
    if batch.is_empty() {
        return Err(CoreError::Input("empty batch".into()));
    }
    if let Some(m) = loss_masks {
        if m.len() != batch.len() {
            return Err(CoreError::Input("loss mask / batch arity mismatch".into()));
        }
    }
    let refs = ParamRef::enumerate(ckpt.config.layer_num);
    let mut grad_sums: Vec<Tensor<R>> = refs
        .iter()
        .map(|r| Tensor::zeros(ckpt.params.get(*r).shape()))
        .collect();
    let mut nll_sum = R::ZERO;
    let mut total_count = 0usize;

    for (s, tokens) in batch.iter().enumerate() {
        let mut tape = Tape::new();
        let vars = register_params(&mut tape, &ckpt.params);
        let mask = loss_masks.map(|m| m[s].as_slice());
        let (nll, count) = build_sum_nll(
            &mut tape,
            &vars,
            &ckpt.config,
            tokens,
            mask,
            ckpt.mask_state.as_ref(),
        )?;
        nll_sum += tape.value(nll).scalar_value();
        total_count += count;
        let grads = tape.backward(nll)?;
        for (sum, var) in grad_sums.iter_mut().zip(ordered_vars(&vars)) {
            if let Some(g) = grads.get(var) {
                for (a, &b) in sum.data_mut().iter_mut().zip(g.data().iter()) {
                    *a += b;
                }
            }
        }
    }

    let scale = R::ONE / R::from_usize(total_count);
    for g in &mut grad_sums {
        for v in g.data_mut() {
            *v = *v * scale;
        }
    }
    let loss = nll_sum.to_f64() / total_count as f64;
    if !loss.is_finite() {
        return Err(CoreError::Numerical(alloc::format!(
            "non-finite loss {loss} at step {}",
            ckpt.step + 1
        )));
    }
    Ok((loss, total_count as u64, grad_sums))
}

/// One optimizer step at explicit learning rates. The forward uses the
/// checkpoint's current mask; afterwards the mask advances to its value at
/// the new step count.
pub fn train_step_at<R: Real>(
    ckpt: &mut Checkpoint<R>,
    batch: &[Vec<u32>],
    loss_masks: Option<&[Vec<bool>]>,
    lr_vector: f64,
    lr_matrix: f64,
    hyper: &AdamHyper,
) -> Result<StepMetrics> {
    let mask_used = ckpt.current_mask();
    let (loss, scored, mut grads) = batch_loss_and_grads(ckpt, batch, loss_masks)?;
    clip_global_norm(&mut grads, hyper.clip_norm);
    let refs = ParamRef::enumerate(ckpt.config.layer_num);
    let opt = &mut ckpt.opt;
    adam_step(
        &mut ckpt.params,
        opt,
        &refs,
        &grads,
        lr_vector,
        lr_matrix,
        hyper,
    )?;
    ckpt.step += 1;
    ckpt.consumed_tokens += scored;
    if let Some(state) = &mut ckpt.mask_state {
        state.mask = mask_value(ckpt.step, &state.transition)?;
    }
    Ok(StepMetrics {
        step: ckpt.step,
        tokens: ckpt.consumed_tokens,
        loss,
        lr_vector,
        lr_matrix,
        mask: mask_used,
    })
}

/// One step under a stage schedule. Schedules are stage-local: the rate
/// comes from `lr_at` evaluated at the step count since the last growth
/// event, so each stage runs its own warmup and decay.
pub fn train_step<R: Real>(
    ckpt: &mut Checkpoint<R>,
    batch: &[Vec<u32>],
    schedule: &TrainSchedule,
    hyper: &AdamHyper,
) -> Result<StepMetrics> {
    let stage_step = ckpt.step + 1 - ckpt.stage_start();
    let lr_vector = lr_at(stage_step, schedule, Group::Vector);
    let lr_matrix = lr_at(stage_step, schedule, Group::Matrix);
    train_step_at(ckpt, batch, None, lr_vector, lr_matrix, hyper)
}

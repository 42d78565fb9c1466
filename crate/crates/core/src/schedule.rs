//! Learning-rate schedules and the vector/matrix parameter grouping.
//!
//! Two learning rates run side by side: vector-like tensors (embedding,
//! lm_head, norm gains and bias — at most one width-proportional
//! dimension) keep the base rate, matrix-like tensors (attention and FFN
//! projections) get their own. Warmup ramps linearly from zero; the decay
//! phase is a half-cosine or a straight line between the configured
//! endpoints, evaluated as a convex combination so both endpoints are
//! reproduced exactly.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::model::{ModelParams, ParamRef};
use crate::real::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleKind {
    Cosine,
    Linear,
}

/// Learning-rate group of one tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Group {
    Vector,
    Matrix,
}

/// One stage's training settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSchedule {
    pub lr_vector_begin: f64,
    pub lr_vector_end: f64,
    pub lr_matrix_begin: f64,
    pub lr_matrix_end: f64,
    pub schedule_type: ScheduleKind,
    pub warmup_steps: u64,
    /// Tokens consumed per optimizer step.
    pub batch_tokens: u64,
    /// Stage token budget; total steps = ceil(total / batch).
    pub total_tokens: u64,
    pub seq_len: usize,
}

impl TrainSchedule {
    pub fn total_steps(&self) -> u64 {
        self.total_tokens.div_ceil(self.batch_tokens)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_tokens == 0 || self.total_tokens == 0 || self.seq_len == 0 {
            return Err(CoreError::Config(
                "batch_tokens, total_tokens and seq_len must be positive".into(),
            ));
        }
        if !self.batch_tokens.is_multiple_of(self.seq_len as u64) {
            return Err(CoreError::Config(format!(
                "batch_tokens {} must be a multiple of seq_len {}",
                self.batch_tokens, self.seq_len
            )));
        }
        for (name, begin, end) in [
            ("vector", self.lr_vector_begin, self.lr_vector_end),
            ("matrix", self.lr_matrix_begin, self.lr_matrix_end),
        ] {
            if begin.is_nan() || end.is_nan() || begin <= 0.0 || end <= 0.0 {
                return Err(CoreError::Config(format!("{name} learning rates must be positive")));
            }
            if begin < end {
                return Err(CoreError::Config(format!(
                    "{name} schedule must decay: begin {begin} < end {end}"
                )));
            }
        }
        Ok(())
    }
}

/// Shared curve: linear 0->begin ramp through `warmup` (inclusive), then
/// cosine or linear decay begin->end over the remaining steps.
pub fn lr_curve(
    step: u64,
    warmup: u64,
    total_steps: u64,
    begin: f64,
    end: f64,
    kind: ScheduleKind,
) -> f64 {
    if warmup > 0 && step <= warmup {
        return begin * (step as f64 / warmup as f64);
    }
    let span = total_steps.saturating_sub(warmup).max(1);
    let done = step.saturating_sub(warmup).min(span);
    let p = done as f64 / span as f64;
    let w = match kind {
        ScheduleKind::Linear => 1.0 - p,
        ScheduleKind::Cosine => (1.0 + libm::cos(core::f64::consts::PI * p)) / 2.0,
    };
    begin * w + end * (1.0 - w)
}

/// Learning rate of `group` at `step` (0 ..= total steps).
pub fn lr_at(step: u64, schedule: &TrainSchedule, group: Group) -> f64 {
    let (begin, end) = match group {
        Group::Vector => (schedule.lr_vector_begin, schedule.lr_vector_end),
        Group::Matrix => (schedule.lr_matrix_begin, schedule.lr_matrix_end),
    };
    lr_curve(
        step,
        schedule.warmup_steps,
        schedule.total_steps(),
        begin,
        end,
        schedule.schedule_type,
    )
}

/// Per-tensor group assignment in canonical parameter order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamGroups {
    pub groups: Vec<(ParamRef, Group)>,
}

/// Classifies every tensor: matrix-like iff both of its dimensions scale
/// with model width.
pub fn classify_params<R: Real>(params: &ModelParams<R>) -> ParamGroups {
    ParamGroups {
        groups: ParamRef::enumerate(params.layers.len())
            .into_iter()
            .map(|r| {
                let g = if r.matrix_like() { Group::Matrix } else { Group::Vector };
                (r, g)
            })
            .collect(),
    }
}

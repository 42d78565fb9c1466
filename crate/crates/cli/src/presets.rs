//! Built-in run configurations.
//!
//! `52B`, `102B` and `1T` carry the published stage architectures and
//! training settings verbatim. The `toy-*` trio mirrors the stage
//! progression at desk scale: aspect ratios and the kv_channels
//! divisibility rule are preserved, token budgets shrink to minutes of
//! CPU time, and learning-rate magnitudes are recalibrated for the tiny
//! models (schedule types, warmup structure, the 0.8 matrix/vector ratio
//! of the later stages, and the growth-init settings stay faithful).
//! Multipliers are shared across the toy stages so growth between them is
//! function-preserving.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use flmgrow_core::growth::{DepthSources, GrowthPlan, WidthInit};
use flmgrow_core::model::ModelConfig;
use flmgrow_core::schedule::{ScheduleKind, TrainSchedule};

use crate::ckptio::Dtype;
use crate::error::{AppError, Result};

/// One runnable configuration: model, schedule, optional growth into this
/// stage, and bookkeeping defaults.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub schedule: TrainSchedule,
    /// Growth plan producing this stage from the previous one.
    #[serde(default)]
    pub growth: Option<GrowthPlan>,
    #[serde(default)]
    pub corpus: Option<PathBuf>,
    #[serde(default)]
    pub out: Option<PathBuf>,
    pub seed: u64,
    pub dtype: Dtype,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate().map_err(AppError::from)?;
        self.schedule.validate().map_err(AppError::from)?;
        if let Some(plan) = &self.growth {
            plan.target.validate().map_err(AppError::from)?;
        }
        Ok(())
    }
}

pub const PRESET_NAMES: [&str; 6] = ["52B", "102B", "1T", "toy-52", "toy-102", "toy-1T"];

fn stage_config(
    layer_num: usize,
    head_num: usize,
    hidden_dim: usize,
    ffn_dim: usize,
    output_mult: f64,
) -> ModelConfig {
    ModelConfig {
        layer_num,
        head_num,
        hidden_dim,
        ffn_dim,
        vocab_size: 80_000,
        kv_channels: 128,
        max_seq_len: 2048,
        rope_base: 10000.0,
        input_mult: 1.0,
        output_mult,
    }
}

fn toy_config(layer_num: usize, head_num: usize, hidden_dim: usize, ffn_dim: usize) -> ModelConfig {
    ModelConfig {
        layer_num,
        head_num,
        hidden_dim,
        ffn_dim,
        vocab_size: flmgrow_core::tokenizer::VOCAB_SIZE,
        kv_channels: 16,
        max_seq_len: 512,
        rope_base: 10000.0,
        input_mult: 1.0,
        // Shared across toy stages so staged growth preserves the function.
        output_mult: 3.125e-2,
    }
}

/// 5.5M-token batches rounded to a whole number of 2048-token sequences.
const STAGE_BATCH: u64 = 2688 * 2048;
/// 2M-token batches for the final stage.
const STAGE_BATCH_1T: u64 = 977 * 2048;

/// Desk-scale batch: 8 sequences of 64 predicted tokens.
const TOY_BATCH: u64 = 8 * 64;
/// Desk-scale stage budget: 300 steps.
const TOY_TOKENS: u64 = TOY_BATCH * 300;

pub fn preset(name: &str) -> Result<RunConfig> {
    let cfg = match name {
        "52B" => RunConfig {
            model: stage_config(64, 64, 8192, 21_824, 3.125e-2),
            schedule: TrainSchedule {
                lr_vector_begin: 1.500e-4,
                lr_vector_end: 2.781e-5,
                lr_matrix_begin: 1.500e-4,
                lr_matrix_end: 2.781e-5,
                schedule_type: ScheduleKind::Cosine,
                warmup_steps: 2000,
                batch_tokens: STAGE_BATCH,
                total_tokens: 2_003_000_000_000,
                seq_len: 2048,
            },
            growth: None,
            corpus: None,
            out: None,
            seed: 52,
            dtype: Dtype::F32,
        },
        "102B" => RunConfig {
            model: stage_config(80, 80, 10_240, 27_264, 2.500e-2),
            schedule: TrainSchedule {
                lr_vector_begin: 2.740e-5,
                lr_vector_end: 1.370e-6,
                lr_matrix_begin: 2.191e-5,
                lr_matrix_end: 1.096e-6,
                schedule_type: ScheduleKind::Linear,
                warmup_steps: 2000,
                batch_tokens: STAGE_BATCH,
                total_tokens: 300_000_000_000,
                seq_len: 2048,
            },
            growth: Some(GrowthPlan {
                target: stage_config(80, 80, 10_240, 27_264, 2.500e-2),
                width_init_std: 0.004,
                width_init: WidthInit::Normal,
                depth_sources: DepthSources::DistanceBased,
                transition_steps: 2000,
                seed: 52102,
            }),
            corpus: None,
            out: None,
            seed: 102,
            dtype: Dtype::F32,
        },
        "1T" => RunConfig {
            model: stage_config(140, 160, 20_480, 98_304, 2.500e-2),
            schedule: TrainSchedule {
                lr_vector_begin: 2.740e-6,
                lr_vector_end: 1.830e-6,
                lr_matrix_begin: 2.192e-6,
                lr_matrix_end: 7.321e-7,
                schedule_type: ScheduleKind::Linear,
                warmup_steps: 0,
                batch_tokens: STAGE_BATCH_1T,
                total_tokens: 15_700_000_000,
                seq_len: 2048,
            },
            growth: Some(GrowthPlan {
                target: stage_config(140, 160, 20_480, 98_304, 2.500e-2),
                width_init_std: 0.004,
                width_init: WidthInit::Normal,
                depth_sources: DepthSources::DistanceBased,
                transition_steps: 200,
                seed: 1021000,
            }),
            corpus: None,
            out: None,
            seed: 1000,
            dtype: Dtype::F32,
        },
        "toy-52" => RunConfig {
            model: toy_config(4, 4, 64, 176),
            schedule: TrainSchedule {
                lr_vector_begin: 3e-3,
                lr_vector_end: 6e-4,
                lr_matrix_begin: 3e-3,
                lr_matrix_end: 6e-4,
                schedule_type: ScheduleKind::Cosine,
                warmup_steps: 50,
                batch_tokens: TOY_BATCH,
                total_tokens: TOY_TOKENS,
                seq_len: 64,
            },
            growth: None,
            corpus: None,
            out: None,
            seed: 520,
            dtype: Dtype::F32,
        },
        "toy-102" => RunConfig {
            model: toy_config(5, 5, 80, 216),
            schedule: TrainSchedule {
                lr_vector_begin: 8e-4,
                lr_vector_end: 1.6e-4,
                lr_matrix_begin: 6.4e-4,
                lr_matrix_end: 1.28e-4,
                schedule_type: ScheduleKind::Linear,
                warmup_steps: 50,
                batch_tokens: TOY_BATCH,
                total_tokens: TOY_TOKENS,
                seq_len: 64,
            },
            growth: Some(GrowthPlan {
                target: toy_config(5, 5, 80, 216),
                width_init_std: 0.004,
                width_init: WidthInit::Normal,
                depth_sources: DepthSources::DistanceBased,
                transition_steps: 100,
                seed: 520102,
            }),
            corpus: None,
            out: None,
            seed: 1020,
            dtype: Dtype::F32,
        },
        "toy-1T" => RunConfig {
            model: toy_config(9, 10, 160, 768),
            schedule: TrainSchedule {
                lr_vector_begin: 3e-4,
                lr_vector_end: 6e-5,
                lr_matrix_begin: 2.4e-4,
                lr_matrix_end: 4.8e-5,
                schedule_type: ScheduleKind::Linear,
                warmup_steps: 0,
                batch_tokens: TOY_BATCH,
                total_tokens: TOY_TOKENS,
                seq_len: 64,
            },
            growth: Some(GrowthPlan {
                target: toy_config(9, 10, 160, 768),
                width_init_std: 0.004,
                width_init: WidthInit::Normal,
                depth_sources: DepthSources::DistanceBased,
                transition_steps: 100,
                seed: 1021001,
            }),
            corpus: None,
            out: None,
            seed: 10000,
            dtype: Dtype::F32,
        },
        other => {
            return Err(AppError::Validation(format!(
                "unknown preset {other}; available: {}",
                PRESET_NAMES.join(", ")
            )))
        }
    };
    Ok(cfg)
}

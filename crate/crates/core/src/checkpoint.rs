//! In-memory training state: everything needed to stop and resume a run
//! bit-exactly, or to replay a growth history.

use alloc::vec::Vec;

use crate::error::Result;
use crate::growth::{GrowthPlan, MaskState};
use crate::model::{init_params, ModelConfig, ModelParams};
use crate::optim::OptimizerState;
use crate::real::Real;
use crate::rng::Rng;

/// Complete model + optimizer + growth state.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<R: Real> {
    pub config: ModelConfig,
    pub params: ModelParams<R>,
    pub opt: OptimizerState<R>,
    pub mask_state: Option<MaskState>,
    /// Completed training steps.
    pub step: u64,
    /// Tokens consumed by training so far.
    pub consumed_tokens: u64,
    /// Generator state for anything the run still needs to draw.
    pub rng: Rng,
    /// Growth plans applied so far, in order.
    pub growth_history: Vec<GrowthPlan>,
}

impl<R: Real> Checkpoint<R> {
    /// Fresh model at step 0. Initialization consumes draws from the seed;
    /// the post-init generator state rides along in the checkpoint.
    pub fn fresh(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::new(seed);
        let params = init_params(config, &mut rng)?;
        Ok(Checkpoint {
            config: config.clone(),
            params,
            opt: OptimizerState::zeros(config),
            mask_state: None,
            step: 0,
            consumed_tokens: 0,
            rng,
            growth_history: Vec::new(),
        })
    }

    /// Current mask scalar; 1 when no growth event is in flight.
    pub fn current_mask(&self) -> f64 {
        self.mask_state.as_ref().map_or(1.0, |s| s.mask)
    }

    /// Step at which the current stage began: the last growth event, or 0
    /// for a never-grown model. Stage schedules (warmup, decay) count
    /// steps from here.
    pub fn stage_start(&self) -> u64 {
        self.mask_state
            .as_ref()
            .map_or(0, |s| s.transition.start_step)
    }
}

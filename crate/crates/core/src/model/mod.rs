//! GPT-style decoder-only transformer: pre-normalization, RMSNorm,
//! SwiGLU, RoPE, untied embedding and head, no linear biases, and a
//! LayerNorm on the output of the last layer.

mod config;
mod forward;
mod params;

pub use config::ModelConfig;
pub use forward::{
    build_sum_nll, forward_logits, forward_hiddens, lm_loss, register_params, rmsnorm,
    rope_apply, ParamVars, FINAL_LN_EPS, RMSNORM_EPS,
};
pub use params::{init_params, zero_params, LayerParams, LayerSlot, ModelParams, ParamRef};

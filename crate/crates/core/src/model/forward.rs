//! Masked forward pass, loss, and the standalone normalization helpers.
//!
//! The same graph builder serves ungrown and grown models: an absent
//! [`MaskState`] resolves to the identity view (no masked structures), and
//! a present one applies the growth-event semantics — new hidden
//! coordinates, new attention heads, new FFN units and new layers are all
//! scaled by the event's scalar mask, and both norms use the effective
//! dimension, so mask 0 reproduces the pre-growth function and mask 1 is
//! bit-identical to the plain forward of the target architecture.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::config::ModelConfig;
use super::params::ModelParams;
use crate::error::{CoreError, Result};
use crate::growth::MaskState;
use crate::real::Real;
use crate::tape::{rope_kernel, MaskCols, Tape, VarId};
use crate::tensor::Tensor;

pub const RMSNORM_EPS: f64 = 1e-6;
pub const FINAL_LN_EPS: f64 = 1e-5;

/// Tape handles for every registered parameter.
pub struct ParamVars {
    pub embedding: VarId,
    pub lm_head: VarId,
    pub layers: Vec<LayerVars>,
    pub final_ln_gain: VarId,
    pub final_ln_bias: VarId,
}

pub struct LayerVars {
    pub attn_q: VarId,
    pub attn_k: VarId,
    pub attn_v: VarId,
    pub attn_o: VarId,
    pub ffn_gate: VarId,
    pub ffn_up: VarId,
    pub ffn_down: VarId,
    pub norm_attn_gain: VarId,
    pub norm_ffn_gain: VarId,
}

/// Registers all parameters as tape leaves.
pub fn register_params<R: Real>(tape: &mut Tape<R>, params: &ModelParams<R>) -> ParamVars {
    ParamVars {
        embedding: tape.leaf(params.embedding.clone()),
        lm_head: tape.leaf(params.lm_head.clone()),
        layers: params
            .layers
            .iter()
            .map(|l| LayerVars {
                attn_q: tape.leaf(l.attn_q.clone()),
                attn_k: tape.leaf(l.attn_k.clone()),
                attn_v: tape.leaf(l.attn_v.clone()),
                attn_o: tape.leaf(l.attn_o.clone()),
                ffn_gate: tape.leaf(l.ffn_gate.clone()),
                ffn_up: tape.leaf(l.ffn_up.clone()),
                ffn_down: tape.leaf(l.ffn_down.clone()),
                norm_attn_gain: tape.leaf(l.norm_attn_gain.clone()),
                norm_ffn_gain: tape.leaf(l.norm_ffn_gain.clone()),
            })
            .collect(),
        final_ln_gain: tape.leaf(params.final_ln_gain.clone()),
        final_ln_bias: tape.leaf(params.final_ln_bias.clone()),
    }
}

/// Growth-event masking resolved against a config.
struct MaskView {
    active: bool,
    mask: f64,
    hidden_old: usize,
    heads_old: usize,
    ffn_old: Vec<usize>,
    new_layers: BTreeSet<usize>,
}

fn resolve_mask(config: &ModelConfig, state: Option<&MaskState>) -> Result<MaskView> {
    match state {
        None => Ok(MaskView {
            active: false,
            mask: 1.0,
            hidden_old: config.hidden_dim,
            heads_old: config.head_num,
            ffn_old: vec![config.ffn_dim; config.layer_num],
            new_layers: BTreeSet::new(),
        }),
        Some(s) => {
            if !(0.0..=1.0).contains(&s.mask) {
                return Err(CoreError::Contract(format!("mask {} outside [0,1]", s.mask)));
            }
            if s.hidden_old > config.hidden_dim || s.hidden_old % config.kv_channels != 0 {
                return Err(CoreError::Contract(format!(
                    "mask state hidden_old {} invalid for hidden_dim {}",
                    s.hidden_old, config.hidden_dim
                )));
            }
            if s.ffn_old.len() != config.layer_num {
                return Err(CoreError::Contract(format!(
                    "mask state tracks {} layers, model has {}",
                    s.ffn_old.len(),
                    config.layer_num
                )));
            }
            for (l, &f) in s.ffn_old.iter().enumerate() {
                if f > config.ffn_dim {
                    return Err(CoreError::Contract(format!(
                        "mask state ffn_old {} > ffn_dim {} at layer {l}",
                        f, config.ffn_dim
                    )));
                }
            }
            if let Some(&max) = s.new_layer_ids.last() {
                if max >= config.layer_num {
                    return Err(CoreError::Contract(format!(
                        "new layer id {max} out of range"
                    )));
                }
            }
            Ok(MaskView {
                active: true,
                mask: s.mask,
                hidden_old: s.hidden_old,
                heads_old: s.hidden_old / config.kv_channels,
                ffn_old: s.ffn_old.clone(),
                new_layers: s.new_layer_ids.clone(),
            })
        }
    }
}

fn validate_tokens(config: &ModelConfig, tokens: &[u32]) -> Result<()> {
    if tokens.is_empty() {
        return Err(CoreError::Input("empty token sequence".into()));
    }
    if tokens.len() > config.max_seq_len {
        return Err(CoreError::Input(format!(
            "sequence length {} exceeds max_seq_len {}",
            tokens.len(),
            config.max_seq_len
        )));
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= config.vocab_size) {
        return Err(CoreError::Input(format!(
            "token {bad} out of vocab {}",
            config.vocab_size
        )));
    }
    Ok(())
}

/// Builds the forward graph; returns the logits node (seq x vocab) and the
/// hidden state at each layer boundary (layer_num + 1 nodes: the stream
/// before each layer, then after the last).
pub fn build_forward<R: Real>(
    tape: &mut Tape<R>,
    vars: &ParamVars,
    config: &ModelConfig,
    tokens: &[u32],
    mask_state: Option<&MaskState>,
) -> Result<(VarId, Vec<VarId>)> {
    validate_tokens(config, tokens)?;
    let view = resolve_mask(config, mask_state)?;
    let seq = tokens.len();
    let positions: Vec<usize> = (0..seq).collect();
    let kvc = config.kv_channels;
    let mask_r = R::from_f64(view.mask);
    let norm_cols = MaskCols {
        d_old: view.hidden_old,
        mask: view.mask,
    };

    // Contributions that write into the residual stream get their new
    // hidden coordinates masked; inactive views skip the no-op.
    macro_rules! mask_new_cols {
        ($tape:expr, $x:expr) => {
            if view.active && view.hidden_old < config.hidden_dim {
                $tape.col_scale($x, view.hidden_old, mask_r)?
            } else {
                $x
            }
        };
    }

    let embedded = tape.embed_rows(vars.embedding, tokens)?;
    let embedded = tape.scale(embedded, R::from_f64(config.input_mult));
    let mut h = mask_new_cols!(tape, embedded);

    let mut boundaries = Vec::with_capacity(config.layer_num + 1);
    let attn_scale = R::from_f64(1.0 / libm::sqrt(kvc as f64));

    for (l, layer) in vars.layers.iter().enumerate() {
        boundaries.push(h);
        let is_new_layer = view.new_layers.contains(&l);

        // Attention branch.
        let xn = tape.rms_norm(h, layer.norm_attn_gain, RMSNORM_EPS, norm_cols)?;
        let q = tape.matmul(xn, layer.attn_q)?;
        let k = tape.matmul(xn, layer.attn_k)?;
        let v = tape.matmul(xn, layer.attn_v)?;
        let q = tape.rope(q, kvc, config.rope_base, &positions)?;
        let k = tape.rope(k, kvc, config.rope_base, &positions)?;
        let mut heads = Vec::with_capacity(config.head_num);
        for hd in 0..config.head_num {
            let (from, to) = (hd * kvc, (hd + 1) * kvc);
            let qh = tape.slice_cols(q, from, to)?;
            let kh = tape.slice_cols(k, from, to)?;
            let vh = tape.slice_cols(v, from, to)?;
            let kt = tape.transpose(kh)?;
            let scores = tape.matmul(qh, kt)?;
            let scores = tape.scale(scores, attn_scale);
            let probs = tape.causal_row_softmax(scores)?;
            let mut att = tape.matmul(probs, vh)?;
            if view.active && hd >= view.heads_old {
                att = tape.scale(att, mask_r);
            }
            heads.push(att);
        }
        let merged = tape.concat_cols(&heads)?;
        let o = tape.matmul(merged, layer.attn_o)?;
        let o = mask_new_cols!(tape, o);
        let o = if is_new_layer { tape.scale(o, mask_r) } else { o };
        h = tape.add(h, o)?;

        // FFN branch.
        let xn = tape.rms_norm(h, layer.norm_ffn_gain, RMSNORM_EPS, norm_cols)?;
        let gate = tape.matmul(xn, layer.ffn_gate)?;
        let up = tape.matmul(xn, layer.ffn_up)?;
        let gate = tape.silu(gate);
        let mut inter = tape.mul(gate, up)?;
        if view.active && view.ffn_old[l] < config.ffn_dim {
            inter = tape.col_scale(inter, view.ffn_old[l], mask_r)?;
        }
        let down = tape.matmul(inter, layer.ffn_down)?;
        let down = mask_new_cols!(tape, down);
        let down = if is_new_layer {
            tape.scale(down, mask_r)
        } else {
            down
        };
        h = tape.add(h, down)?;
    }
    boundaries.push(h);

    let normed = tape.layer_norm(
        h,
        vars.final_ln_gain,
        vars.final_ln_bias,
        FINAL_LN_EPS,
        norm_cols,
    )?;
    let logits = tape.matmul(normed, vars.lm_head)?;
    let logits = tape.scale(logits, R::from_f64(config.output_mult));
    Ok((logits, boundaries))
}

/// Runs a plain (or masked) forward and returns the logits tensor.
pub fn forward_logits<R: Real>(
    params: &ModelParams<R>,
    config: &ModelConfig,
    tokens: &[u32],
    mask_state: Option<&MaskState>,
) -> Result<Tensor<R>> {
    let mut tape = Tape::new();
    let vars = register_params(&mut tape, params);
    let (logits, _) = build_forward(&mut tape, &vars, config, tokens, mask_state)?;
    Ok(tape.value(logits).clone())
}

/// Hidden states at every layer boundary (layer_num + 1 tensors).
pub fn forward_hiddens<R: Real>(
    params: &ModelParams<R>,
    config: &ModelConfig,
    tokens: &[u32],
    mask_state: Option<&MaskState>,
) -> Result<Vec<Tensor<R>>> {
    let mut tape = Tape::new();
    let vars = register_params(&mut tape, params);
    let (_, boundaries) = build_forward(&mut tape, &vars, config, tokens, mask_state)?;
    Ok(boundaries
        .into_iter()
        .map(|b| tape.value(b).clone())
        .collect())
}

/// Adds the summed next-token NLL of one sequence to the tape. Prediction
/// position `t` scores target `tokens[t+1]`; `loss_mask[t]`, when given,
/// selects which prediction positions count. Returns the scalar node and
/// the number of scored positions.
pub fn build_sum_nll<R: Real>(
    tape: &mut Tape<R>,
    vars: &ParamVars,
    config: &ModelConfig,
    tokens: &[u32],
    loss_mask: Option<&[bool]>,
    mask_state: Option<&MaskState>,
) -> Result<(VarId, usize)> {
    if tokens.len() < 2 {
        return Err(CoreError::Input(format!(
            "need at least 2 tokens for next-token loss, got {}",
            tokens.len()
        )));
    }
    let preds = tokens.len() - 1;
    if let Some(m) = loss_mask {
        if m.len() != preds {
            return Err(CoreError::Input(format!(
                "loss mask length {} != prediction positions {preds}",
                m.len()
            )));
        }
    }
    let (logits, _) = build_forward(tape, vars, config, tokens, mask_state)?;
    // Row `seq-1` has no target; it stays inactive with a dummy target.
    let mut targets = Vec::with_capacity(tokens.len());
    let mut active = Vec::with_capacity(tokens.len());
    for t in 0..preds {
        targets.push(tokens[t + 1]);
        active.push(loss_mask.is_none_or(|m| m[t]));
    }
    targets.push(0);
    active.push(false);
    let count = active.iter().filter(|&&a| a).count();
    if count == 0 {
        return Err(CoreError::Contract(
            "loss mask excludes every position".into(),
        ));
    }
    let nll = tape.sum_nll(logits, &targets, &active)?;
    Ok((nll, count))
}

/// Mean next-token negative log-likelihood of one sequence.
pub fn lm_loss<R: Real>(
    params: &ModelParams<R>,
    config: &ModelConfig,
    tokens: &[u32],
    loss_mask: Option<&[bool]>,
    mask_state: Option<&MaskState>,
) -> Result<R> {
    let mut tape = Tape::new();
    let vars = register_params(&mut tape, params);
    let (nll, count) = build_sum_nll(&mut tape, &vars, config, tokens, loss_mask, mask_state)?;
    Ok(tape.value(nll).scalar_value() / R::from_usize(count))
}

/// Plain RMS normalization of one vector: `y_i = gain_i * x_i /
/// sqrt(mean(x^2) + eps)` with eps 1e-6.
pub fn rmsnorm<R: Real>(x: &[R], gain: &[R]) -> Result<Vec<R>> {
    if x.len() != gain.len() || x.is_empty() {
        return Err(CoreError::Shape(format!(
            "rmsnorm lengths {} vs {}",
            x.len(),
            gain.len()
        )));
    }
    crate::growth::masked_rmsnorm(x, gain, 1.0, x.len())
}

/// Rotary embedding applied outside a tape: `x` is (positions x channels)
/// with channels grouped per head.
pub fn rope_apply<R: Real>(
    x: &Tensor<R>,
    positions: &[usize],
    head_dim: usize,
    base: f64,
) -> Result<Tensor<R>> {
    rope_kernel(x, head_dim, base, positions, false)
}

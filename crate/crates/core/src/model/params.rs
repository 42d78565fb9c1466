//! Parameter storage, canonical enumeration order, and fresh init.
//!
//! Everything that iterates parameters (init draws, optimizer state,
//! checkpoint serialization, gradient clipping) walks the canonical order
//! from [`ParamRef::enumerate`], which is what makes those paths
//! reproducible.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use super::config::ModelConfig;
use crate::real::Real;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Fresh-init standard deviation for weight matrices.
pub const INIT_STD: f64 = 0.02;

/// Per-layer tensors. Weight layout is row-vector convention: an
/// activation row `x` maps through `x @ W`, so attention weights are
/// `hidden x hidden`, `ffn_gate`/`ffn_up` are `hidden x ffn` and
/// `ffn_down` is `ffn x hidden`. No bias tensors exist.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<R: Real> {
    pub attn_q: Tensor<R>,
    pub attn_k: Tensor<R>,
    pub attn_v: Tensor<R>,
    pub attn_o: Tensor<R>,
    pub ffn_gate: Tensor<R>,
    pub ffn_up: Tensor<R>,
    pub ffn_down: Tensor<R>,
    pub norm_attn_gain: Tensor<R>,
    pub norm_ffn_gain: Tensor<R>,
}

/// Full parameter set. `embedding` (vocab x hidden) and `lm_head`
/// (hidden x vocab) are independent tensors, never aliased.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<R: Real> {
    pub embedding: Tensor<R>,
    pub lm_head: Tensor<R>,
    pub layers: Vec<LayerParams<R>>,
    pub final_ln_gain: Tensor<R>,
    pub final_ln_bias: Tensor<R>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerSlot {
    AttnQ,
    AttnK,
    AttnV,
    AttnO,
    FfnGate,
    FfnUp,
    FfnDown,
    NormAttnGain,
    NormFfnGain,
}

impl LayerSlot {
    pub const ALL: [LayerSlot; 9] = [
        LayerSlot::AttnQ,
        LayerSlot::AttnK,
        LayerSlot::AttnV,
        LayerSlot::AttnO,
        LayerSlot::FfnGate,
        LayerSlot::FfnUp,
        LayerSlot::FfnDown,
        LayerSlot::NormAttnGain,
        LayerSlot::NormFfnGain,
    ];

    fn name(&self) -> &'static str {
        match self {
            LayerSlot::AttnQ => "attn_q",
            LayerSlot::AttnK => "attn_k",
            LayerSlot::AttnV => "attn_v",
            LayerSlot::AttnO => "attn_o",
            LayerSlot::FfnGate => "ffn_gate",
            LayerSlot::FfnUp => "ffn_up",
            LayerSlot::FfnDown => "ffn_down",
            LayerSlot::NormAttnGain => "norm_attn_gain",
            LayerSlot::NormFfnGain => "norm_ffn_gain",
        }
    }
}

/// Address of one parameter tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamRef {
    Embedding,
    Layer(usize, LayerSlot),
    FinalLnGain,
    FinalLnBias,
    LmHead,
}

impl ParamRef {
    /// Canonical order: embedding, each layer's slots in declaration
    /// order, final norm gain and bias, lm_head.
    pub fn enumerate(layer_num: usize) -> Vec<ParamRef> {
        let mut out = Vec::with_capacity(3 + layer_num * 9 + 1);
        out.push(ParamRef::Embedding);
        for l in 0..layer_num {
            for slot in LayerSlot::ALL {
                out.push(ParamRef::Layer(l, slot));
            }
        }
        out.push(ParamRef::FinalLnGain);
        out.push(ParamRef::FinalLnBias);
        out.push(ParamRef::LmHead);
        out
    }

    /// Stable storage path, e.g. `layers.3.ffn_gate`.
    pub fn path(&self) -> String {
        match self {
            ParamRef::Embedding => String::from("embedding"),
            ParamRef::Layer(l, slot) => format!("layers.{l}.{}", slot.name()),
            ParamRef::FinalLnGain => String::from("final_ln_gain"),
            ParamRef::FinalLnBias => String::from("final_ln_bias"),
            ParamRef::LmHead => String::from("lm_head"),
        }
    }

    /// True for tensors with two width-proportional dimensions (the four
    /// attention projections and the three SwiGLU matrices). Embedding and
    /// lm_head have one vocab dimension, norm gains/bias have one width
    /// dimension; those are vector-like.
    pub fn matrix_like(&self) -> bool {
        matches!(
            self,
            ParamRef::Layer(
                _,
                LayerSlot::AttnQ
                    | LayerSlot::AttnK
                    | LayerSlot::AttnV
                    | LayerSlot::AttnO
                    | LayerSlot::FfnGate
                    | LayerSlot::FfnUp
                    | LayerSlot::FfnDown
            )
        )
    }

    /// Shape of this tensor under the given config.
    pub fn shape(&self, config: &ModelConfig) -> Vec<usize> {
        let d = config.hidden_dim;
        let f = config.ffn_dim;
        let v = config.vocab_size;
        match self {
            ParamRef::Embedding => alloc::vec![v, d],
            ParamRef::LmHead => alloc::vec![d, v],
            ParamRef::FinalLnGain | ParamRef::FinalLnBias => alloc::vec![d],
            ParamRef::Layer(_, slot) => match slot {
                LayerSlot::AttnQ | LayerSlot::AttnK | LayerSlot::AttnV | LayerSlot::AttnO => {
                    alloc::vec![d, d]
                }
                LayerSlot::FfnGate | LayerSlot::FfnUp => alloc::vec![d, f],
                LayerSlot::FfnDown => alloc::vec![f, d],
                LayerSlot::NormAttnGain | LayerSlot::NormFfnGain => alloc::vec![d],
            },
        }
    }
}

impl<R: Real> ModelParams<R> {
    pub fn get(&self, r: ParamRef) -> &Tensor<R> {
        match r {
            ParamRef::Embedding => &self.embedding,
            ParamRef::LmHead => &self.lm_head,
            ParamRef::FinalLnGain => &self.final_ln_gain,
            ParamRef::FinalLnBias => &self.final_ln_bias,
            ParamRef::Layer(l, slot) => {
                let layer = &self.layers[l];
                match slot {
                    LayerSlot::AttnQ => &layer.attn_q,
                    LayerSlot::AttnK => &layer.attn_k,
                    LayerSlot::AttnV => &layer.attn_v,
                    LayerSlot::AttnO => &layer.attn_o,
                    LayerSlot::FfnGate => &layer.ffn_gate,
                    LayerSlot::FfnUp => &layer.ffn_up,
                    LayerSlot::FfnDown => &layer.ffn_down,
                    LayerSlot::NormAttnGain => &layer.norm_attn_gain,
                    LayerSlot::NormFfnGain => &layer.norm_ffn_gain,
                }
            }
        }
    }

    pub fn get_mut(&mut self, r: ParamRef) -> &mut Tensor<R> {
        match r {
            ParamRef::Embedding => &mut self.embedding,
            ParamRef::LmHead => &mut self.lm_head,
            ParamRef::FinalLnGain => &mut self.final_ln_gain,
            ParamRef::FinalLnBias => &mut self.final_ln_bias,
            ParamRef::Layer(l, slot) => {
                let layer = &mut self.layers[l];
                match slot {
                    LayerSlot::AttnQ => &mut layer.attn_q,
                    LayerSlot::AttnK => &mut layer.attn_k,
                    LayerSlot::AttnV => &mut layer.attn_v,
                    LayerSlot::AttnO => &mut layer.attn_o,
                    LayerSlot::FfnGate => &mut layer.ffn_gate,
                    LayerSlot::FfnUp => &mut layer.ffn_up,
                    LayerSlot::FfnDown => &mut layer.ffn_down,
                    LayerSlot::NormAttnGain => &mut layer.norm_attn_gain,
                    LayerSlot::NormFfnGain => &mut layer.norm_ffn_gain,
                }
            }
        }
    }

    /// Number of scalar values actually allocated.
    pub fn scalar_count(&self) -> u64 {
        ParamRef::enumerate(self.layers.len())
            .into_iter()
            .map(|r| self.get(r).len() as u64)
            .sum()
    }
}

/// All-zero parameter set with the config's shapes.
pub fn zero_params<R: Real>(config: &ModelConfig) -> ModelParams<R> {
    ModelParams {
        embedding: Tensor::zeros(&ParamRef::Embedding.shape(config)),
        lm_head: Tensor::zeros(&ParamRef::LmHead.shape(config)),
        layers: (0..config.layer_num)
            .map(|l| LayerParams {
                attn_q: Tensor::zeros(&ParamRef::Layer(l, LayerSlot::AttnQ).shape(config)),
                attn_k: Tensor::zeros(&ParamRef::Layer(l, LayerSlot::AttnK).shape(config)),
                attn_v: Tensor::zeros(&ParamRef::Layer(l, LayerSlot::AttnV).shape(config)),
                attn_o: Tensor::zeros(&ParamRef::Layer(l, LayerSlot::AttnO).shape(config)),
                ffn_gate: Tensor::zeros(&ParamRef::Layer(l, LayerSlot::FfnGate).shape(config)),
                ffn_up: Tensor::zeros(&ParamRef::Layer(l, LayerSlot::FfnUp).shape(config)),
                ffn_down: Tensor::zeros(&ParamRef::Layer(l, LayerSlot::FfnDown).shape(config)),
                norm_attn_gain: Tensor::zeros(
                    &ParamRef::Layer(l, LayerSlot::NormAttnGain).shape(config),
                ),
                norm_ffn_gain: Tensor::zeros(
                    &ParamRef::Layer(l, LayerSlot::NormFfnGain).shape(config),
                ),
            })
            .collect(),
        final_ln_gain: Tensor::zeros(&ParamRef::FinalLnGain.shape(config)),
        final_ln_bias: Tensor::zeros(&ParamRef::FinalLnBias.shape(config)),
    }
}

/// Fresh initialization: weights from normal(0, 0.02^2), norm gains 1,
/// final LayerNorm bias 0. Draws happen in canonical parameter order,
/// row-major within each tensor.
pub fn init_params<R: Real>(config: &ModelConfig, rng: &mut Rng) -> crate::error::Result<ModelParams<R>> {
    config.validate()?;
    let mut params = zero_params(config);
    for r in ParamRef::enumerate(config.layer_num) {
        let shape = r.shape(config);
        let tensor = match r {
            ParamRef::FinalLnGain | ParamRef::Layer(_, LayerSlot::NormAttnGain | LayerSlot::NormFfnGain) => {
                Tensor::filled(&shape, R::ONE)
            }
            ParamRef::FinalLnBias => Tensor::zeros(&shape),
            _ => sample_normal(&shape, INIT_STD, rng),
        };
        *params.get_mut(r) = tensor;
    }
    Ok(params)
}

pub(crate) fn sample_normal<R: Real>(shape: &[usize], std: f64, rng: &mut Rng) -> Tensor<R> {
    let count: usize = shape.iter().product();
    let data: Vec<R> = (0..count)
        .map(|_| R::from_f64(rng.next_normal_scaled(std)))
        .collect();
    Tensor::from_vec(shape, data).unwrap()
}

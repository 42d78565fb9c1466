//! Adam with decoupled weight decay and global-norm gradient clipping.
//!
//! Weight decay applies to matrix-like tensors only; the two learning-rate
//! groups come from [`crate::schedule::classify`]. Moment tensors follow
//! the canonical parameter order and track parameter shapes across growth.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::model::{ModelConfig, ModelParams, ParamRef};
use crate::real::Real;
use crate::tensor::Tensor;

/// Optimizer hyperparameters. The defaults are the values used throughout.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay, matrix-like tensors only.
    pub weight_decay: f64,
    /// Global gradient-norm clip threshold.
    pub clip_norm: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.1,
            clip_norm: 1.0,
        }
    }
}

/// First/second moments per parameter (canonical order) plus the shared
/// step counter used for bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<R: Real> {
    pub m: Vec<Tensor<R>>,
    pub v: Vec<Tensor<R>>,
    pub step: u64,
}

impl<R: Real> OptimizerState<R> {
    pub fn zeros(config: &ModelConfig) -> Self {
        let refs = ParamRef::enumerate(config.layer_num);
        OptimizerState {
            m: refs.iter().map(|r| Tensor::zeros(&r.shape(config))).collect(),
            v: refs.iter().map(|r| Tensor::zeros(&r.shape(config))).collect(),
            step: 0,
        }
    }
}

/// Scales all gradients in place so their global L2 norm does not exceed
/// `clip_norm`; returns the pre-clip norm.
pub fn clip_global_norm<R: Real>(grads: &mut [Tensor<R>], clip_norm: f64) -> f64 {
    let mut sum_sq = R::ZERO;
    for g in grads.iter() {
        for &v in g.data() {
            sum_sq += v * v;
        }
    }
    let norm = sum_sq.to_f64().sqrt();
    if norm > clip_norm && norm > 0.0 {
        let scale = R::from_f64(clip_norm / norm);
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v = *v * scale;
            }
        }
    }
    norm
}

/// One Adam update over all parameters. `grads` must follow the canonical
/// order of `refs`. Matrix-like tensors use `lr_matrix` and weight decay;
/// everything else uses `lr_vector` with no decay.
pub fn adam_step<R: Real>(
    params: &mut ModelParams<R>,
    opt: &mut OptimizerState<R>,
    refs: &[ParamRef],
    grads: &[Tensor<R>],
    lr_vector: f64,
    lr_matrix: f64,
    hyper: &AdamHyper,
) -> Result<()> {
    if grads.len() != refs.len() || opt.m.len() != refs.len() {
        return Err(CoreError::Contract(alloc::format!(
            "adam_step arity mismatch: {} refs, {} grads, {} moments",
            refs.len(),
            grads.len(),
            opt.m.len()
        )));
    }
    opt.step += 1;
    let t = opt.step;
    let bc1 = R::from_f64(1.0 - libm::pow(hyper.beta1, t as f64));
    let bc2 = R::from_f64(1.0 - libm::pow(hyper.beta2, t as f64));
    let b1 = R::from_f64(hyper.beta1);
    let b2 = R::from_f64(hyper.beta2);
    let one_m_b1 = R::from_f64(1.0 - hyper.beta1);
    let one_m_b2 = R::from_f64(1.0 - hyper.beta2);
    let eps = R::from_f64(hyper.eps);

    for (i, &r) in refs.iter().enumerate() {
        let matrix = r.matrix_like();
        let lr = R::from_f64(if matrix { lr_matrix } else { lr_vector });
        let decay = R::from_f64(if matrix {
            1.0 - lr_matrix * hyper.weight_decay
        } else {
            1.0
        });
        let p = params.get_mut(r);
        if p.shape() != grads[i].shape() || p.shape() != opt.m[i].shape() {
            return Err(CoreError::Contract(alloc::format!(
                "adam_step shape mismatch at {}",
                r.path()
            )));
        }
        let (m, v) = (opt.m[i].data_mut(), opt.v[i].data_mut());
        for ((pv, &g), (mv, vv)) in p
            .data_mut()
            .iter_mut()
            .zip(grads[i].data().iter())
            .zip(m.iter_mut().zip(v.iter_mut()))
        {
            *mv = b1 * *mv + one_m_b1 * g;
            *vv = b2 * *vv + one_m_b2 * g * g;
            let m_hat = *mv / bc1;
            let v_hat = *vv / bc2;
            *pv = *pv * decay - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

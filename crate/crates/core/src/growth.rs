//! Function-preserving width and depth growth.
//!
//! Growth enlarges a trained checkpoint without changing its function at
//! the moment of growth: every pre-growth weight is copied bit-exactly
//! into the old block of its enlarged tensor, new structures start
//! neutralized by a scalar mask at 0, and the mask rises linearly to 1
//! over a configured number of steps. Width growth enlarges `hidden_dim`
//! (and with it `head_num`) and `ffn_dim`; depth growth inserts copies of
//! existing layers chosen by the input/output-distance rule.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{CoreError, Result};
use crate::model::{forward_hiddens, forward_logits, ModelConfig, ParamRef};
use crate::real::Real;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Absolute distance below which two layer distances count as comparable
/// for the tie-break rule.
pub const DISTANCE_TIE_EPS: f64 = 1e-9;

/// A layer may serve as the source of at most this many duplicates.
pub const MAX_DUPLICATES_PER_LAYER: usize = 2;

fn default_width_init_std() -> f64 {
    0.004
}

/// Linear step-to-mask mapping of one growth event.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GrowthTransition {
    /// Step at which the growth was applied (mask 0).
    pub start_step: u64,
    /// Steps over which the mask rises to 1.
    pub transition_steps: u64,
}

/// Masking state of the current growth event, carried in the checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskState {
    /// Current mask scalar in [0, 1].
    pub mask: f64,
    /// Pre-growth hidden width; coordinates at or beyond it are new.
    pub hidden_old: usize,
    /// Pre-growth FFN width per (current) layer; inserted copies inherit
    /// their source's entry.
    pub ffn_old: Vec<usize>,
    /// Indices (in the current layer stack) of layers added by this event.
    pub new_layer_ids: BTreeSet<usize>,
    pub transition: GrowthTransition,
}

impl MaskState {
    /// True once the transition has fully integrated the new structures.
    pub fn complete(&self) -> bool {
        self.mask >= 1.0
    }
}

/// Distribution used to initialize newly created width entries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WidthInit {
    #[default]
    Normal,
}

/// How depth-growth source layers are chosen.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DepthSources {
    /// Input/output-distance rule over a probe batch.
    #[default]
    DistanceBased,
    /// Explicit (source_layer, insert_after) pairs, original indices.
    Explicit(Vec<(usize, usize)>),
}

/// A growth event: the target architecture plus init and transition rules.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrowthPlan {
    pub target: ModelConfig,
    #[serde(default = "default_width_init_std")]
    pub width_init_std: f64,
    #[serde(default)]
    pub width_init: WidthInit,
    #[serde(default)]
    pub depth_sources: DepthSources,
    pub transition_steps: u64,
    pub seed: u64,
}

/// Per-layer input/output distances of the hidden stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerDistance {
    pub mean_euclidean: f64,
    pub mean_cosine: f64,
    pub sample_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerDistanceStats {
    pub layers: Vec<LayerDistance>,
}

/// Result of comparing two checkpoints on probe inputs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PreservationReport {
    pub max_abs_diff: f64,
    pub max_rel_diff: f64,
    pub probes: usize,
}

/// Mask scalar at `step`: `clamp((step - start) / transition_steps, 0, 1)`.
pub fn mask_value(step: u64, t: &GrowthTransition) -> Result<f64> {
    if t.transition_steps == 0 {
        return Err(CoreError::Config(
            "growth transition_steps must be positive".into(),
        ));
    }
    if step <= t.start_step {
        return Ok(0.0);
    }
    let elapsed = step - t.start_step;
    if elapsed >= t.transition_steps {
        return Ok(1.0);
    }
    Ok(elapsed as f64 / t.transition_steps as f64)
}

/// Masked RMS normalization of one vector. Coordinates at or beyond
/// `d_old` are scaled by `mask` and the mean square divides by the
/// effective dimension `d_old + mask * (d - d_old)`, so mask 0 reproduces
/// the plain normalization of the old sub-vector and mask 1 the plain
/// normalization of the full vector.
pub fn masked_rmsnorm<R: Real>(x: &[R], gain: &[R], mask: f64, d_old: usize) -> Result<Vec<R>> {
    if x.len() != gain.len() || x.is_empty() {
        return Err(CoreError::Shape(format!(
            "masked_rmsnorm lengths {} vs {}",
            x.len(),
            gain.len()
        )));
    }
    if d_old > x.len() {
        return Err(CoreError::Shape(format!(
            "masked_rmsnorm d_old {} exceeds length {}",
            d_old,
            x.len()
        )));
    }
    let mask_r = R::from_f64(mask);
    let d_eff = R::from_f64(d_old as f64 + mask * (x.len() - d_old) as f64);
    let eps = R::from_f64(crate::model::RMSNORM_EPS);
    let mut scaled: Vec<R> = x.to_vec();
    for v in &mut scaled[d_old..] {
        *v = *v * mask_r;
    }
    let mut sum_sq = R::ZERO;
    for &v in &scaled {
        sum_sq += v * v;
    }
    let denom = (sum_sq / d_eff + eps).sqrt();
    Ok(scaled
        .iter()
        .zip(gain.iter())
        .map(|(&v, &g)| g * v / denom)
        .collect())
}

/// Outcome of applying a growth plan.
pub struct GrowthOutcome<R: Real> {
    pub checkpoint: Checkpoint<R>,
    /// (source, insert_after) pairs when depth grew.
    pub depth_selection: Option<Vec<(usize, usize)>>,
    /// Distance stats used by distance-based selection.
    pub stats: Option<LayerDistanceStats>,
}

/// Applies a plan that may widen, deepen, or both. Width is applied first;
/// the depth step then merges into the same mask event. Distance-based
/// selection runs on the post-width checkpoint (function-identical to the
/// pre-growth model at mask 0), using `probes`.
pub fn apply_plan<R: Real>(
    ckpt: &Checkpoint<R>,
    plan: &GrowthPlan,
    probes: Option<&[Vec<u32>]>,
) -> Result<GrowthOutcome<R>> {
    let widens = plan.target.hidden_dim != ckpt.config.hidden_dim
        || plan.target.ffn_dim != ckpt.config.ffn_dim;
    let deepens = plan.target.layer_num != ckpt.config.layer_num;
    if !widens && !deepens {
        return Err(CoreError::Plan("plan changes no dimensions".into()));
    }
    let history_before = ckpt.growth_history.len();

    let mut current;
    if widens {
        let mut width_plan = plan.clone();
        width_plan.target.layer_num = ckpt.config.layer_num;
        current = grow_width(ckpt, &width_plan)?;
    } else {
        current = ckpt.clone();
    }

    let (stats, selection) = if deepens {
        let (stats, selection) = match &plan.depth_sources {
            DepthSources::Explicit(pairs) => (None, pairs.clone()),
            DepthSources::DistanceBased => {
                let probes = probes.ok_or_else(|| {
                    CoreError::Plan("distance-based depth growth needs a probe batch".into())
                })?;
                let stats = layer_io_distance(&current, probes)?;
                let n_new = plan.target.layer_num - current.config.layer_num;
                let selection = select_source_layers(&stats, n_new)?;
                (Some(stats), selection)
            }
        };
        current = grow_depth(&current, plan, &selection)?;
        (stats, Some(selection))
    } else {
        (None, None)
    };

    // One plan applied = one history entry, even when it both widens and
    // deepens through the two operators.
    current.growth_history.truncate(history_before);
    current.growth_history.push(plan.clone());
    Ok(GrowthOutcome {
        checkpoint: current,
        depth_selection: selection,
        stats,
    })
}

fn check_common_target<R: Real>(ckpt: &Checkpoint<R>, target: &ModelConfig) -> Result<()> {
    target
        .validate()
        .map_err(|e| CoreError::Plan(format!("invalid target: {e}")))?;
    let src = &ckpt.config;
    if target.vocab_size != src.vocab_size {
        return Err(CoreError::Plan("vocab_size growth is not supported".into()));
    }
    if target.kv_channels != src.kv_channels {
        return Err(CoreError::Plan("kv_channels growth is not supported".into()));
    }
    if target.rope_base != src.rope_base {
        return Err(CoreError::Plan("rope_base must not change at growth".into()));
    }
    if target.max_seq_len < src.max_seq_len {
        return Err(CoreError::Plan("max_seq_len must not shrink".into()));
    }
    // Changing either multiplier rescales the function itself and would
    // break preservation at the growth step.
    if target.input_mult != src.input_mult || target.output_mult != src.output_mult {
        return Err(CoreError::Plan(
            "input_mult/output_mult must not change at growth".into(),
        ));
    }
    Ok(())
}

/// Mask-event boundaries the new state should carry: merged with an
/// existing same-step event, fresh otherwise. Errors mid-transition.
fn event_base<R: Real>(ckpt: &Checkpoint<R>, transition_steps: u64) -> Result<MaskState> {
    if transition_steps == 0 {
        return Err(CoreError::Plan("transition_steps must be positive".into()));
    }
    match &ckpt.mask_state {
        Some(s) if !s.complete() => {
            if s.mask == 0.0 && s.transition.start_step == ckpt.step {
                if s.transition.transition_steps != transition_steps {
                    return Err(CoreError::Plan(
                        "growth steps merged into one event must share transition_steps".into(),
                    ));
                }
                Ok(s.clone())
            } else {
                Err(CoreError::Plan(format!(
                    "previous growth transition incomplete (mask {})",
                    s.mask
                )))
            }
        }
        _ => Ok(MaskState {
            mask: 0.0,
            hidden_old: ckpt.config.hidden_dim,
            ffn_old: vec![ckpt.config.ffn_dim; ckpt.config.layer_num],
            new_layer_ids: BTreeSet::new(),
            transition: GrowthTransition {
                start_step: ckpt.step,
                transition_steps,
            },
        }),
    }
}

fn fill_boundaries(r: ParamRef, d_old: usize, f_old: usize, src: &ModelConfig) -> (usize, usize) {
    use crate::model::LayerSlot::*;
    match r {
        ParamRef::Embedding => (src.vocab_size, d_old),
        ParamRef::LmHead => (d_old, src.vocab_size),
        ParamRef::FinalLnGain | ParamRef::FinalLnBias => (1, d_old),
        ParamRef::Layer(_, slot) => match slot {
            AttnQ | AttnK | AttnV | AttnO => (d_old, d_old),
            FfnGate | FfnUp => (d_old, f_old),
            FfnDown => (f_old, d_old),
            NormAttnGain | NormFfnGain => (1, d_old),
        },
    }
}

enum Fill {
    Draw(f64),
    Ones,
    Zeros,
}

/// Copies the old block of `old` into a tensor of `new_shape` and fills
/// the rest per `fill`. Draws, when any, happen row-major over the new
/// tensor's new entries.
fn grow_tensor<R: Real>(
    old: &Tensor<R>,
    new_shape: &[usize],
    old_rows: usize,
    old_cols: usize,
    fill: &Fill,
    rng: &mut Rng,
) -> Tensor<R> {
    let (rows, cols) = match new_shape.len() {
        1 => (1, new_shape[0]),
        _ => (new_shape[0], new_shape[1]),
    };
    let old_view_cols = if old.shape().len() == 1 {
        old.shape()[0]
    } else {
        old.shape()[1]
    };
    let mut data = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        for j in 0..cols {
            if i < old_rows && j < old_cols {
                data.push(old.data()[i * old_view_cols + j]);
            } else {
                data.push(match fill {
                    Fill::Draw(std) => R::from_f64(rng.next_normal_scaled(*std)),
                    Fill::Ones => R::ONE,
                    Fill::Zeros => R::ZERO,
                });
            }
        }
    }
    Tensor::from_vec(new_shape, data).unwrap()
}

/// Widens `hidden_dim` and/or `ffn_dim` (layer count unchanged).
///
/// Old blocks copy bit-exactly; new weight entries draw from
/// normal(0, width_init_std^2) in canonical parameter order; new norm-gain
/// entries are 1, new final-bias entries 0. Moments of surviving entries
/// carry over; new entries start at zero. The result carries a mask-0
/// state recording the old boundaries.
pub fn grow_width<R: Real>(ckpt: &Checkpoint<R>, plan: &GrowthPlan) -> Result<Checkpoint<R>> {
    check_common_target(ckpt, &plan.target)?;
    let src = ckpt.config.clone();
    let tgt = &plan.target;
    if tgt.layer_num != src.layer_num {
        return Err(CoreError::Plan(format!(
            "grow_width must keep layer_num ({} -> {})",
            src.layer_num, tgt.layer_num
        )));
    }
    if tgt.hidden_dim < src.hidden_dim || tgt.ffn_dim < src.ffn_dim {
        return Err(CoreError::Plan(format!(
            "plan shrinks dimensions: hidden {} -> {}, ffn {} -> {}",
            src.hidden_dim, tgt.hidden_dim, src.ffn_dim, tgt.ffn_dim
        )));
    }
    if tgt.hidden_dim == src.hidden_dim && tgt.ffn_dim == src.ffn_dim {
        return Err(CoreError::Plan("width plan grows nothing".into()));
    }
    if plan.width_init_std.is_nan() || plan.width_init_std <= 0.0 {
        return Err(CoreError::Plan(format!(
            "width_init_std {} must be positive",
            plan.width_init_std
        )));
    }

    let mask_state = event_base(ckpt, plan.transition_steps)?;
    let (d_old, f_old) = (src.hidden_dim, src.ffn_dim);
    let mut rng = Rng::new(plan.seed);
    let mut out = ckpt.clone();
    out.config = tgt.clone();

    for r in ParamRef::enumerate(src.layer_num) {
        let (old_rows, old_cols) = fill_boundaries(r, d_old, f_old, &src);
        let new_shape = r.shape(tgt);
        let fill = match r {
            ParamRef::FinalLnGain
            | ParamRef::Layer(_, crate::model::LayerSlot::NormAttnGain)
            | ParamRef::Layer(_, crate::model::LayerSlot::NormFfnGain) => Fill::Ones,
            ParamRef::FinalLnBias => Fill::Zeros,
            _ => Fill::Draw(plan.width_init_std),
        };
        *out.params.get_mut(r) = grow_tensor(
            ckpt.params.get(r),
            &new_shape,
            old_rows,
            old_cols,
            &fill,
            &mut rng,
        );
    }
    for (i, r) in ParamRef::enumerate(src.layer_num).into_iter().enumerate() {
        let (old_rows, old_cols) = fill_boundaries(r, d_old, f_old, &src);
        let new_shape = r.shape(tgt);
        out.opt.m[i] = grow_tensor(
            &ckpt.opt.m[i],
            &new_shape,
            old_rows,
            old_cols,
            &Fill::Zeros,
            &mut rng,
        );
        out.opt.v[i] = grow_tensor(
            &ckpt.opt.v[i],
            &new_shape,
            old_rows,
            old_cols,
            &Fill::Zeros,
            &mut rng,
        );
    }

    out.mask_state = Some(mask_state);
    out.growth_history.push(plan.clone());
    debug_assert_eq!(out.params.scalar_count(), tgt.count_params());
    Ok(out)
}

#[derive(Clone, Copy)]
enum Origin {
    Original(usize),
    Copy(usize),
}

/// Inserts duplicated layers per `selection` ((source, insert_after) in
/// original indices; every duplicate lands immediately after its
/// insert_after layer, in selection order). Copies are parameter-level
/// clones with zero moments; their residual-branch outputs are masked, so
/// mask 0 makes each of them the identity map.
pub fn grow_depth<R: Real>(
    ckpt: &Checkpoint<R>,
    plan: &GrowthPlan,
    selection: &[(usize, usize)],
) -> Result<Checkpoint<R>> {
    check_common_target(ckpt, &plan.target)?;
    let src = ckpt.config.clone();
    let tgt = &plan.target;
    if tgt.layer_num <= src.layer_num {
        return Err(CoreError::Plan(format!(
            "plan shrinks depth: {} -> {}",
            src.layer_num, tgt.layer_num
        )));
    }
    if tgt.hidden_dim != src.hidden_dim || tgt.ffn_dim != src.ffn_dim {
        return Err(CoreError::Plan(
            "grow_depth must keep hidden_dim and ffn_dim; widen first".into(),
        ));
    }
    let n_new = tgt.layer_num - src.layer_num;
    if selection.len() != n_new {
        return Err(CoreError::Plan(format!(
            "selection supplies {} layers, plan adds {n_new}",
            selection.len()
        )));
    }
    for &(s, a) in selection {
        if s >= src.layer_num || a >= src.layer_num {
            return Err(CoreError::Plan(format!(
                "selection ({s}, {a}) out of range for {} layers",
                src.layer_num
            )));
        }
    }

    let base = event_base(ckpt, plan.transition_steps)?;

    // Duplicates grouped by insertion point, kept in selection order.
    let mut copies_after: Vec<Vec<usize>> = vec![Vec::new(); src.layer_num];
    for &(s, a) in selection {
        copies_after[a].push(s);
    }
    let mut origins: Vec<Origin> = Vec::with_capacity(tgt.layer_num);
    for (l, copies) in copies_after.iter().enumerate() {
        origins.push(Origin::Original(l));
        for &s in copies {
            origins.push(Origin::Copy(s));
        }
    }
    debug_assert_eq!(origins.len(), tgt.layer_num);

    let mut out = ckpt.clone();
    out.config = tgt.clone();
    out.params.layers = origins
        .iter()
        .map(|o| match o {
            Origin::Original(l) | Origin::Copy(l) => ckpt.params.layers[*l].clone(),
        })
        .collect();

    // Rebuild optimizer state in the new canonical order; copies get zero
    // moments, originals keep theirs bit-exactly.
    let old_index: alloc::collections::BTreeMap<String, usize> =
        ParamRef::enumerate(src.layer_num)
            .into_iter()
            .enumerate()
            .map(|(i, r)| (r.path(), i))
            .collect();
    let mut new_m = Vec::new();
    let mut new_v = Vec::new();
    for r in ParamRef::enumerate(tgt.layer_num) {
        let mapped = match r {
            ParamRef::Layer(l, slot) => match origins[l] {
                Origin::Original(ol) => Some(ParamRef::Layer(ol, slot)),
                Origin::Copy(_) => None,
            },
            other => Some(other),
        };
        match mapped {
            Some(old_ref) => {
                let idx = old_index[&old_ref.path()];
                new_m.push(ckpt.opt.m[idx].clone());
                new_v.push(ckpt.opt.v[idx].clone());
            }
            None => {
                let shape = r.shape(tgt);
                new_m.push(Tensor::zeros(&shape));
                new_v.push(Tensor::zeros(&shape));
            }
        }
    }
    out.opt.m = new_m;
    out.opt.v = new_v;

    let mut state = base;
    let base_ffn = state.ffn_old.clone();
    let prior_new: BTreeSet<usize> = state.new_layer_ids.clone();
    let mut new_ids = BTreeSet::new();
    let mut new_ffn = Vec::with_capacity(tgt.layer_num);
    for (idx, o) in origins.iter().enumerate() {
        match o {
            Origin::Original(l) => {
                new_ffn.push(base_ffn[*l]);
                if prior_new.contains(l) {
                    new_ids.insert(idx);
                }
            }
            Origin::Copy(s) => {
                new_ffn.push(base_ffn[*s]);
                new_ids.insert(idx);
            }
        }
    }
    state.ffn_old = new_ffn;
    state.new_layer_ids = new_ids;
    out.mask_state = Some(state);
    out.growth_history.push(plan.clone());
    debug_assert_eq!(out.params.scalar_count(), tgt.count_params());
    Ok(out)
}

/// Mean input/output distances of each transformer block over a batch,
/// computed with the checkpoint's own masked forward.
pub fn layer_io_distance<R: Real>(
    ckpt: &Checkpoint<R>,
    batch: &[Vec<u32>],
) -> Result<LayerDistanceStats> {
    if batch.is_empty() {
        return Err(CoreError::Input("empty probe batch".into()));
    }
    let layers = ckpt.config.layer_num;
    let mut euclid = vec![0.0f64; layers];
    let mut cosine = vec![0.0f64; layers];
    let mut count = 0usize;
    for tokens in batch {
        let hiddens = forward_hiddens(
            &ckpt.params,
            &ckpt.config,
            tokens,
            ckpt.mask_state.as_ref(),
        )?;
        for l in 0..layers {
            let (inp, out) = (&hiddens[l], &hiddens[l + 1]);
            for r in 0..inp.rows() {
                let (a, b) = (inp.row(r), out.row(r));
                let mut diff_sq = 0.0f64;
                let mut dot = 0.0f64;
                let mut na = 0.0f64;
                let mut nb = 0.0f64;
                for (x, y) in a.iter().zip(b.iter()) {
                    let (x, y) = (x.to_f64(), y.to_f64());
                    diff_sq += (x - y) * (x - y);
                    dot += x * y;
                    na += x * x;
                    nb += y * y;
                }
                euclid[l] += diff_sq.sqrt();
                // Identical vectors are distance 0 by definition; the
                // general case clamps the roundoff of 1 - cos into [0, 2].
                if diff_sq > 0.0 && na > 0.0 && nb > 0.0 {
                    cosine[l] += (1.0 - dot / (na.sqrt() * nb.sqrt())).clamp(0.0, 2.0);
                }
            }
        }
        count += tokens.len();
    }
    Ok(LayerDistanceStats {
        layers: (0..layers)
            .map(|l| LayerDistance {
                mean_euclidean: euclid[l] / count as f64,
                mean_cosine: cosine[l] / count as f64,
                sample_count: count,
            })
            .collect(),
    })
}

/// Chooses depth-growth sources from distance stats.
///
/// Layers are ranked by ascending mean Euclidean distance, distances
/// comparable within [`DISTANCE_TIE_EPS`] preferring the later layer. The
/// `n_new` duplicate slots spread over the ranking breadth-first (every
/// ranked layer gets one duplicate before any layer gets its second), with
/// at most [`MAX_DUPLICATES_PER_LAYER`] per layer. The returned pairs are
/// grouped by source in ranking order; each inserts after its source.
pub fn select_source_layers(
    stats: &LayerDistanceStats,
    n_new: usize,
) -> Result<Vec<(usize, usize)>> {
    let layer_num = stats.layers.len();
    if n_new == 0 {
        return Err(CoreError::Input("n_new must be >= 1".into()));
    }
    if n_new > MAX_DUPLICATES_PER_LAYER * layer_num {
        return Err(CoreError::Plan(format!(
            "cannot source {n_new} new layers from {layer_num} (cap {} each)",
            MAX_DUPLICATES_PER_LAYER
        )));
    }

    // Strict total-order sort, then epsilon-grouping: a group extends while
    // the distance stays within the tie epsilon of the group's smallest.
    let mut order: Vec<usize> = (0..layer_num).collect();
    order.sort_by(|&a, &b| {
        stats.layers[a]
            .mean_euclidean
            .partial_cmp(&stats.layers[b].mean_euclidean)
            .unwrap()
            .then(a.cmp(&b))
    });
    let mut ranking: Vec<usize> = Vec::with_capacity(layer_num);
    let mut i = 0;
    while i < layer_num {
        let group_start = stats.layers[order[i]].mean_euclidean;
        let mut j = i;
        while j < layer_num
            && stats.layers[order[j]].mean_euclidean - group_start <= DISTANCE_TIE_EPS
        {
            j += 1;
        }
        let mut group: Vec<usize> = order[i..j].to_vec();
        group.sort_by(|a, b| b.cmp(a));
        ranking.extend(group);
        i = j;
    }

    let mut counts = vec![0usize; layer_num];
    let mut remaining = n_new;
    for _pass in 0..MAX_DUPLICATES_PER_LAYER {
        for &l in &ranking {
            if remaining == 0 {
                break;
            }
            if counts[l] < MAX_DUPLICATES_PER_LAYER {
                // Breadth-first: each pass hands out at most one per layer.
                counts[l] += 1;
                remaining -= 1;
            }
        }
        if remaining == 0 {
            break;
        }
    }
    debug_assert_eq!(remaining, 0);

    let mut out = Vec::with_capacity(n_new);
    for &l in &ranking {
        for _ in 0..counts[l] {
            out.push((l, l));
        }
    }
    Ok(out)
}

/// Runs both models over every probe and reports the worst logit
/// disagreement. The post checkpoint must be at mask 0.
pub fn verify_function_preservation<R: Real>(
    pre: &Checkpoint<R>,
    post: &Checkpoint<R>,
    probes: &[Vec<u32>],
) -> Result<PreservationReport> {
    match &post.mask_state {
        Some(s) if s.mask == 0.0 => {}
        other => {
            return Err(CoreError::Contract(format!(
                "post checkpoint must carry a mask-0 growth state, found mask {:?}",
                other.as_ref().map(|s| s.mask)
            )))
        }
    }
    if pre.config.vocab_size != post.config.vocab_size {
        return Err(CoreError::Contract(format!(
            "vocab mismatch: {} vs {}",
            pre.config.vocab_size, post.config.vocab_size
        )));
    }
    if probes.is_empty() {
        return Err(CoreError::Input("no probes supplied".into()));
    }
    let mut max_abs = 0.0f64;
    let mut max_rel = 0.0f64;
    for tokens in probes {
        let a = forward_logits(&pre.params, &pre.config, tokens, pre.mask_state.as_ref())?;
        let b = forward_logits(&post.params, &post.config, tokens, post.mask_state.as_ref())?;
        for (x, y) in a.data().iter().zip(b.data().iter()) {
            let (x, y) = (x.to_f64(), y.to_f64());
            let diff = (x - y).abs();
            if diff > max_abs {
                max_abs = diff;
            }
            let denom = x.abs().max(y.abs());
            if denom > 0.0 {
                let rel = diff / denom;
                if rel > max_rel {
                    max_rel = rel;
                }
            }
        }
    }
    Ok(PreservationReport {
        max_abs_diff: max_abs,
        max_rel_diff: max_rel,
        probes: probes.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_value_endpoints_and_midpoint() {
        let t = GrowthTransition {
            start_step: 1000,
            transition_steps: 200,
        };
        assert_eq!(mask_value(1000, &t).unwrap(), 0.0);
        assert_eq!(mask_value(1200, &t).unwrap(), 1.0);
        assert_eq!(mask_value(1100, &t).unwrap(), 0.5);
        assert_eq!(mask_value(0, &t).unwrap(), 0.0);
        assert_eq!(mask_value(99999, &t).unwrap(), 1.0);
        let bad = GrowthTransition {
            start_step: 0,
            transition_steps: 0,
        };
        assert!(matches!(mask_value(1, &bad), Err(CoreError::Config(_))));
    }

    #[test]
    fn masked_rmsnorm_mask_zero_ignores_new_coords() {
        let gain = vec![1.0f64; 5];
        // Junk in the new coordinates must not leak through at mask 0.
        let x = vec![3.0, 4.0, 1e12, -7.0, f64::MAX / 8.0];
        let y = masked_rmsnorm(&x, &gain, 0.0, 2).unwrap();
        let plain = masked_rmsnorm(&[3.0, 4.0], &[1.0, 1.0], 1.0, 2).unwrap();
        assert_eq!(y[0], plain[0]);
        assert_eq!(y[1], plain[1]);
        assert_eq!(&y[2..], &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn masked_rmsnorm_mask_one_is_plain() {
        let gain = vec![0.5f64, 1.5, 2.0];
        let x = vec![1.0, -2.0, 0.25];
        let masked = masked_rmsnorm(&x, &gain, 1.0, 1).unwrap();
        let plain = masked_rmsnorm(&x, &gain, 1.0, 3).unwrap();
        for (a, b) in masked.iter().zip(plain.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn masked_rmsnorm_hand_case() {
        // x = [3, 4 | 2], d_old = 2, mask = 0.5: scaled = [3, 4, 1],
        // d_eff = 2.5, denominator sqrt(26/2.5 + eps).
        let y = masked_rmsnorm(&[3.0f64, 4.0, 2.0], &[1.0, 1.0, 1.0], 0.5, 2).unwrap();
        let denom = (26.0f64 / 2.5 + 1e-6).sqrt();
        assert!((y[0] - 3.0 / denom).abs() < 1e-12);
        assert!((y[1] - 4.0 / denom).abs() < 1e-12);
        assert!((y[2] - 1.0 / denom).abs() < 1e-12);
    }

    fn stats_from(distances: &[f64]) -> LayerDistanceStats {
        LayerDistanceStats {
            layers: distances
                .iter()
                .map(|&d| LayerDistance {
                    mean_euclidean: d,
                    mean_cosine: 0.0,
                    sample_count: 1,
                })
                .collect(),
        }
    }

    #[test]
    fn selection_spreads_over_ties_before_reuse() {
        let stats = stats_from(&[5.0, 1.0, 1.0, 4.0]);
        let picks = select_source_layers(&stats, 3).unwrap();
        let sources: Vec<usize> = picks.iter().map(|&(s, _)| s).collect();
        assert_eq!(sources, [2, 1, 3]);
        for &(s, a) in &picks {
            assert_eq!(s, a, "duplicates insert after their source");
        }
    }

    #[test]
    fn selection_reuses_low_distance_layers_up_to_cap() {
        let stats = stats_from(&[1.0, 9.0]);
        let picks = select_source_layers(&stats, 3).unwrap();
        let sources: Vec<usize> = picks.iter().map(|&(s, _)| s).collect();
        assert_eq!(sources, [0, 0, 1]);
    }

    #[test]
    fn selection_cap_is_two_per_layer() {
        let stats = stats_from(&[1.0, 9.0]);
        assert!(matches!(
            select_source_layers(&stats, 5),
            Err(CoreError::Plan(_))
        ));
        let picks = select_source_layers(&stats, 4).unwrap();
        let sources: Vec<usize> = picks.iter().map(|&(s, _)| s).collect();
        assert_eq!(sources, [0, 0, 1, 1]);
    }

    #[test]
    fn selection_near_ties_prefer_later_layers() {
        // Distances within 1e-9 count as comparable.
        let stats = stats_from(&[1.0, 1.0 + 5e-10, 3.0]);
        let picks = select_source_layers(&stats, 2).unwrap();
        let sources: Vec<usize> = picks.iter().map(|&(s, _)| s).collect();
        assert_eq!(sources, [1, 0]);
    }
}

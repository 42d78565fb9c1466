//! Function-preservation and distance-selection checks for the growth
//! operators, including an independent straight-line forward oracle.

use flmgrow_core::checkpoint::Checkpoint;
use flmgrow_core::growth::{
    apply_plan, grow_depth, grow_width, layer_io_distance, select_source_layers,
    verify_function_preservation, DepthSources, GrowthPlan, LayerDistance, LayerDistanceStats,
    WidthInit,
};
use flmgrow_core::model::{forward_hiddens, forward_logits, ModelConfig, ParamRef};
use flmgrow_core::real::Real;
use flmgrow_core::rng::Rng;
use flmgrow_core::tensor::Tensor;
use flmgrow_core::train::{train_step_at, StepMetrics};
use flmgrow_core::optim::AdamHyper;

fn toy_config() -> ModelConfig {
    ModelConfig {
        layer_num: 4,
        head_num: 4,
        hidden_dim: 64,
        ffn_dim: 176,
        vocab_size: 258,
        kv_channels: 16,
        max_seq_len: 128,
        rope_base: 10000.0,
        input_mult: 1.0,
        output_mult: 3.125e-2,
    }
}

fn wider_config(base: &ModelConfig) -> ModelConfig {
    ModelConfig {
        head_num: 6,
        hidden_dim: 96,
        ffn_dim: 256,
        ..base.clone()
    }
}

fn width_plan(base: &ModelConfig) -> GrowthPlan {
    GrowthPlan {
        target: wider_config(base),
        width_init_std: 0.004,
        width_init: WidthInit::Normal,
        depth_sources: DepthSources::DistanceBased,
        transition_steps: 100,
        seed: 2024,
    }
}

fn probes(rng: &mut Rng, count: usize, len: usize, vocab: usize) -> Vec<Vec<u32>> {
    (0..count)
        .map(|_| (0..len).map(|_| rng.next_below(vocab as u64) as u32).collect())
        .collect()
}

fn warmed_checkpoint<R: Real>(seed: u64) -> Checkpoint<R> {
    // A few optimizer steps so moments are non-trivial before growth.
    let cfg = toy_config();
    let mut ckpt = Checkpoint::<R>::fresh(&cfg, seed).unwrap();
    let mut rng = Rng::new(seed ^ 0xbeef);
    for _ in 0..3 {
        let batch = probes(&mut rng, 2, 24, cfg.vocab_size);
        let _: StepMetrics =
            train_step_at(&mut ckpt, &batch, None, 1e-3, 8e-4, &AdamHyper::default()).unwrap();
    }
    ckpt
}

#[test]
fn width_growth_preserves_function_f64() {
    let ckpt = warmed_checkpoint::<f64>(11);
    let grown = grow_width(&ckpt, &width_plan(&ckpt.config)).unwrap();
    let mut rng = Rng::new(77);
    let report =
        verify_function_preservation(&ckpt, &grown, &probes(&mut rng, 16, 64, 258)).unwrap();
    assert!(
        report.max_abs_diff <= 1e-10,
        "max abs diff {}",
        report.max_abs_diff
    );
}

#[test]
fn width_growth_preserves_function_f32() {
    let ckpt = warmed_checkpoint::<f32>(12);
    let grown = grow_width(&ckpt, &width_plan(&ckpt.config)).unwrap();
    let mut rng = Rng::new(78);
    let report =
        verify_function_preservation(&ckpt, &grown, &probes(&mut rng, 16, 64, 258)).unwrap();
    assert!(
        report.max_abs_diff <= 1e-5,
        "max abs diff {}",
        report.max_abs_diff
    );
}

#[test]
fn width_growth_copies_old_blocks_bit_exactly_and_counts_match() {
    let ckpt = warmed_checkpoint::<f64>(13);
    let plan = width_plan(&ckpt.config);
    let grown = grow_width(&ckpt, &plan).unwrap();
    assert_eq!(grown.params.scalar_count(), plan.target.count_params());
    let (d0, f0) = (ckpt.config.hidden_dim, ckpt.config.ffn_dim);

    // Attention weights: old d0 x d0 block.
    let old = &ckpt.params.layers[1].attn_q;
    let new = &grown.params.layers[1].attn_q;
    for i in 0..d0 {
        for j in 0..d0 {
            assert_eq!(old.at2(i, j).to_bits(), new.at2(i, j).to_bits());
        }
    }
    // FFN down: old f0 x d0 block.
    let old = &ckpt.params.layers[2].ffn_down;
    let new = &grown.params.layers[2].ffn_down;
    for i in 0..f0 {
        for j in 0..d0 {
            assert_eq!(old.at2(i, j).to_bits(), new.at2(i, j).to_bits());
        }
    }
    // Embedding: all vocab rows, first d0 columns.
    for r in 0..ckpt.config.vocab_size {
        for j in 0..d0 {
            assert_eq!(
                ckpt.params.embedding.at2(r, j).to_bits(),
                grown.params.embedding.at2(r, j).to_bits()
            );
        }
    }
    // New norm-gain entries are exactly one.
    for l in &grown.params.layers {
        assert!(l.norm_attn_gain.data()[d0..].iter().all(|&v| v == 1.0));
    }
    // State records the boundaries.
    let state = grown.mask_state.as_ref().unwrap();
    assert_eq!(state.mask, 0.0);
    assert_eq!(state.hidden_old, d0);
    assert!(state.ffn_old.iter().all(|&f| f == f0));
    assert!(state.new_layer_ids.is_empty());
}

#[test]
fn width_growth_carries_old_moments_and_zeroes_new() {
    let ckpt = warmed_checkpoint::<f64>(14);
    let grown = grow_width(&ckpt, &width_plan(&ckpt.config)).unwrap();
    let refs_old = ParamRef::enumerate(ckpt.config.layer_num);
    let (d0, _f0) = (ckpt.config.hidden_dim, ckpt.config.ffn_dim);
    // Spot-check a matrix moment: old block bits carried, new entries zero.
    let idx = refs_old
        .iter()
        .position(|r| *r == ParamRef::Layer(0, flmgrow_core::model::LayerSlot::AttnV))
        .unwrap();
    let (old_m, new_m) = (&ckpt.opt.m[idx], &grown.opt.m[idx]);
    assert!(old_m.data().iter().any(|&v| v != 0.0), "warmup left moments zero");
    for i in 0..d0 {
        for j in 0..d0 {
            assert_eq!(old_m.at2(i, j).to_bits(), new_m.at2(i, j).to_bits());
        }
    }
    for i in 0..new_m.rows() {
        for j in 0..new_m.cols() {
            if i >= d0 || j >= d0 {
                assert_eq!(new_m.at2(i, j), 0.0);
            }
        }
    }
    assert_eq!(grown.opt.step, ckpt.opt.step);
}

#[test]
fn width_growth_rejects_bad_plans() {
    let ckpt = warmed_checkpoint::<f64>(15);
    // Shrinking.
    let mut plan = width_plan(&ckpt.config);
    plan.target.hidden_dim = 48;
    plan.target.head_num = 3;
    assert!(grow_width(&ckpt, &plan).is_err());
    // Divisibility.
    let mut plan = width_plan(&ckpt.config);
    plan.target.hidden_dim = 100;
    assert!(grow_width(&ckpt, &plan).is_err());
    // No-op.
    let mut plan = width_plan(&ckpt.config);
    plan.target = ckpt.config.clone();
    assert!(grow_width(&ckpt, &plan).is_err());
    // Changing the output multiplier would change the function.
    let mut plan = width_plan(&ckpt.config);
    plan.target.output_mult = 2.5e-2;
    assert!(grow_width(&ckpt, &plan).is_err());
}

#[test]
fn depth_growth_preserves_function_both_dtypes() {
    let mut rng = Rng::new(91);
    let probe_batch = probes(&mut rng, 8, 48, 258);
    let check_probes = probes(&mut rng, 16, 64, 258);

    let ckpt64 = warmed_checkpoint::<f64>(16);
    let plan = GrowthPlan {
        target: ModelConfig {
            layer_num: 6,
            ..ckpt64.config.clone()
        },
        width_init_std: 0.004,
        width_init: WidthInit::Normal,
        depth_sources: DepthSources::DistanceBased,
        transition_steps: 100,
        seed: 3030,
    };
    let outcome = apply_plan(&ckpt64, &plan, Some(&probe_batch)).unwrap();
    let grown = outcome.checkpoint;
    let selection = outcome.depth_selection.unwrap();
    assert_eq!(selection.len(), 2);
    let report = verify_function_preservation(&ckpt64, &grown, &check_probes).unwrap();
    assert!(report.max_abs_diff <= 1e-10, "f64 {}", report.max_abs_diff);
    assert_eq!(grown.config.layer_num, 6);
    assert_eq!(grown.mask_state.as_ref().unwrap().new_layer_ids.len(), 2);

    // Inserted copies are bit-identical to their sources at creation.
    // Reconstruct the origin map the same way grow_depth does.
    let mut copies_after = vec![0usize; ckpt64.config.layer_num];
    for &(s, a) in &selection {
        assert_eq!(s, a);
        copies_after[a] += 1;
    }
    let mut new_idx = 0;
    for (l, &n_copies) in copies_after.iter().enumerate() {
        assert!(grown.params.layers[new_idx]
            .attn_q
            .bit_identical(&ckpt64.params.layers[l].attn_q));
        new_idx += 1;
        for _ in 0..n_copies {
            assert!(grown.params.layers[new_idx]
                .attn_q
                .bit_identical(&ckpt64.params.layers[l].attn_q));
            assert!(grown.params.layers[new_idx]
                .ffn_down
                .bit_identical(&ckpt64.params.layers[l].ffn_down));
            new_idx += 1;
        }
    }

    let ckpt32 = warmed_checkpoint::<f32>(17);
    let outcome = apply_plan(&ckpt32, &plan, Some(&probe_batch)).unwrap();
    let report =
        verify_function_preservation(&ckpt32, &outcome.checkpoint, &check_probes).unwrap();
    assert!(report.max_abs_diff <= 1e-5, "f32 {}", report.max_abs_diff);
}

#[test]
fn combined_width_and_depth_plan_preserves_in_one_event() {
    let ckpt = warmed_checkpoint::<f64>(18);
    let mut target = wider_config(&ckpt.config);
    target.layer_num = 5;
    let plan = GrowthPlan {
        target,
        width_init_std: 0.004,
        width_init: WidthInit::Normal,
        depth_sources: DepthSources::DistanceBased,
        transition_steps: 100,
        seed: 4040,
    };
    let mut rng = Rng::new(92);
    let probe_batch = probes(&mut rng, 6, 32, 258);
    let outcome = apply_plan(&ckpt, &plan, Some(&probe_batch)).unwrap();
    let grown = outcome.checkpoint;
    assert_eq!(grown.config.layer_num, 5);
    assert_eq!(grown.config.hidden_dim, 96);
    let state = grown.mask_state.as_ref().unwrap();
    assert_eq!(state.hidden_old, 64);
    assert_eq!(state.new_layer_ids.len(), 1);
    let report =
        verify_function_preservation(&ckpt, &grown, &probes(&mut rng, 12, 64, 258)).unwrap();
    assert!(report.max_abs_diff <= 1e-10, "{}", report.max_abs_diff);
    // One event, one history entry, even for a combined width+depth plan.
    assert_eq!(grown.growth_history.len(), 1);
    assert_eq!(grown.growth_history[0], plan);
}

#[test]
fn composition_width_then_depth_preserves_after_transition() {
    let base = warmed_checkpoint::<f64>(19);
    let mut rng = Rng::new(93);
    let check = probes(&mut rng, 8, 40, 258);

    let widened = grow_width(&base, &width_plan(&base.config)).unwrap();
    let report = verify_function_preservation(&base, &widened, &check).unwrap();
    assert!(report.max_abs_diff <= 1e-10);

    // Transition completes; the widened model is now the reference.
    let mut settled = widened.clone();
    settled.mask_state.as_mut().unwrap().mask = 1.0;
    settled.step += 500;

    let plan = GrowthPlan {
        target: ModelConfig {
            layer_num: 6,
            ..settled.config.clone()
        },
        width_init_std: 0.004,
        width_init: WidthInit::Normal,
        depth_sources: DepthSources::DistanceBased,
        transition_steps: 100,
        seed: 5050,
    };
    let probe_batch = probes(&mut rng, 6, 32, 258);
    let outcome = apply_plan(&settled, &plan, Some(&probe_batch)).unwrap();
    let report = verify_function_preservation(&settled, &outcome.checkpoint, &check).unwrap();
    assert!(report.max_abs_diff <= 1e-10, "{}", report.max_abs_diff);
}

#[test]
fn mid_transition_growth_is_rejected() {
    let base = warmed_checkpoint::<f64>(20);
    let mut widened = grow_width(&base, &width_plan(&base.config)).unwrap();
    widened.mask_state.as_mut().unwrap().mask = 0.5;
    widened.step += 50;
    let plan = GrowthPlan {
        target: ModelConfig {
            layer_num: 6,
            ..widened.config.clone()
        },
        width_init_std: 0.004,
        width_init: WidthInit::Normal,
        depth_sources: DepthSources::Explicit(vec![(1, 1), (2, 2)]),
        transition_steps: 100,
        seed: 6060,
    };
    assert!(grow_depth(&widened, &plan, &[(1, 1), (2, 2)]).is_err());
}

#[test]
fn mask_one_forward_is_bit_identical_to_plain_forward() {
    let ckpt = warmed_checkpoint::<f64>(21);
    let mut grown = grow_width(&ckpt, &width_plan(&ckpt.config)).unwrap();
    grown.mask_state.as_mut().unwrap().mask = 1.0;
    let mut rng = Rng::new(94);
    for tokens in probes(&mut rng, 4, 32, 258) {
        let masked = forward_logits(
            &grown.params,
            &grown.config,
            &tokens,
            grown.mask_state.as_ref(),
        )
        .unwrap();
        let plain = forward_logits(&grown.params, &grown.config, &tokens, None).unwrap();
        assert!(masked.bit_identical(&plain));
    }
}

#[test]
fn logits_are_continuous_in_the_mask() {
    // Monitored, not asserted to a constant: the sweep must stay finite
    // and move smoothly between the two endpoints.
    let ckpt = warmed_checkpoint::<f64>(22);
    let mut grown = grow_width(&ckpt, &width_plan(&ckpt.config)).unwrap();
    let tokens: Vec<u32> = (0..24).map(|i| (i * 11 % 258) as u32).collect();
    let mut previous: Option<Tensor<f64>> = None;
    let mut deltas = Vec::new();
    for mask in [0.0, 0.25, 0.5, 0.75, 1.0] {
        grown.mask_state.as_mut().unwrap().mask = mask;
        let logits = forward_logits(
            &grown.params,
            &grown.config,
            &tokens,
            grown.mask_state.as_ref(),
        )
        .unwrap();
        assert!(logits.all_finite());
        if let Some(prev) = &previous {
            deltas.push(logits.max_abs_diff(prev).unwrap());
        }
        previous = Some(logits);
    }
    println!("mask sweep max-abs deltas per 0.25: {deltas:?}");
    let max_delta = deltas.iter().cloned().fold(0.0f64, f64::max);
    let min_delta = deltas.iter().cloned().fold(f64::INFINITY, f64::min);
    assert!(max_delta.is_finite());
    // No cliff: adjacent quarter-steps stay within two decades of each
    // other, which a discontinuity would break.
    assert!(
        max_delta < min_delta.max(1e-12) * 100.0,
        "suspicious jump in mask sweep: {deltas:?}"
    );
}

#[test]
fn masked_forward_gradients_match_finite_differences_mid_transition() {
    // Training continues while the mask integrates, so the backward pass
    // through every masked structure has to be right at 0 < mask < 1.
    let small = ModelConfig {
        layer_num: 2,
        head_num: 2,
        hidden_dim: 32,
        ffn_dim: 40,
        vocab_size: 40,
        kv_channels: 16,
        max_seq_len: 16,
        rope_base: 10000.0,
        input_mult: 1.0,
        output_mult: 0.5,
    };
    let base = Checkpoint::<f64>::fresh(&small, 24).unwrap();
    let plan = GrowthPlan {
        target: ModelConfig {
            hidden_dim: 48,
            head_num: 3,
            ffn_dim: 56,
            layer_num: 3,
            ..small.clone()
        },
        width_init_std: 0.02,
        width_init: WidthInit::Normal,
        depth_sources: DepthSources::Explicit(vec![(0, 0)]),
        transition_steps: 100,
        seed: 777,
    };
    let mut grown = apply_plan(&base, &plan, None).unwrap().checkpoint;
    grown.mask_state.as_mut().unwrap().mask = 0.37;

    let tokens: Vec<u32> = (0..6).map(|i| (i * 7 % 40) as u32).collect();
    let mut tape = flmgrow_core::tape::Tape::new();
    let vars = flmgrow_core::model::register_params(&mut tape, &grown.params);
    let (nll, count) = flmgrow_core::model::build_sum_nll(
        &mut tape,
        &vars,
        &grown.config,
        &tokens,
        None,
        grown.mask_state.as_ref(),
    )
    .unwrap();
    let grads = tape.backward(nll).unwrap();
    let scale = 1.0 / count as f64;

    let eval = |p: &flmgrow_core::model::ModelParams<f64>| {
        flmgrow_core::model::lm_loss(p, &grown.config, &tokens, None, grown.mask_state.as_ref())
            .unwrap()
    };
    let h = 1e-5;
    // Cover each masked structure: embedding new cols, a new-head slice of
    // attn_v, new FFN units, the duplicated layer, and the final norm.
    let checks = [
        (ParamRef::Embedding, vars.embedding),
        (ParamRef::Layer(1, flmgrow_core::model::LayerSlot::AttnV), vars.layers[1].attn_v),
        (ParamRef::Layer(1, flmgrow_core::model::LayerSlot::AttnO), vars.layers[1].attn_o),
        (ParamRef::Layer(2, flmgrow_core::model::LayerSlot::FfnGate), vars.layers[2].ffn_gate),
        (ParamRef::Layer(2, flmgrow_core::model::LayerSlot::FfnDown), vars.layers[2].ffn_down),
        (ParamRef::Layer(1, flmgrow_core::model::LayerSlot::NormAttnGain), vars.layers[1].norm_attn_gain),
        (ParamRef::FinalLnGain, vars.final_ln_gain),
        (ParamRef::FinalLnBias, vars.final_ln_bias),
        (ParamRef::LmHead, vars.lm_head),
    ];
    for (r, var) in checks {
        let auto = grads.get(var).unwrap();
        let n = grown.params.get(r).len();
        for e in (0..n).step_by((n / 10).max(1)) {
            let mut plus = grown.params.clone();
            plus.get_mut(r).data_mut()[e] += h;
            let mut minus = grown.params.clone();
            minus.get_mut(r).data_mut()[e] -= h;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let ad = auto.data()[e] * scale;
            let rel = (ad - fd).abs() / fd.abs().max(ad.abs()).max(1e-6);
            assert!(
                rel < 1e-4,
                "{} elem {e} at mask 0.37: {ad} vs {fd} (rel {rel})",
                r.path()
            );
        }
    }
}

#[test]
fn verify_reports_zero_for_self_and_catches_bypassed_mask() {
    let ckpt = warmed_checkpoint::<f64>(23);
    let grown = grow_width(&ckpt, &width_plan(&ckpt.config)).unwrap();
    let mut rng = Rng::new(95);
    let ps = probes(&mut rng, 6, 32, 258);

    // Self-check: identical checkpoints differ by exactly zero.
    let zero = verify_function_preservation(&grown, &grown, &ps).unwrap();
    assert_eq!(zero.max_abs_diff, 0.0);
    assert_eq!(zero.max_rel_diff, 0.0);

    // Fault injection: pretend layer 0's FFN gained no new units, which
    // un-masks its freshly initialized intermediate columns.
    let mut bypassed = grown.clone();
    bypassed.mask_state.as_mut().unwrap().ffn_old[0] = bypassed.config.ffn_dim;
    let report = verify_function_preservation(&ckpt, &bypassed, &ps).unwrap();
    assert!(
        report.max_abs_diff > 1e-10,
        "bypassed mask must show up, got {}",
        report.max_abs_diff
    );
}

#[test]
fn distance_stats_match_instrumented_oracle() {
    // Straight-line reimplementation of the unmasked forward that dumps
    // hidden states, with its own norm/attention arithmetic.
    let cfg = ModelConfig {
        layer_num: 2,
        head_num: 2,
        hidden_dim: 32,
        ffn_dim: 44,
        vocab_size: 64,
        kv_channels: 16,
        max_seq_len: 32,
        rope_base: 10000.0,
        input_mult: 1.0,
        output_mult: 1.0,
    };
    let ckpt = Checkpoint::<f64>::fresh(&cfg, 31).unwrap();
    let mut rng = Rng::new(96);
    let batch = probes(&mut rng, 3, 12, cfg.vocab_size);

    let stats = layer_io_distance(&ckpt, &batch).unwrap();

    // Oracle pass.
    let mut euclid = vec![0.0f64; cfg.layer_num];
    let mut cosine = vec![0.0f64; cfg.layer_num];
    let mut count = 0usize;
    for tokens in &batch {
        let boundaries = oracle_forward_hiddens(&ckpt, tokens);
        for l in 0..cfg.layer_num {
            let (a, b) = (&boundaries[l], &boundaries[l + 1]);
            for r in 0..a.rows() {
                let (x, y) = (a.row(r), b.row(r));
                let d2: f64 = x.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum();
                euclid[l] += d2.sqrt();
                let dot: f64 = x.iter().zip(y).map(|(p, q)| p * q).sum();
                let nx: f64 = x.iter().map(|p| p * p).sum::<f64>().sqrt();
                let ny: f64 = y.iter().map(|p| p * p).sum::<f64>().sqrt();
                if d2 > 0.0 && nx > 0.0 && ny > 0.0 {
                    cosine[l] += (1.0 - dot / (nx * ny)).clamp(0.0, 2.0);
                }
            }
        }
        count += tokens.len();
    }
    for l in 0..cfg.layer_num {
        let e = euclid[l] / count as f64;
        let c = cosine[l] / count as f64;
        assert!(
            (stats.layers[l].mean_euclidean - e).abs() <= 1e-10,
            "layer {l} euclid {} vs oracle {e}",
            stats.layers[l].mean_euclidean
        );
        assert!(
            (stats.layers[l].mean_cosine - c).abs() <= 1e-10,
            "layer {l} cosine {} vs oracle {c}",
            stats.layers[l].mean_cosine
        );
        assert_eq!(stats.layers[l].sample_count, count);
    }
}

#[test]
fn identity_layer_has_zero_distances() {
    let cfg = ModelConfig {
        layer_num: 2,
        head_num: 2,
        hidden_dim: 32,
        ffn_dim: 44,
        vocab_size: 64,
        kv_channels: 16,
        max_seq_len: 32,
        rope_base: 10000.0,
        input_mult: 1.0,
        output_mult: 1.0,
    };
    let mut ckpt = Checkpoint::<f64>::fresh(&cfg, 32).unwrap();
    // Zero layer 1's projections into the residual stream.
    ckpt.params.layers[1].attn_o = Tensor::zeros(ckpt.params.layers[1].attn_o.shape());
    ckpt.params.layers[1].ffn_down = Tensor::zeros(ckpt.params.layers[1].ffn_down.shape());
    let mut rng = Rng::new(97);
    let stats = layer_io_distance(&ckpt, &probes(&mut rng, 2, 10, cfg.vocab_size)).unwrap();
    assert_eq!(stats.layers[1].mean_euclidean, 0.0);
    assert_eq!(stats.layers[1].mean_cosine, 0.0);
    assert!(stats.layers[0].mean_euclidean > 0.0);
    for l in &stats.layers {
        assert!(l.mean_euclidean >= 0.0 && l.mean_cosine >= 0.0);
    }
}

#[test]
fn selection_matches_rule_oracle_on_randomized_vectors() {
    // Smaller sibling of the acceptance sweep: 200 randomized vectors,
    // exact ties and cap saturation included.
    let mut rng = Rng::new(98);
    for round in 0..200 {
        let layers = 1 + (rng.next_u64() % 8) as usize;
        let values: Vec<f64> = (0..layers)
            .map(|_| {
                // Coarse grid forces frequent exact ties; jitters land both
                // inside and outside the comparability window.
                let jitter = match rng.next_u64() % 4 {
                    0 => 5e-10,
                    1 => 2e-9,
                    _ => 0.0,
                };
                (rng.next_u64() % 5) as f64 + jitter
            })
            .collect();
        let stats = LayerDistanceStats {
            layers: values
                .iter()
                .map(|&v| LayerDistance {
                    mean_euclidean: v,
                    mean_cosine: 0.0,
                    sample_count: 1,
                })
                .collect(),
        };
        let n_new = 1 + (rng.next_u64() % (2 * layers as u64)) as usize;
        let got = select_source_layers(&stats, n_new).unwrap();
        let expect = selection_oracle(&values, n_new);
        assert_eq!(
            got, expect,
            "round {round}: distances {values:?}, n_new {n_new}"
        );
    }
}

/// Brute-force restatement of the selection rules, structured differently
/// from the implementation: repeated linear scans instead of a sort.
/// Rule (1): smallest distance first. Rule (2): distances within 1e-9 of
/// the current minimum are comparable and the latest layer wins. Rule (3):
/// at most two copies per layer, and no layer doubles up while another
/// comparable-or-worse layer is still unused.
fn selection_oracle(distances: &[f64], n_new: usize) -> Vec<(usize, usize)> {
    let l = distances.len();
    // Priority order: repeatedly take the whole comparable group at the
    // current minimum, latest layers first.
    let mut remaining: Vec<usize> = (0..l).collect();
    let mut priority = Vec::new();
    while !remaining.is_empty() {
        let min = remaining
            .iter()
            .map(|&i| distances[i])
            .fold(f64::INFINITY, f64::min);
        let mut group: Vec<usize> = remaining
            .iter()
            .copied()
            .filter(|&i| distances[i] - min <= 1e-9)
            .collect();
        group.sort_by(|a, b| b.cmp(a));
        remaining.retain(|i| !group.contains(i));
        priority.extend(group);
    }
    // Spread-then-reuse allocation with the cap of 2.
    let mut counts = vec![0usize; l];
    let mut left = n_new;
    'outer: for round in 0..2 {
        for &p in &priority {
            if left == 0 {
                break 'outer;
            }
            if counts[p] == round {
                counts[p] += 1;
                left -= 1;
            }
        }
    }
    assert_eq!(left, 0, "oracle could not place all duplicates");
    let mut out = Vec::new();
    for &p in &priority {
        for _ in 0..counts[p] {
            out.push((p, p));
        }
    }
    out
}

/// Independent unmasked forward that records layer-boundary hidden
/// states. Deliberately written as plain loops over rows and heads.
fn oracle_forward_hiddens(ckpt: &Checkpoint<f64>, tokens: &[u32]) -> Vec<Tensor<f64>> {
    let cfg = &ckpt.config;
    let p = &ckpt.params;
    let (seq, d, kvc) = (tokens.len(), cfg.hidden_dim, cfg.kv_channels);
    let mut h = Tensor::zeros(&[seq, d]);
    for (r, &t) in tokens.iter().enumerate() {
        for c in 0..d {
            h.set2(r, c, p.embedding.at2(t as usize, c) * cfg.input_mult);
        }
    }
    let rms = |row: &[f64], gain: &Tensor<f64>| -> Vec<f64> {
        let ms: f64 = row.iter().map(|v| v * v).sum::<f64>() / row.len() as f64;
        let denom = (ms + 1e-6).sqrt();
        row.iter()
            .zip(gain.data())
            .map(|(v, g)| g * v / denom)
            .collect()
    };
    let mut out = vec![h.clone()];
    for layer in &p.layers {
        // Attention.
        let mut xn = Tensor::zeros(&[seq, d]);
        for r in 0..seq {
            let n = rms(h.row(r), &layer.norm_attn_gain);
            xn.row_mut(r).copy_from_slice(&n);
        }
        let q = xn.matmul(&layer.attn_q).unwrap();
        let k = xn.matmul(&layer.attn_k).unwrap();
        let v = xn.matmul(&layer.attn_v).unwrap();
        let rotate = |m: &Tensor<f64>| -> Tensor<f64> {
            let mut out = m.clone();
            for r in 0..seq {
                for head in 0..cfg.head_num {
                    for i in 0..kvc / 2 {
                        let theta = r as f64
                            * libm::pow(cfg.rope_base, -2.0 * i as f64 / kvc as f64);
                        let (c, s) = (theta.cos(), theta.sin());
                        let (ia, ib) = (head * kvc + 2 * i, head * kvc + 2 * i + 1);
                        let (a, b) = (m.at2(r, ia), m.at2(r, ib));
                        out.set2(r, ia, a * c - b * s);
                        out.set2(r, ib, a * s + b * c);
                    }
                }
            }
            out
        };
        let (q, k) = (rotate(&q), rotate(&k));
        let mut merged = Tensor::zeros(&[seq, d]);
        for head in 0..cfg.head_num {
            let base = head * kvc;
            for i in 0..seq {
                // Scores over the causal prefix.
                let mut scores = Vec::with_capacity(i + 1);
                for j in 0..=i {
                    let mut dot = 0.0;
                    for c in 0..kvc {
                        dot += q.at2(i, base + c) * k.at2(j, base + c);
                    }
                    scores.push(dot / (kvc as f64).sqrt());
                }
                let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
                let sum: f64 = exps.iter().sum();
                for e in &mut exps {
                    *e /= sum;
                }
                for c in 0..kvc {
                    let mut acc = 0.0;
                    for (j, &p) in exps.iter().enumerate() {
                        acc += p * v.at2(j, base + c);
                    }
                    merged.set2(i, base + c, acc);
                }
            }
        }
        let o = merged.matmul(&layer.attn_o).unwrap();
        for r in 0..seq {
            for c in 0..d {
                h.set2(r, c, h.at2(r, c) + o.at2(r, c));
            }
        }
        // FFN.
        let mut xn = Tensor::zeros(&[seq, d]);
        for r in 0..seq {
            let n = rms(h.row(r), &layer.norm_ffn_gain);
            xn.row_mut(r).copy_from_slice(&n);
        }
        let gate = xn.matmul(&layer.ffn_gate).unwrap();
        let up = xn.matmul(&layer.ffn_up).unwrap();
        let mut inter = Tensor::zeros(&[seq, cfg.ffn_dim]);
        for r in 0..seq {
            for c in 0..cfg.ffn_dim {
                let g = gate.at2(r, c);
                let silu = g / (1.0 + (-g).exp());
                inter.set2(r, c, silu * up.at2(r, c));
            }
        }
        let down = inter.matmul(&layer.ffn_down).unwrap();
        for r in 0..seq {
            for c in 0..d {
                h.set2(r, c, h.at2(r, c) + down.at2(r, c));
            }
        }
        out.push(h.clone());
    }
    // Sanity: the instrumented production forward agrees boundary-wise.
    let direct = forward_hiddens(p, cfg, tokens, None).unwrap();
    assert_eq!(direct.len(), out.len());
    for (a, b) in direct.iter().zip(out.iter()) {
        assert!(a.max_abs_diff(b).unwrap() <= 1e-10);
    }
    out
}

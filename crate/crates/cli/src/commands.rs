//! Command implementations shared by the binary and the test suites.

use std::path::{Path, PathBuf};

use flmgrow_core::checkpoint::Checkpoint;
use flmgrow_core::curation::{filter_with_scores, score_sample, InstructSample, SampleScore};
use flmgrow_core::growth::{
    apply_plan, layer_io_distance, verify_function_preservation, GrowthPlan, LayerDistanceStats,
    PreservationReport,
};
use flmgrow_core::optim::AdamHyper;
use flmgrow_core::real::Real;
use flmgrow_core::rng::Rng;
use flmgrow_core::train::SftPreset;

use crate::ckptio::{self, AnyCheckpoint, Dtype};
use crate::corpus::Corpus;
use crate::error::{AppError, Result};
use crate::parallel::{ordered_map, thread_count};
use crate::presets::RunConfig;
use crate::runner::{self, RunOptions, SftReport, StopRule};
use crate::with_checkpoint;

/// Seeded random probe sequences within the model's vocabulary.
pub fn make_probes(seed: u64, count: usize, len: usize, vocab: usize) -> Vec<Vec<u32>> {
    let mut rng = Rng::new(seed);
    (0..count)
        .map(|_| (0..len).map(|_| rng.next_below(vocab as u64) as u32).collect())
        .collect()
}

/// `init`: fresh checkpoint (or a dry-run parameter count).
pub fn cmd_init(config: &RunConfig, out: Option<&Path>, dry_run: bool) -> Result<u64> {
    config.validate()?;
    let count = config.model.count_params();
    println!("count_params={count}");
    if dry_run {
        return Ok(count);
    }
    let out = out.ok_or_else(|| AppError::Validation("--out required unless --dry-run".into()))?;
    match config.dtype {
        Dtype::F32 => {
            let ckpt = Checkpoint::<f32>::fresh(&config.model, config.seed)?;
            debug_assert_eq!(ckpt.params.scalar_count(), count);
            ckptio::save(&ckpt, out)?;
        }
        Dtype::F64 => {
            let ckpt = Checkpoint::<f64>::fresh(&config.model, config.seed)?;
            debug_assert_eq!(ckpt.params.scalar_count(), count);
            ckptio::save(&ckpt, out)?;
        }
    }
    println!("checkpoint={}", out.display());
    Ok(count)
}

/// `train`: load, run, save; returns executed steps.
pub fn cmd_train(
    ckpt_dir: &Path,
    config: &RunConfig,
    stop: StopRule,
    snapshot_every: Option<u64>,
    out_dir: &Path,
) -> Result<u64> {
    config.validate()?;
    let corpus_path = config
        .corpus
        .as_ref()
        .ok_or_else(|| AppError::Validation("no corpus path configured".into()))?;
    let corpus = Corpus::load(corpus_path, config.schedule.seq_len)?;
    let mut any = ckptio::load(ckpt_dir)?;
    let opts = RunOptions {
        stop,
        snapshot_every,
        out_dir: out_dir.to_path_buf(),
    };
    let hyper = AdamHyper::default();
    let steps = with_checkpoint!(&mut any, |c| {
        runner::train_run(c, &corpus, &config.schedule, &hyper, &opts)?.len()
    });
    println!("steps={steps}");
    println!("checkpoint={}", ckptio::checkpoint_dir(out_dir).display());
    Ok(steps as u64)
}

/// Outcome of `grow` for logging.
pub struct GrowSummary {
    pub selection: Option<Vec<(usize, usize)>>,
    pub stats: Option<LayerDistanceStats>,
}

/// `grow`: apply a plan (width, depth, or both) and save the result.
pub fn cmd_grow(
    ckpt_dir: &Path,
    plan: &GrowthPlan,
    out: &Path,
    probe_count: usize,
    probe_len: usize,
) -> Result<GrowSummary> {
    let any = ckptio::load(ckpt_dir)?;
    let probes = make_probes(
        plan.seed ^ 0x50_524f_4245_u64,
        probe_count,
        probe_len.min(any.config().max_seq_len),
        any.config().vocab_size,
    );
    let summary = with_checkpoint!(&any, |c| {
        let outcome = apply_plan(c, plan, Some(&probes)).map_err(AppError::from)?;
        ckptio::save(&outcome.checkpoint, out)?;
        println!(
            "grown: layers={} hidden={} ffn={} mask=0 history={}",
            outcome.checkpoint.config.layer_num,
            outcome.checkpoint.config.hidden_dim,
            outcome.checkpoint.config.ffn_dim,
            outcome.checkpoint.growth_history.len(),
        );
        if let (Some(sel), Some(stats)) = (&outcome.depth_selection, &outcome.stats) {
            for &(src, after) in sel {
                println!(
                    "depth-source: layer={src} insert_after={after} mean_euclidean={}",
                    stats.layers[src].mean_euclidean
                );
            }
        }
        GrowSummary {
            selection: outcome.depth_selection,
            stats: outcome.stats,
        }
    });
    println!("checkpoint={}", out.display());
    Ok(summary)
}

/// Dtype-tier tolerance for `verify`.
pub fn verify_tolerance(dtype: Dtype) -> f64 {
    match dtype {
        Dtype::F32 => 1e-5,
        Dtype::F64 => 1e-10,
    }
}

/// `verify`: compare pre/post on probes; Ok(report) means within the
/// dtype-tier tolerance, Err(Numerical) means the gate failed.
pub fn cmd_verify(
    pre_dir: &Path,
    post_dir: &Path,
    probe_count: usize,
    probe_len: usize,
    probe_seed: u64,
    report_out: Option<&Path>,
) -> Result<PreservationReport> {
    let pre = ckptio::load(pre_dir)?;
    let post = ckptio::load(post_dir)?;
    if pre.dtype() != post.dtype() {
        return Err(AppError::Validation(format!(
            "dtype mismatch: pre {} vs post {}",
            pre.dtype(),
            post.dtype()
        )));
    }
    let probes = make_probes(
        probe_seed,
        probe_count,
        probe_len.min(pre.config().max_seq_len),
        pre.config().vocab_size,
    );
    let report = verify_pair(&pre, &post, &probes)?;
    println!(
        "max_abs_diff={:e} max_rel_diff={:e} probes={}",
        report.max_abs_diff, report.max_rel_diff, report.probes
    );
    if let Some(path) = report_out {
        let mut json = serde_json::to_vec_pretty(&report)?;
        json.push(b'\n');
        std::fs::write(path, json)?;
    }
    let tol = verify_tolerance(pre.dtype());
    if report.max_abs_diff <= tol {
        println!("preservation=ok tolerance={tol:e}");
        Ok(report)
    } else {
        Err(AppError::Numerical(format!(
            "function changed at growth: max_abs_diff {:e} exceeds {tol:e}",
            report.max_abs_diff
        )))
    }
}

/// Probe-parallel preservation check; per-probe maxima merge by `max`, so
/// any thread count gives identical results.
pub fn verify_pair(
    pre: &AnyCheckpoint,
    post: &AnyCheckpoint,
    probes: &[Vec<u32>],
) -> Result<PreservationReport> {
    fn run<R: Real>(
        pre: &Checkpoint<R>,
        post: &Checkpoint<R>,
        probes: &[Vec<u32>],
    ) -> Result<PreservationReport> {
        let threads = thread_count();
        let singles: Vec<Vec<u32>> = probes.to_vec();
        let per_probe: Vec<flmgrow_core::error::Result<PreservationReport>> =
            ordered_map(&singles, threads, |p| {
                verify_function_preservation(pre, post, std::slice::from_ref(p))
            });
        let mut merged = PreservationReport {
            max_abs_diff: 0.0,
            max_rel_diff: 0.0,
            probes: probes.len(),
        };
        for r in per_probe {
            let r = r.map_err(AppError::from)?;
            merged.max_abs_diff = merged.max_abs_diff.max(r.max_abs_diff);
            merged.max_rel_diff = merged.max_rel_diff.max(r.max_rel_diff);
        }
        Ok(merged)
    }
    match (pre, post) {
        (AnyCheckpoint::F32(a), AnyCheckpoint::F32(b)) => run(a, b, probes),
        (AnyCheckpoint::F64(a), AnyCheckpoint::F64(b)) => run(a, b, probes),
        _ => Err(AppError::Validation("dtype mismatch".into())),
    }
}

/// `distances`: per-layer input/output distance stats over seeded probes.
pub fn cmd_distances(
    ckpt_dir: &Path,
    probe_count: usize,
    probe_len: usize,
    probe_seed: u64,
    out: Option<&Path>,
) -> Result<LayerDistanceStats> {
    let any = ckptio::load(ckpt_dir)?;
    let probes = make_probes(
        probe_seed,
        probe_count,
        probe_len.min(any.config().max_seq_len),
        any.config().vocab_size,
    );
    let stats = with_checkpoint!(&any, |c| layer_io_distance(c, &probes).map_err(AppError::from)?);
    for (l, d) in stats.layers.iter().enumerate() {
        println!(
            "layer={l} mean_euclidean={} mean_cosine={} samples={}",
            d.mean_euclidean, d.mean_cosine, d.sample_count
        );
    }
    if let Some(path) = out {
        let mut json = serde_json::to_vec_pretty(&stats)?;
        json.push(b'\n');
        std::fs::write(path, json)?;
    }
    Ok(stats)
}

/// `curate`: keep the lowest-perplexity fraction; writes the kept samples
/// and a JSON report. Scoring is read-only and parallel over samples.
pub fn cmd_curate(
    samples_path: &Path,
    ckpt_dir: &Path,
    fraction: f64,
    out: &Path,
    report_out: Option<&Path>,
) -> Result<(usize, usize)> {
    let samples = crate::samples::read_samples(samples_path)?;
    let any = ckptio::load(ckpt_dir)?;
    let (kept, report) = with_checkpoint!(&any, |c| {
        let scores: Vec<flmgrow_core::error::Result<SampleScore>> =
            ordered_map(&samples, thread_count(), |s| score_sample(c, s));
        let scores: flmgrow_core::error::Result<Vec<SampleScore>> = scores.into_iter().collect();
        filter_with_scores(&samples, &scores.map_err(AppError::from)?, fraction)
            .map_err(AppError::from)?
    });
    crate::samples::write_samples(out, &kept)?;
    let report_path = report_out
        .map(PathBuf::from)
        .unwrap_or_else(|| out.with_extension("report.json"));
    let mut json = serde_json::to_vec_pretty(&report)?;
    json.push(b'\n');
    std::fs::write(&report_path, json)?;
    println!(
        "total={} kept={} skipped={} report={}",
        report.total,
        report.kept,
        report.skipped.len(),
        report_path.display()
    );
    Ok((report.total, report.kept))
}

/// `sft`: epoch-based fine-tuning with the published defaults.
pub fn cmd_sft(
    ckpt_dir: &Path,
    samples_path: &Path,
    preset: &SftPreset,
    out_dir: &Path,
) -> Result<SftReport> {
    let samples: Vec<InstructSample> = crate::samples::read_samples(samples_path)?;
    let mut any = ckptio::load(ckpt_dir)?;
    let hyper = AdamHyper::default();
    let report = with_checkpoint!(&mut any, |c| {
        runner::sft_run(c, &samples, preset, &hyper, out_dir)?
    });
    println!(
        "eligible={} steps={} skipped={}",
        report.eligible,
        report.steps,
        report.skipped.len()
    );
    Ok(report)
}

/// `report`: merge metrics logs (and optional distance JSONs) into one
/// plotting-ready JSON document.
pub fn cmd_report(
    metrics_paths: &[PathBuf],
    distance_paths: &[PathBuf],
    out: Option<&Path>,
) -> Result<crate::report::ReportDoc> {
    if metrics_paths.is_empty() {
        return Err(AppError::Validation("at least one metrics file required".into()));
    }
    let mut all = Vec::new();
    for p in metrics_paths {
        all.extend(crate::report::parse_metrics_file(p)?);
    }
    let mut tables = Vec::new();
    for p in distance_paths {
        let stats: LayerDistanceStats = serde_json::from_slice(&std::fs::read(p)?)?;
        tables.push(crate::report::DistanceTable {
            source: p.display().to_string(),
            stats,
        });
    }
    let doc = crate::report::build_report(&all, tables)?;
    let mut json = serde_json::to_vec_pretty(&doc)?;
    json.push(b'\n');
    match out {
        Some(path) => std::fs::write(path, &json)?,
        None => print!("{}", String::from_utf8_lossy(&json)),
    }
    Ok(doc)
}

//! Perplexity-based fine-tuning sample selection.
//!
//! Each sample's response is scored with the base model — the prompt
//! conditions the forward but is never scored — and the lowest-perplexity
//! fraction is kept. Over-long samples are skipped, not truncated, and
//! show up in the report with a reason.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{CoreError, Result};
use crate::model::lm_loss;
use crate::real::Real;
use crate::tokenizer::{BOS, EOS};

/// One instruction-following sample.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstructSample {
    pub id: String,
    pub prompt: String,
    pub response: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub domain: Option<String>,
}

/// Outcome of a filtering run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurationReport {
    pub total: usize,
    pub kept: usize,
    pub fraction: f64,
    /// (id, perplexity) for every scored sample, input order.
    pub perplexities: Vec<(String, f64)>,
    /// (id, reason) for samples excluded before scoring.
    pub skipped: Vec<(String, String)>,
}

/// Token sequence `[BOS] prompt response [EOS]` plus the prediction-
/// position mask selecting exactly the response bytes. Perplexity scores
/// the response itself, not the stop marker; fine-tuning adds the EOS via
/// [`sft_loss_mask`] so the model also learns to stop.
pub fn sample_tokens(sample: &InstructSample) -> (Vec<u32>, Vec<bool>) {
    let p = sample.prompt.len();
    let r = sample.response.len();
    let mut tokens = Vec::with_capacity(p + r + 2);
    tokens.push(BOS);
    tokens.extend(sample.prompt.as_bytes().iter().map(|&b| b as u32));
    tokens.extend(sample.response.as_bytes().iter().map(|&b| b as u32));
    tokens.push(EOS);
    // Prediction position t scores target tokens[t+1]; response bytes
    // occupy token indices [1 + p, p + r].
    let preds = tokens.len() - 1;
    let mask: Vec<bool> = (0..preds).map(|t| t >= p && t < p + r).collect();
    (tokens, mask)
}

/// Prediction mask for fine-tuning: the response bytes plus the EOS.
pub fn sft_loss_mask(sample: &InstructSample) -> (Vec<u32>, Vec<bool>) {
    let (tokens, mut mask) = sample_tokens(sample);
    let last = mask.len() - 1;
    mask[last] = true;
    (tokens, mask)
}

/// exp(mean NLL over response-token positions), prompt conditioning
/// included. Errors on over-long or empty-response samples; callers that
/// filter treat those as skips.
pub fn response_perplexity<R: Real>(ckpt: &Checkpoint<R>, sample: &InstructSample) -> Result<f64> {
    if sample.response.is_empty() {
        return Err(CoreError::Input(format!(
            "sample {} has an empty response",
            sample.id
        )));
    }
    let (tokens, mask) = sample_tokens(sample);
    if tokens.len() > ckpt.config.max_seq_len {
        return Err(CoreError::Input(format!(
            "sample {} is {} tokens, max_seq_len {}",
            sample.id,
            tokens.len(),
            ckpt.config.max_seq_len
        )));
    }
    let loss = lm_loss(
        &ckpt.params,
        &ckpt.config,
        &tokens,
        Some(&mask),
        ckpt.mask_state.as_ref(),
    )?;
    Ok(libm::exp(loss.to_f64()))
}

/// Scoring outcome of one sample.
#[derive(Debug, Clone, PartialEq)]
pub enum SampleScore {
    Scored(f64),
    Skipped(String),
}

/// Scores one sample, folding ineligibility (over-long, empty response)
/// into a skip reason.
pub fn score_sample<R: Real>(ckpt: &Checkpoint<R>, sample: &InstructSample) -> Result<SampleScore> {
    match response_perplexity(ckpt, sample) {
        Ok(ppl) => Ok(SampleScore::Scored(ppl)),
        Err(CoreError::Input(reason)) => Ok(SampleScore::Skipped(reason)),
        Err(other) => Err(other),
    }
}

/// Selection half of the filter: keeps the `floor(eligible * fraction)`
/// lowest-perplexity samples, ties broken by input order; kept samples
/// come back in their original input order. `scores` must align with
/// `samples`, which lets callers score in parallel without changing the
/// outcome.
pub fn filter_with_scores(
    samples: &[InstructSample],
    scores: &[SampleScore],
    fraction: f64,
) -> Result<(Vec<InstructSample>, CurationReport)> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(CoreError::Input(format!(
            "fraction {fraction} outside (0, 1]"
        )));
    }
    if samples.len() != scores.len() {
        return Err(CoreError::Contract(format!(
            "{} samples with {} scores",
            samples.len(),
            scores.len()
        )));
    }
    let mut skipped = Vec::new();
    let mut scored: Vec<(usize, f64)> = Vec::new();
    let mut perplexities = Vec::new();
    for (i, (sample, score)) in samples.iter().zip(scores.iter()).enumerate() {
        match score {
            SampleScore::Scored(ppl) => {
                scored.push((i, *ppl));
                perplexities.push((sample.id.clone(), *ppl));
            }
            SampleScore::Skipped(reason) => skipped.push((sample.id.clone(), reason.clone())),
        }
    }
    if scored.is_empty() {
        return Err(CoreError::Contract(
            "no eligible samples to filter".to_string(),
        ));
    }
    let keep_n = (scored.len() as f64 * fraction) as usize;
    let mut by_ppl = scored.clone();
    by_ppl.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
    let mut kept_idx: Vec<usize> = by_ppl[..keep_n].iter().map(|&(i, _)| i).collect();
    kept_idx.sort_unstable();
    let kept: Vec<InstructSample> = kept_idx.iter().map(|&i| samples[i].clone()).collect();
    let report = CurationReport {
        total: samples.len(),
        kept: kept.len(),
        fraction,
        perplexities,
        skipped,
    };
    Ok((kept, report))
}

/// Scores every sample sequentially and keeps the lowest-perplexity
/// fraction.
pub fn filter_lowest_ppl<R: Real>(
    samples: &[InstructSample],
    ckpt: &Checkpoint<R>,
    fraction: f64,
) -> Result<(Vec<InstructSample>, CurationReport)> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(CoreError::Input(format!(
            "fraction {fraction} outside (0, 1]"
        )));
    }
    let scores: Result<Vec<SampleScore>> =
        samples.iter().map(|s| score_sample(ckpt, s)).collect();
    filter_with_scores(samples, &scores?, fraction)
}

//! Metrics parsing and the plotting-ready summary document.

use std::path::Path;

use serde::{Deserialize, Serialize};

use flmgrow_core::growth::LayerDistanceStats;
use flmgrow_core::train::StepMetrics;

use crate::error::{AppError, Result};

/// Column-oriented series for external plotting.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Series {
    pub step: Vec<u64>,
    pub tokens: Vec<u64>,
    pub loss: Vec<f64>,
    pub lr_vector: Vec<f64>,
    pub lr_matrix: Vec<f64>,
    pub mask: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DistanceTable {
    pub source: String,
    pub stats: LayerDistanceStats,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportDoc {
    pub series: Series,
    /// Steps at which a growth event started (the mask dropped).
    pub growth_steps: Vec<u64>,
    pub distances: Vec<DistanceTable>,
}

/// Parses one `key=value ...` metrics line.
pub fn parse_metrics_line(line: &str, context: &str) -> Result<StepMetrics> {
    let mut step = None;
    let mut tokens = None;
    let mut loss = None;
    let mut lr_vector = None;
    let mut lr_matrix = None;
    let mut mask = None;
    for field in line.split_whitespace() {
        let (key, value) = field
            .split_once('=')
            .ok_or_else(|| AppError::Validation(format!("{context}: field `{field}` has no `=`")))?;
        let bad = |e: &dyn std::fmt::Display| {
            AppError::Validation(format!("{context}: bad {key} value `{value}`: {e}"))
        };
        match key {
            "step" => step = Some(value.parse::<u64>().map_err(|e| bad(&e))?),
            "tokens" => tokens = Some(value.parse::<u64>().map_err(|e| bad(&e))?),
            "loss" => loss = Some(value.parse::<f64>().map_err(|e| bad(&e))?),
            "lr_vector" => lr_vector = Some(value.parse::<f64>().map_err(|e| bad(&e))?),
            "lr_matrix" => lr_matrix = Some(value.parse::<f64>().map_err(|e| bad(&e))?),
            "mask" => mask = Some(value.parse::<f64>().map_err(|e| bad(&e))?),
            other => {
                return Err(AppError::Validation(format!(
                    "{context}: unknown field `{other}`"
                )))
            }
        }
    }
    match (step, tokens, loss, lr_vector, lr_matrix, mask) {
        (Some(step), Some(tokens), Some(loss), Some(lr_vector), Some(lr_matrix), Some(mask)) => {
            Ok(StepMetrics {
                step,
                tokens,
                loss,
                lr_vector,
                lr_matrix,
                mask,
            })
        }
        _ => Err(AppError::Validation(format!("{context}: missing fields"))),
    }
}

pub fn parse_metrics_file(path: &Path) -> Result<Vec<StepMetrics>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse_metrics_line(
            line,
            &format!("{}:{}", path.display(), i + 1),
        )?);
    }
    Ok(out)
}

/// Concatenates per-run metrics into one continuous series and marks
/// growth events. Steps must increase across the concatenation.
pub fn build_report(
    metrics: &[StepMetrics],
    distances: Vec<DistanceTable>,
) -> Result<ReportDoc> {
    if metrics.is_empty() {
        return Err(AppError::Validation("empty metrics series".into()));
    }
    let mut series = Series::default();
    let mut growth_steps = Vec::new();
    let mut prev_step: Option<u64> = None;
    let mut prev_mask: Option<f64> = None;
    for m in metrics {
        if let Some(p) = prev_step {
            if m.step <= p {
                return Err(AppError::Validation(format!(
                    "metrics steps not increasing: {p} then {}",
                    m.step
                )));
            }
        }
        // A mask drop signals a new growth event (within an event the mask
        // is non-decreasing).
        if let Some(pm) = prev_mask {
            if m.mask < pm {
                growth_steps.push(m.step);
            }
        }
        prev_step = Some(m.step);
        prev_mask = Some(m.mask);
        series.step.push(m.step);
        series.tokens.push(m.tokens);
        series.loss.push(m.loss);
        series.lr_vector.push(m.lr_vector);
        series.lr_matrix.push(m.lr_matrix);
        series.mask.push(m.mask);
    }
    Ok(ReportDoc {
        series,
        growth_steps,
        distances,
    })
}

//! Line-delimited JSON ingestion/emission of instruction samples.

use std::io::Write;
use std::path::Path;

use flmgrow_core::curation::InstructSample;

use crate::error::{AppError, Result};

/// Reads JSONL records with fields id/prompt/response and optional domain.
pub fn read_samples(path: &Path) -> Result<Vec<InstructSample>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let sample: InstructSample = serde_json::from_str(line).map_err(|e| {
            AppError::Validation(format!("{}:{}: {e}", path.display(), i + 1))
        })?;
        out.push(sample);
    }
    Ok(out)
}

pub fn write_samples(path: &Path, samples: &[InstructSample]) -> Result<()> {
    let mut buf = Vec::new();
    for s in samples {
        serde_json::to_writer(&mut buf, s)?;
        buf.push(b'\n');
    }
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&buf)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

//! Corpus loading and deterministic batch order.
//!
//! The token stream is cut into non-overlapping windows of `seq_len + 1`
//! tokens (each yields `seq_len` predictions). The order windows are
//! visited in is a pure function of (corpus, seed, absolute step): every
//! epoch gets its own seeded shuffle, and the flat sequence counter maps
//! into it. Resuming from any step therefore reproduces the uninterrupted
//! batch stream exactly.

use std::path::Path;

use flmgrow_core::rng::Rng;
use flmgrow_core::tokenizer::tokenize_bytes;

use crate::error::{AppError, Result};

/// Tokenized corpus cut into fixed windows.
pub struct Corpus {
    windows: Vec<Vec<u32>>,
    seq_len: usize,
}

impl Corpus {
    pub fn from_bytes(bytes: &[u8], seq_len: usize) -> Result<Corpus> {
        let tokens = tokenize_bytes(bytes);
        let window = seq_len + 1;
        let count = tokens.len() / window;
        if count == 0 {
            return Err(AppError::Validation(format!(
                "corpus holds {} tokens, needs at least one window of {window}",
                tokens.len()
            )));
        }
        let windows = (0..count)
            .map(|w| tokens[w * window..(w + 1) * window].to_vec())
            .collect();
        Ok(Corpus { windows, seq_len })
    }

    pub fn load(path: &Path, seq_len: usize) -> Result<Corpus> {
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes, seq_len)
    }

    pub fn window_count(&self) -> usize {
        self.windows.len()
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }
}

/// Deterministic window scheduler.
pub struct Batcher<'c> {
    corpus: &'c Corpus,
    seed: u64,
    sequences_per_step: usize,
    cached_epoch: Option<(u64, Vec<u32>)>,
}

impl<'c> Batcher<'c> {
    pub fn new(corpus: &'c Corpus, seed: u64, batch_tokens: u64) -> Result<Self> {
        let per_step = batch_tokens / corpus.seq_len as u64;
        if per_step == 0 || !batch_tokens.is_multiple_of(corpus.seq_len as u64) {
            return Err(AppError::Validation(format!(
                "batch_tokens {batch_tokens} not a positive multiple of seq_len {}",
                corpus.seq_len
            )));
        }
        Ok(Batcher {
            corpus,
            seed,
            sequences_per_step: per_step as usize,
            cached_epoch: None,
        })
    }

    fn epoch_permutation(&mut self, epoch: u64) -> &[u32] {
        let fresh = match &self.cached_epoch {
            Some((e, _)) => *e != epoch,
            None => true,
        };
        if fresh {
            let n = self.corpus.window_count();
            let mut perm: Vec<u32> = (0..n as u32).collect();
            let mut rng = Rng::new(self.seed ^ epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15));
            // Fisher-Yates, fixed draw order.
            for i in (1..n).rev() {
                let j = rng.next_below((i + 1) as u64) as usize;
                perm.swap(i, j);
            }
            self.cached_epoch = Some((epoch, perm));
        }
        &self.cached_epoch.as_ref().unwrap().1
    }

    /// Batch for the step executed when `completed_steps` steps are done.
    pub fn batch_at(&mut self, completed_steps: u64) -> Vec<Vec<u32>> {
        let n = self.corpus.window_count() as u64;
        let per = self.sequences_per_step as u64;
        let mut out = Vec::with_capacity(self.sequences_per_step);
        for s in 0..per {
            let flat = completed_steps * per + s;
            let epoch = flat / n;
            let idx = (flat % n) as usize;
            let w = self.epoch_permutation(epoch)[idx] as usize;
            out.push(self.corpus.windows[w].clone());
        }
        out
    }
}

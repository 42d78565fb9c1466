//! Byte-level tokenizer: UTF-8 bytes map to ids 0-255, plus BOS and EOS.

use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};

pub const BOS: u32 = 256;
pub const EOS: u32 = 257;
/// Desk-scale vocabulary: 256 byte values + BOS + EOS.
pub const VOCAB_SIZE: usize = 258;

/// `[BOS] bytes.. [EOS]`.
pub fn tokenize(text: &str) -> Vec<u32> {
    tokenize_bytes(text.as_bytes())
}

pub fn tokenize_bytes(bytes: &[u8]) -> Vec<u32> {
    let mut out = Vec::with_capacity(bytes.len() + 2);
    out.push(BOS);
    out.extend(bytes.iter().map(|&b| b as u32));
    out.push(EOS);
    out
}

/// Inverse of [`tokenize`]: drops BOS/EOS markers, rejects ids outside the
/// vocabulary and non-UTF-8 byte sequences.
pub fn detokenize(ids: &[u32]) -> Result<String> {
    let mut bytes = Vec::with_capacity(ids.len());
    for &id in ids {
        match id {
            0..=255 => bytes.push(id as u8),
            BOS | EOS => {}
            other => {
                return Err(CoreError::Input(alloc::format!(
                    "token {other} outside vocabulary {VOCAB_SIZE}"
                )))
            }
        }
    }
    String::from_utf8(bytes)
        .map_err(|e| CoreError::Input(alloc::format!("detokenized bytes not UTF-8: {e}")))
}

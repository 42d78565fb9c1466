//! Architecture hyperparameters and the closed-form parameter count.

use alloc::format;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

fn default_kv_channels() -> usize {
    128
}

fn default_rope_base() -> f64 {
    10000.0
}

/// One architecture stage. `head_num` is tied to `hidden_dim` through the
/// fixed per-head projection width: `head_num * kv_channels == hidden_dim`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layer_num: usize,
    pub head_num: usize,
    pub hidden_dim: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    #[serde(default = "default_kv_channels")]
    pub kv_channels: usize,
    pub max_seq_len: usize,
    #[serde(default = "default_rope_base")]
    pub rope_base: f64,
    /// Multiplier on the embedding output.
    pub input_mult: f64,
    /// Multiplier on the logits.
    pub output_mult: f64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("layer_num", self.layer_num),
            ("head_num", self.head_num),
            ("hidden_dim", self.hidden_dim),
            ("ffn_dim", self.ffn_dim),
            ("vocab_size", self.vocab_size),
            ("kv_channels", self.kv_channels),
            ("max_seq_len", self.max_seq_len),
        ] {
            if v == 0 {
                return Err(CoreError::Config(format!("{name} must be >= 1")));
            }
        }
        if !self.hidden_dim.is_multiple_of(self.kv_channels) {
            return Err(CoreError::Config(format!(
                "hidden_dim {} not divisible by kv_channels {}",
                self.hidden_dim, self.kv_channels
            )));
        }
        if self.head_num * self.kv_channels != self.hidden_dim {
            return Err(CoreError::Config(format!(
                "head_num {} * kv_channels {} != hidden_dim {}",
                self.head_num, self.kv_channels, self.hidden_dim
            )));
        }
        if !self.kv_channels.is_multiple_of(2) {
            return Err(CoreError::Config(format!(
                "kv_channels {} must be even for rotary embedding",
                self.kv_channels
            )));
        }
        if self.rope_base.is_nan() || self.rope_base <= 0.0 {
            return Err(CoreError::Config(format!(
                "rope_base {} must be positive",
                self.rope_base
            )));
        }
        Ok(())
    }

    /// Total scalar parameters: untied embedding and head (2 V d), per
    /// layer four attention matrices, three SwiGLU matrices and two norm
    /// gains (4 d^2 + 3 d f + 2 d), plus the final LayerNorm gain and bias
    /// (2 d).
    pub fn count_params(&self) -> u64 {
        let v = self.vocab_size as u64;
        let d = self.hidden_dim as u64;
        let f = self.ffn_dim as u64;
        let l = self.layer_num as u64;
        2 * v * d + l * (4 * d * d + 3 * d * f + 2 * d) + 2 * d
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stage(layer_num: usize, head_num: usize, hidden: usize, ffn: usize) -> ModelConfig {
        ModelConfig {
            layer_num,
            head_num,
            hidden_dim: hidden,
            ffn_dim: ffn,
            vocab_size: 80_000,
            kv_channels: 128,
            max_seq_len: 4096,
            rope_base: 10000.0,
            input_mult: 1.0,
            output_mult: 2.5e-2,
        }
    }

    #[test]
    fn count_matches_published_stage_sizes() {
        let checks = [
            (stage(64, 64, 8192, 21_824), 52.85e9),
            (stage(80, 80, 10_240, 27_264), 102.3e9),
            (stage(140, 160, 20_480, 98_304), 1083.74e9),
        ];
        for (cfg, expected) in checks {
            cfg.validate().unwrap();
            let got = cfg.count_params() as f64;
            let rel = (got - expected).abs() / expected;
            assert!(rel < 0.002, "{got} vs {expected} (rel {rel})");
        }
    }

    #[test]
    fn count_collapses_without_layers() {
        let mut cfg = stage(1, 1, 2, 1);
        cfg.kv_channels = 2;
        cfg.vocab_size = 1;
        cfg.layer_num = 0;
        // 2*1*2 + 0 + 2*2 = 8
        assert_eq!(cfg.count_params(), 8);
    }

    #[test]
    fn validation_rejects_bad_divisibility() {
        let mut cfg = stage(4, 4, 100, 176);
        cfg.kv_channels = 128;
        cfg.head_num = 1;
        assert!(matches!(cfg.validate(), Err(CoreError::Config(_))));
        let mut cfg = stage(4, 3, 64, 176);
        cfg.kv_channels = 16;
        assert!(matches!(cfg.validate(), Err(CoreError::Config(_))));
    }
}

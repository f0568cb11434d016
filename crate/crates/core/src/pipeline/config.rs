use std::fmt;

use crate::error::{Error, Result};
use crate::kv::KvFile;

/// Architecture and sampling settings of the learned pipeline.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub channels: usize,
    pub mask_count: usize,
    /// Odd, strictly increasing.
    pub attention_kernels: Vec<usize>,
    pub tau: f64,
    pub glc_hidden: usize,
    pub rgfc_hidden: usize,
    pub epsilon: f64,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            channels: 4,
            mask_count: 16,
            attention_kernels: vec![3, 5, 7],
            tau: 0.1,
            glc_hidden: 16,
            rgfc_hidden: 16,
            epsilon: 1e-6,
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn with_mask_count(mut self, k: usize) -> Self {
        self.mask_count = k;
        self
    }

    pub fn branches(&self) -> usize {
        self.attention_kernels.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.channels == 0 {
            return bad("channels must be at least 1".into());
        }
        if self.mask_count == 0 {
            return bad("mask_count must be at least 1".into());
        }
        if self.glc_hidden == 0 || self.rgfc_hidden == 0 {
            return bad("hidden widths must be at least 1".into());
        }
        if self.attention_kernels.is_empty() {
            return bad("attention_kernels must not be empty".into());
        }
        if let Some(k) = self.attention_kernels.iter().find(|&&k| k % 2 == 0) {
            return bad(format!("attention kernel {k} is not odd"));
        }
        if self.attention_kernels.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!(
                "attention_kernels must be strictly increasing, got {:?}",
                self.attention_kernels
            ));
        }
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return bad(format!("tau must be positive, got {}", self.tau));
        }
        if !(self.epsilon > 0.0) || !self.epsilon.is_finite() {
            return bad(format!("epsilon must be positive, got {}", self.epsilon));
        }
        Ok(())
    }

    /// Reads the recognized keys from `kv`, falling back to defaults.
    pub fn from_kv(kv: &KvFile) -> Result<Self> {
        let d = PipelineConfig::default();
        let cfg = PipelineConfig {
            channels: kv.parsed("channels")?.unwrap_or(d.channels),
            mask_count: kv.parsed("mask_count")?.unwrap_or(d.mask_count),
            attention_kernels: kv.list("attention_kernels")?.unwrap_or(d.attention_kernels),
            tau: kv.parsed("tau")?.unwrap_or(d.tau),
            glc_hidden: kv.parsed("glc_hidden")?.unwrap_or(d.glc_hidden),
            rgfc_hidden: kv.parsed("rgfc_hidden")?.unwrap_or(d.rgfc_hidden),
            epsilon: kv.parsed("epsilon")?.unwrap_or(d.epsilon),
            seed: kv.parsed("seed")?.unwrap_or(d.seed),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

impl fmt::Display for PipelineConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kernels: Vec<String> = self.attention_kernels.iter().map(|k| k.to_string()).collect();
        writeln!(f, "channels={}", self.channels)?;
        writeln!(f, "mask_count={}", self.mask_count)?;
        writeln!(f, "attention_kernels={}", kernels.join(","))?;
        writeln!(f, "tau={}", self.tau)?;
        writeln!(f, "glc_hidden={}", self.glc_hidden)?;
        writeln!(f, "rgfc_hidden={}", self.rgfc_hidden)?;
        writeln!(f, "epsilon={}", self.epsilon)?;
        writeln!(f, "seed={}", self.seed)
    }
}

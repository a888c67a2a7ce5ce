use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frontends::{Frontend, FrontendPool};
use std::sync::Arc;

/// How often FAT draws a new front-end.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    PerUtterance,
    PerBatch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FatConfig {
    /// Ids of the trained front-ends that make up the pool.
    pub pool: Vec<String>,
    pub snr_range: [f64; 2],
    pub granularity: Granularity,
    /// Adds the pass-through front-end to the pool.
    pub include_identity_frontend: bool,
}

impl Default for FatConfig {
    fn default() -> Self {
        Self {
            pool: Vec::new(),
            snr_range: [5.0, 10.0],
            granularity: Granularity::PerUtterance,
            include_identity_frontend: false,
        }
    }
}

impl FatConfig {
    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.snr_range;
        if !lo.is_finite() || !hi.is_finite() || lo > hi {
            return Err(Error::Config(format!(
                "fat.snr_range {:?} is not a valid interval",
                self.snr_range
            )));
        }
        if self.pool.is_empty() && !self.include_identity_frontend {
            return Err(Error::Config("fat.pool is empty".into()));
        }
        Ok(())
    }

    /// Resolves the configured ids against the available front-ends.
    pub fn build_pool(&self, available: &[Arc<Frontend>]) -> Result<FrontendPool> {
        self.validate()?;
        let mut entries = Vec::with_capacity(self.pool.len() + 1);
        for id in &self.pool {
            let fe = available
                .iter()
                .find(|f| f.id() == id)
                .ok_or_else(|| Error::Config(format!("fat.pool names unknown front-end `{id}`")))?;
            entries.push(fe.clone());
        }
        if self.include_identity_frontend {
            entries.push(Arc::new(Frontend::identity()));
        }
        FrontendPool::new(entries)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ImstConfig {
    pub segment_length_s: f64,
    /// Probability that a segment is replaced by its enhanced rendering.
    pub p_enh: f64,
    /// Draw a fresh front-end for every enhanced segment rather than one
    /// per utterance.
    pub per_segment_resampling: bool,
}

impl Default for ImstConfig {
    fn default() -> Self {
        Self {
            segment_length_s: 1.0,
            p_enh: 0.5,
            per_segment_resampling: true,
        }
    }
}

impl ImstConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.segment_length_s > 0.0) || !(0.0..=1.0).contains(&self.p_enh) {
            return Err(Error::Config(format!(
                "imst needs segment_length_s > 0 and p_enh in [0, 1], got {} and {}",
                self.segment_length_s, self.p_enh
            )));
        }
        Ok(())
    }

    pub fn segment_samples(&self, sample_rate: u32) -> usize {
        ((self.segment_length_s * sample_rate as f64).round() as usize).max(1)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Linear warmup length; `None` means 8% of `steps`.
    pub warmup_steps: Option<usize>,
    pub seed: u64,
    /// Save a checkpoint every this many steps (0: final only).
    pub checkpoint_every: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 4,
            lr: 1e-4,
            warmup_steps: None,
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!(
                "pretrain needs batch_size > 0 and a positive lr, got {} and {}",
                self.batch_size, self.lr
            )));
        }
        Ok(())
    }

    pub fn warmup(&self) -> usize {
        self.warmup_steps
            .unwrap_or_else(|| (self.steps as f64 * 0.08).round() as usize)
    }

    /// Learning rate for 0-based `step`: linear ramp then constant.
    pub fn lr_at(&self, step: usize) -> f64 {
        let w = self.warmup();
        if w == 0 || step >= w {
            self.lr
        } else {
            self.lr * (step + 1) as f64 / w as f64
        }
    }
}

/// What the baseline sees during pretraining.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineInput {
    Clean,
    /// Mixed with noise exactly as FAT mixes, without enhancement.
    Noisy,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warmup_ramp() {
        let c = PretrainConfig {
            steps: 100,
            lr: 1.0,
            ..PretrainConfig::default()
        };
        assert_eq!(c.warmup(), 8);
        assert!((c.lr_at(0) - 0.125).abs() < 1e-15);
        assert_eq!(c.lr_at(7), 1.0);
        assert_eq!(c.lr_at(50), 1.0);
    }

    #[test]
    fn invalid_configs() {
        assert!(ImstConfig {
            p_enh: 1.5,
            ..ImstConfig::default()
        }
        .validate()
        .is_err());
        assert!(ImstConfig {
            segment_length_s: 0.0,
            ..ImstConfig::default()
        }
        .validate()
        .is_err());
        assert!(FatConfig::default().validate().is_err());
        let fat = FatConfig {
            snr_range: [10.0, 5.0],
            include_identity_frontend: true,
            ..FatConfig::default()
        };
        assert!(fat.validate().is_err());
    }
}

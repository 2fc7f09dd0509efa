use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Cosine,
}

/// Optimization and augmentation settings. Architecture lives in
/// [`crate::ModelConfig`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Recipe {
    pub epochs: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub min_lr: f64,
    pub warmup_epochs: f64,
    pub schedule: ScheduleKind,
    pub adam_beta: [f64; 2],
    pub adam_eps: f64,
    pub weight_decay: f64,
    /// Global L2 max-norm; `None` disables clipping.
    pub grad_clip: Option<f64>,
    pub mask_ratio: f64,
    /// Experimental: draw the masked set independently of the retained set
    /// instead of partitioning the grid, so a position may be in both.
    pub overlapping_mask: bool,
    pub crop_ratio_range: [f64; 2],
    pub flip_prob: f64,
    /// Brightness/contrast/saturation strength; 0 disables.
    pub color_jitter: f64,
    pub seed: u64,
    /// Overrides `epochs · steps_per_epoch` when set.
    pub max_steps: Option<u64>,
    /// Periodic checkpoint interval in steps; 0 writes only the final one.
    pub checkpoint_every: u64,
}

impl Default for Recipe {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 64,
            peak_lr: 1.5e-3,
            min_lr: 1e-5,
            warmup_epochs: 5.0,
            schedule: ScheduleKind::Cosine,
            adam_beta: [0.9, 0.999],
            adam_eps: 1e-8,
            weight_decay: 0.05,
            grad_clip: Some(3.0),
            mask_ratio: 0.6,
            overlapping_mask: false,
            crop_ratio_range: [0.08, 1.0],
            flip_prob: 0.5,
            color_jitter: 0.0,
            seed: 0,
            max_steps: None,
            checkpoint_every: 0,
        }
    }
}

impl Recipe {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive".into());
        }
        if !(self.min_lr > 0.0 && self.min_lr <= self.peak_lr) || !self.peak_lr.is_finite() {
            return bad(format!(
                "learning rates must satisfy 0 < min_lr ({}) <= peak_lr ({})",
                self.min_lr, self.peak_lr
            ));
        }
        if !(self.warmup_epochs >= 0.0 && self.warmup_epochs < self.epochs as f64) {
            return bad(format!(
                "warmup_epochs {} must lie in [0, epochs = {})",
                self.warmup_epochs, self.epochs
            ));
        }
        let [b1, b2] = self.adam_beta;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) || !(self.adam_eps > 0.0) {
            return bad(format!("adam betas {:?} must lie in [0,1) and eps > 0", self.adam_beta));
        }
        if !(self.weight_decay >= 0.0) {
            return bad(format!("weight_decay {} must be non-negative", self.weight_decay));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return bad(format!("grad_clip {c} must be positive (omit it to disable)"));
            }
        }
        if !(0.0..=1.0).contains(&self.mask_ratio) {
            return bad(format!("mask_ratio {} outside [0, 1]", self.mask_ratio));
        }
        let [lo, hi] = self.crop_ratio_range;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return bad(format!("crop_ratio_range {:?} must satisfy 0 < lo <= hi <= 1", self.crop_ratio_range));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return bad(format!("flip_prob {} outside [0, 1]", self.flip_prob));
        }
        if !(0.0..1.0).contains(&self.color_jitter) {
            return bad(format!("color_jitter {} outside [0, 1)", self.color_jitter));
        }
        if self.max_steps == Some(0) {
            return bad("max_steps must be positive when set".into());
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, n_images: usize) -> u64 {
        n_images.div_ceil(self.batch_size).max(1) as u64
    }

    pub fn total_steps(&self, n_images: usize) -> u64 {
        self.max_steps
            .unwrap_or(self.epochs as u64 * self.steps_per_epoch(n_images))
    }
}

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which zero-initialized encoder biases stay fixed during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BiasFreeze {
    None,
    /// Projection head only.
    Projection,
    /// Every encoder layer, which leaves the feature trunk positively
    /// homogeneous: a dark patch maps to a small feature.
    All,
}

impl BiasFreeze {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "projection" => Ok(Self::Projection),
            "all" => Ok(Self::All),
            _ => Err(Error::ConfigInvalid(format!("freeze_bias: unknown value {s:?}"))),
        }
    }
}

/// How the positive logit of the multi-centroid loss is tempered.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PositiveLogit {
    /// `exp(z . c*)` with `c*` already carrying `1/phi` per centroid.
    AsPrinted,
    /// Additionally divides the positive logit by the mean density of the
    /// `L` positive centroids.
    ExtraDensity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    pub tau: f32,
    pub n_z: usize,
    pub n_c: usize,
    pub l_pos: usize,
    pub alpha: f32,
    pub beta: f32,
    pub n_neg: usize,
    pub momentum_coef: f32,
    pub lr: f32,
    /// Learning rate of the cross-entropy baseline, which trains on its own
    /// schedule.
    pub ce_lr: f32,
    pub weight_decay: f32,
    pub sgd_momentum: f32,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub positive_logit: PositiveLogit,
    pub kmeans_iters: usize,
    pub kmeans_restarts: usize,
    /// Maximum random translation, in pixels per axis, applied to each
    /// training image every time it is drawn. 0 disables augmentation.
    pub augment_shift: usize,
    /// Centroid densities are rescaled to this mean after each clustering.
    /// 0 keeps the raw densities.
    pub density_mean: f32,
    pub freeze_bias: BiasFreeze,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            tau: 0.1,
            n_z: 12,
            n_c: 64,
            l_pos: 5,
            alpha: 1.0,
            beta: 0.5,
            n_neg: 59,
            momentum_coef: 0.99,
            lr: 0.003,
            ce_lr: 0.1,
            weight_decay: 1e-4,
            sgd_momentum: 0.9,
            batch_size: 32,
            epochs: 30,
            seed: 0,
            positive_logit: PositiveLogit::AsPrinted,
            kmeans_iters: 50,
            kmeans_restarts: 2,
            augment_shift: 2,
            density_mean: 0.3,
            freeze_bias: BiasFreeze::All,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::ConfigInvalid(m));
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return fail(format!("tau must be > 0, got {}", self.tau));
        }
        if self.n_z == 0 {
            return fail("n_z must be >= 1".into());
        }
        if self.l_pos == 0 || self.l_pos >= self.n_c {
            return fail(format!(
                "need 1 <= l_pos < n_c, got l_pos={} n_c={}",
                self.l_pos, self.n_c
            ));
        }
        if self.n_neg > self.n_c - self.l_pos {
            return fail(format!(
                "n_neg={} exceeds n_c - l_pos = {}",
                self.n_neg,
                self.n_c - self.l_pos
            ));
        }
        if !(0.0..1.0).contains(&self.momentum_coef) {
            return fail(format!("momentum_coef must be in [0, 1), got {}", self.momentum_coef));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return fail("batch_size and epochs must be >= 1".into());
        }
        if !(self.density_mean >= 0.0 && self.density_mean.is_finite()) {
            return fail(format!("density_mean must be >= 0, got {}", self.density_mean));
        }
        if self.lr < 0.0 || self.ce_lr < 0.0 || self.weight_decay < 0.0 || !(0.0..1.0).contains(&self.sgd_momentum) {
            return fail("optimizer knobs out of range".into());
        }
        if self.kmeans_iters == 0 || self.kmeans_restarts == 0 {
            return fail("kmeans_iters and kmeans_restarts must be >= 1".into());
        }
        Ok(())
    }
}

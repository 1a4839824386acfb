//! Plain-text `key = value` configuration with `#` comments.
//!
//! One file may carry generator, training, and evaluation keys; each key is
//! documented by [`KEYS`]. Unknown keys are rejected.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::gcam::ClusterSpace;
use crate::params::{BiasFreeze, PositiveLogit};
use crate::synthgen::GenConfig;
use crate::trainer::{Mode, TrainConfig};

pub const KEYS: &[&str] = &[
    // generator
    "n_known",
    "n_nov_s",
    "n_nov_d",
    "samples_per_class",
    "val_per_class",
    "test_per_class",
    "image_side",
    "noise_std",
    "distractor_prob",
    "labeled_fraction",
    // training
    "mode",
    "seed",
    "tau",
    "n_z",
    "n_c",
    "l_pos",
    "alpha",
    "beta",
    "n_neg",
    "momentum_coef",
    "lr",
    "ce_lr",
    "weight_decay",
    "sgd_momentum",
    "batch_size",
    "epochs",
    "positive_logit",
    "kmeans_iters",
    "kmeans_restarts",
    "augment_shift",
    "density_mean",
    "freeze_bias",
    "recluster_every",
    "patch",
    "d1",
    "d_hidden",
    "d2",
    // evaluation
    "theta",
    "eval_space",
    "eval_clusters",
];

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ConfigMap(pub BTreeMap<String, String>);

pub fn parse(text: &str) -> Result<ConfigMap> {
    let mut map = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::ConfigInvalid(format!("line {}: expected key = value", n + 1)));
        };
        let (k, v) = (k.trim(), v.trim());
        if !KEYS.contains(&k) {
            return Err(Error::ConfigInvalid(format!("line {}: unknown key {k:?}", n + 1)));
        }
        if map.insert(k.to_string(), v.to_string()).is_some() {
            return Err(Error::ConfigInvalid(format!("line {}: duplicate key {k:?}", n + 1)));
        }
    }
    Ok(ConfigMap(map))
}

pub fn read(path: &Path) -> Result<ConfigMap> {
    let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::ConfigInvalid(format!("config file {} not found", path.display())),
        _ => Error::io(path, e),
    })?;
    parse(&text).map_err(|e| Error::ConfigInvalid(format!("{}: {e}", path.display())))
}

impl ConfigMap {
    fn get<T: FromStr>(&self, key: &str, slot: &mut T) -> Result<()> {
        if let Some(v) = self.0.get(key) {
            *slot = v
                .parse()
                .map_err(|_| Error::ConfigInvalid(format!("{key}: cannot parse {v:?}")))?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.0.insert(key.to_string(), value.to_string());
    }

    pub fn apply_gen(&self, g: &mut GenConfig) -> Result<()> {
        self.get("n_known", &mut g.n_known)?;
        self.get("n_nov_s", &mut g.n_nov_s)?;
        self.get("n_nov_d", &mut g.n_nov_d)?;
        self.get("samples_per_class", &mut g.samples_per_class)?;
        self.get("val_per_class", &mut g.val_per_class)?;
        self.get("test_per_class", &mut g.test_per_class)?;
        self.get("image_side", &mut g.image_side)?;
        self.get("noise_std", &mut g.noise_std)?;
        self.get("distractor_prob", &mut g.distractor_prob)?;
        self.get("labeled_fraction", &mut g.labeled_fraction_of_known)?;
        self.get("seed", &mut g.seed)?;
        g.validate()
    }

    pub fn apply_train(&self, t: &mut TrainConfig) -> Result<()> {
        let h = &mut t.hyper;
        self.get("seed", &mut h.seed)?;
        self.get("tau", &mut h.tau)?;
        self.get("n_z", &mut h.n_z)?;
        self.get("n_c", &mut h.n_c)?;
        self.get("l_pos", &mut h.l_pos)?;
        self.get("alpha", &mut h.alpha)?;
        self.get("beta", &mut h.beta)?;
        self.get("n_neg", &mut h.n_neg)?;
        self.get("momentum_coef", &mut h.momentum_coef)?;
        self.get("lr", &mut h.lr)?;
        self.get("weight_decay", &mut h.weight_decay)?;
        self.get("sgd_momentum", &mut h.sgd_momentum)?;
        self.get("batch_size", &mut h.batch_size)?;
        self.get("epochs", &mut h.epochs)?;
        self.get("kmeans_iters", &mut h.kmeans_iters)?;
        self.get("kmeans_restarts", &mut h.kmeans_restarts)?;
        self.get("ce_lr", &mut h.ce_lr)?;
        self.get("augment_shift", &mut h.augment_shift)?;
        self.get("density_mean", &mut h.density_mean)?;
        if let Some(v) = self.0.get("freeze_bias") {
            h.freeze_bias = BiasFreeze::parse(v)?;
        }
        if let Some(v) = self.0.get("positive_logit") {
            h.positive_logit = match v.as_str() {
                "as_printed" => PositiveLogit::AsPrinted,
                "extra_density" => PositiveLogit::ExtraDensity,
                _ => return Err(Error::ConfigInvalid(format!("positive_logit: unknown value {v:?}"))),
            };
        }
        if let Some(v) = self.0.get("mode") {
            t.mode = Mode::parse(v)?;
        }
        self.get("recluster_every", &mut t.recluster_every)?;
        self.get("image_side", &mut t.encoder.image_side)?;
        self.get("patch", &mut t.encoder.patch)?;
        self.get("d1", &mut t.encoder.d1)?;
        self.get("d_hidden", &mut t.encoder.d_hidden)?;
        self.get("d2", &mut t.encoder.d2)?;
        t.validate()
    }

    pub fn theta(&self, default: f32) -> Result<f32> {
        let mut t = default;
        self.get("theta", &mut t)?;
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::ConfigInvalid(format!("theta must be in [0, 1], got {t}")));
        }
        Ok(t)
    }

    pub fn eval_clusters(&self) -> Result<Option<usize>> {
        let mut k = 0usize;
        self.get("eval_clusters", &mut k)?;
        Ok((k > 0).then_some(k))
    }

    pub fn eval_space(&self) -> Result<ClusterSpace> {
        match self.0.get("eval_space").map(String::as_str) {
            None | Some("feature") => Ok(ClusterSpace::Feature),
            Some("projection") => Ok(ClusterSpace::Projection),
            Some("training_bank") => Ok(ClusterSpace::TrainingBank),
            Some(v) => Err(Error::ConfigInvalid(format!("eval_space: unknown value {v:?}"))),
        }
    }

    /// Canonical text form, sorted by key.
    pub fn render(&self) -> String {
        self.0.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

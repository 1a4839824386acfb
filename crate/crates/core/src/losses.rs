//! Contrastive losses over the two banks, each returning its value and the
//! gradient with respect to the anchor representation. Banks are treated as
//! constants.

use rand::seq::index;

use crate::banks::{CentroidBank, RepBank};
use crate::data::CategoryId;
use crate::error::{Error, Result};
use crate::params::PositiveLogit;
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub value: f64,
    pub grad_z: Vec<f32>,
}

impl LossOutput {
    pub fn zero(dim: usize) -> Self {
        Self {
            value: 0.0,
            grad_z: vec![0.0; dim],
        }
    }
}

fn dot64(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

/// Softmax weights and log-sum-exp of `logits`, max-subtracted.
fn softmax(logits: &[f64]) -> (Vec<f64>, f64) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    (exps.into_iter().map(|e| e / sum).collect(), max + sum.ln())
}

fn accumulate(grad: &mut [f64], v: &[f32], w: f64) {
    for (g, &x) in grad.iter_mut().zip(v) {
        *g += w * x as f64;
    }
}

fn finish(value: f64, grad: Vec<f64>) -> LossOutput {
    LossOutput {
        // rounding can push an exact zero slightly negative
        value: value.max(0.0),
        grad_z: grad.into_iter().map(|g| g as f32).collect(),
    }
}

/// Supervised contrastive loss against the representation bank: the mean
/// over the class queue of `-log softmax` taken over every bank entry.
pub fn scl_loss(z: &[f32], y: CategoryId, bank: &RepBank, tau: f32) -> Result<LossOutput> {
    if !(tau > 0.0) {
        return Err(Error::ConfigInvalid(format!("tau must be > 0, got {tau}")));
    }
    let tau = tau as f64;
    let pos: Vec<&[f32]> = bank.iter_class(y)?.collect();
    let all: Vec<&[f32]> = bank.iter_all().map(|(_, v)| v).collect();
    let logits: Vec<f64> = all.iter().map(|p| dot64(z, p) / tau).collect();
    let (w, lse) = softmax(&logits);
    let inv_pos = 1.0 / pos.len() as f64;
    let pos_mean: f64 = pos.iter().map(|p| dot64(z, p) / tau).sum::<f64>() * inv_pos;

    let mut grad = vec![0.0; z.len()];
    for (p, &wi) in all.iter().zip(&w) {
        accumulate(&mut grad, p, wi / tau);
    }
    for p in &pos {
        accumulate(&mut grad, p, -inv_pos / tau);
    }
    Ok(finish(lse - pos_mean, grad))
}

/// Single-centroid contrastive loss: the nearest centroid is the positive,
/// every centroid uses its own density as temperature.
pub fn ocl_loss(z: &[f32], bank: &CentroidBank) -> Result<LossOutput> {
    if bank.is_empty() {
        return Err(Error::ConfigInvalid("empty centroid bank".into()));
    }
    ocl_loss_ranked(z, bank, bank.ranking(z)[0])
}

/// [`ocl_loss`] with the positive centroid given by the caller.
pub fn ocl_loss_ranked(z: &[f32], bank: &CentroidBank, positive: usize) -> Result<LossOutput> {
    if positive >= bank.len() {
        return Err(Error::ConfigInvalid(format!(
            "positive centroid {positive} out of range for {} centroids",
            bank.len()
        )));
    }
    let logits: Vec<f64> = (0..bank.len())
        .map(|c| dot64(z, bank.centroids.row(c)) / bank.phi[c] as f64)
        .collect();
    let (w, lse) = softmax(&logits);
    let mut grad = vec![0.0; z.len()];
    for (c, &wi) in w.iter().enumerate() {
        accumulate(&mut grad, bank.centroids.row(c), wi / bank.phi[c] as f64);
    }
    accumulate(&mut grad, bank.centroids.row(positive), -1.0 / bank.phi[positive] as f64);
    Ok(finish(lse - logits[positive], grad))
}

/// Multi-centroid contrastive loss.
///
/// The positive is `c* = mean_l c^l / phi^l` over the `l_pos` nearest
/// centroids. `n_neg` negatives are drawn uniformly without replacement from
/// the remaining centroids; with `n_neg = N_c - l_pos` every one is used.
pub fn mcl_loss(
    z: &[f32],
    bank: &CentroidBank,
    l_pos: usize,
    n_neg: usize,
    positive_logit: PositiveLogit,
    rng: &mut Rng,
) -> Result<LossOutput> {
    mcl_loss_ranked(z, bank, &bank.ranking(z), l_pos, n_neg, positive_logit, rng)
}

/// [`mcl_loss`] with the centroid order supplied by the caller: the first
/// `l_pos` entries of `ranking` are the positives, the rest the negative pool.
pub fn mcl_loss_ranked(
    z: &[f32],
    bank: &CentroidBank,
    ranking: &[usize],
    l_pos: usize,
    n_neg: usize,
    positive_logit: PositiveLogit,
    rng: &mut Rng,
) -> Result<LossOutput> {
    if l_pos == 0 || l_pos + n_neg > bank.len() || ranking.len() != bank.len() {
        return Err(Error::ConfigInvalid(format!(
            "need 1 <= l_pos and l_pos + n_neg <= {} with a full ranking, got {l_pos} + {n_neg} over {}",
            bank.len(),
            ranking.len()
        )));
    }
    if n_neg == 0 {
        return Ok(LossOutput::zero(z.len()));
    }
    let (positives, rest) = ranking.split_at(l_pos);

    let mut c_star = vec![0.0f64; z.len()];
    let mut phi_mean = 0.0;
    for &c in positives {
        let phi = bank.phi[c] as f64;
        phi_mean += phi / l_pos as f64;
        for (s, &v) in c_star.iter_mut().zip(bank.centroids.row(c)) {
            *s += v as f64 / phi / l_pos as f64;
        }
    }
    if positive_logit == PositiveLogit::ExtraDensity {
        c_star.iter_mut().for_each(|v| *v /= phi_mean);
    }
    let negatives: Vec<usize> = if n_neg == rest.len() {
        rest.to_vec()
    } else {
        let mut picks = index::sample(rng, rest.len(), n_neg).into_vec();
        picks.sort_unstable();
        picks.into_iter().map(|i| rest[i]).collect()
    };

    let mut logits = Vec::with_capacity(1 + n_neg);
    logits.push(z.iter().zip(&c_star).map(|(&a, b)| a as f64 * b).sum::<f64>());
    for &c in &negatives {
        logits.push(dot64(z, bank.centroids.row(c)) / bank.phi[c] as f64);
    }
    let (w, lse) = softmax(&logits);
    let mut grad: Vec<f64> = c_star.iter().map(|v| (w[0] - 1.0) * v).collect();
    for (&c, &wi) in negatives.iter().zip(&w[1..]) {
        accumulate(&mut grad, bank.centroids.row(c), wi / bank.phi[c] as f64);
    }
    Ok(finish(lse - logits[0], grad))
}

pub fn total_loss(scl: &LossOutput, mcl: &LossOutput, alpha: f32, beta: f32) -> LossOutput {
    let (a, b) = (alpha as f64, beta as f64);
    LossOutput {
        value: a * scl.value + b * mcl.value,
        grad_z: scl
            .grad_z
            .iter()
            .zip(&mcl.grad_z)
            .map(|(&s, &m)| (a * s as f64 + b * m as f64) as f32)
            .collect(),
    }
}

/// Softmax cross-entropy on raw logits; returns the loss and its gradient
/// with respect to the logits.
pub fn cross_entropy(logits: &[f32], target: usize) -> (f64, Vec<f32>) {
    let l64: Vec<f64> = logits.iter().map(|&v| v as f64).collect();
    let (w, lse) = softmax(&l64);
    let grad = w
        .iter()
        .enumerate()
        .map(|(k, &p)| (p - if k == target { 1.0 } else { 0.0 }) as f32)
        .collect();
    ((lse - l64[target]).max(0.0), grad)
}

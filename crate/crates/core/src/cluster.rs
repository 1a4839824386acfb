//! k-means (k-means++ seeding, Lloyd iterations), cluster densities, and
//! estimation of the number of underlying classes.

use rand::Rng as _;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::CategoryId;
use crate::error::{Error, Result};
use crate::evalkit;
use crate::par;
use crate::rng::{self, Domain, Rng};

/// Lower clamp for densities so they are safe to use as temperatures.
pub const PHI_FLOOR: f32 = 0.01;

/// Row-major `rows x cols` matrix of `f32`.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::ShapeMismatch("ragged rows".into()));
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        })
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn select(&self, indices: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }
}

#[inline]
pub fn squared_distance(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = (*x as f64) - (*y as f64);
            d * d
        })
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KMeansConfig {
    pub max_iters: usize,
    /// Independent k-means++ restarts; the lowest final inertia wins.
    pub restarts: usize,
    pub seed: u64,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self {
            max_iters: 50,
            restarts: 2,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub centroids: Matrix,
    pub assignment: Vec<usize>,
    pub inertia: f64,
    pub iterations_run: usize,
    /// Inertia after each Lloyd iteration (assignment + repair + update).
    pub inertia_history: Vec<f64>,
}

pub fn kmeans(points: &Matrix, k: usize, cfg: &KMeansConfig) -> Result<KMeansResult> {
    if k == 0 || points.rows < k {
        return Err(Error::TooFewPoints {
            needed: k.max(1),
            got: points.rows,
        });
    }
    if points.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("k-means input"));
    }
    let mut best: Option<KMeansResult> = None;
    for restart in 0..cfg.restarts.max(1) {
        let mut rng = rng::keyed(cfg.seed, Domain::KMeans, restart as u64);
        let run = lloyd(points, k, cfg.max_iters.max(1), &mut rng);
        if best.as_ref().is_none_or(|b| run.inertia < b.inertia) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one restart"))
}

fn seed_plus_plus(points: &Matrix, k: usize, rng: &mut Rng) -> Vec<usize> {
    let n = points.rows;
    let mut chosen = vec![rng.random_range(0..n)];
    let mut d2: Vec<f64> = (0..n)
        .map(|i| squared_distance(points.row(i), points.row(chosen[0])))
        .collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if w <= 0.0 {
                    continue;
                }
                if target < w {
                    pick = i;
                    break;
                }
                target -= w;
            }
            if d2[pick] <= 0.0 {
                pick = d2.iter().rposition(|&w| w > 0.0).unwrap_or(pick);
            }
            pick
        } else {
            // all remaining points coincide with a centre: take any unused index
            let unused: Vec<usize> = (0..n).filter(|i| !chosen.contains(i)).collect();
            unused[rng.random_range(0..unused.len())]
        };
        chosen.push(next);
        for (i, w) in d2.iter_mut().enumerate() {
            *w = w.min(squared_distance(points.row(i), points.row(next)));
        }
    }
    chosen
}

fn nearest(point: &[f32], centroids: &Matrix) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for c in 0..centroids.rows {
        let d = squared_distance(point, centroids.row(c));
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn lloyd(points: &Matrix, k: usize, max_iters: usize, rng: &mut Rng) -> KMeansResult {
    let n = points.rows;
    let d = points.cols;
    let seeds = seed_plus_plus(points, k, rng);
    let mut centroids = points.select(&seeds);
    let mut assignment = vec![usize::MAX; n];
    let mut history: Vec<f64> = Vec::new();
    let mut iterations_run = 0;

    for _ in 0..max_iters {
        let nearest_all: Vec<(usize, f64)> = par::map_range(n, |i| nearest(points.row(i), &centroids));
        let new_assignment: Vec<usize> = nearest_all.iter().map(|&(c, _)| c).collect();
        if new_assignment == assignment {
            break;
        }
        assignment = new_assignment;
        iterations_run += 1;
        repair_empty(points, &centroids, &mut assignment, k);

        let mut sums = vec![0.0f64; k * d];
        let mut counts = vec![0usize; k];
        for (i, &c) in assignment.iter().enumerate() {
            counts[c] += 1;
            for (s, &v) in sums[c * d..(c + 1) * d].iter_mut().zip(points.row(i)) {
                *s += v as f64;
            }
        }
        for c in 0..k {
            let inv = 1.0 / counts[c] as f64;
            for j in 0..d {
                centroids.data[c * d + j] = (sums[c * d + j] * inv) as f32;
            }
        }
        let inertia = inertia_of(points, &centroids, &assignment);
        if let Some(&prev) = history.last() {
            assert!(
                inertia <= prev * (1.0 + 1e-9) + 1e-12,
                "k-means inertia increased: {prev} -> {inertia}"
            );
        }
        history.push(inertia);
    }
    let inertia = inertia_of(points, &centroids, &assignment);
    KMeansResult {
        centroids,
        assignment,
        inertia,
        iterations_run,
        inertia_history: history,
    }
}

/// Gives every empty cluster the point farthest from its current centroid,
/// taken from a cluster that keeps at least one member.
fn repair_empty(points: &Matrix, centroids: &Matrix, assignment: &mut [usize], k: usize) {
    let mut counts = vec![0usize; k];
    for &c in assignment.iter() {
        counts[c] += 1;
    }
    for empty in 0..k {
        if counts[empty] > 0 {
            continue;
        }
        let mut far: Option<(usize, f64)> = None;
        for (i, &c) in assignment.iter().enumerate() {
            if counts[c] <= 1 {
                continue;
            }
            let dist = squared_distance(points.row(i), centroids.row(c));
            if far.is_none_or(|(_, fd)| dist > fd) {
                far = Some((i, dist));
            }
        }
        if let Some((i, _)) = far {
            counts[assignment[i]] -= 1;
            assignment[i] = empty;
            counts[empty] += 1;
        }
    }
}

pub fn inertia_of(points: &Matrix, centroids: &Matrix, assignment: &[usize]) -> f64 {
    assignment
        .iter()
        .enumerate()
        .map(|(i, &c)| squared_distance(points.row(i), centroids.row(c)))
        .sum()
}

/// Mean member-to-centroid Euclidean distance, clamped at [`PHI_FLOOR`].
pub fn density(member_dists: &[f32], v: usize) -> f32 {
    if v == 0 {
        return PHI_FLOOR;
    }
    let sum: f64 = member_dists.iter().map(|&d| d as f64).sum();
    ((sum / v as f64) as f32).max(PHI_FLOOR)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub k: usize,
    pub inertia: f64,
    pub labeled_acc: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassCountEstimate {
    pub k_hat: usize,
    /// Every evaluated candidate, sorted by `k`.
    pub sweep: Vec<SweepPoint>,
}

impl ClassCountEstimate {
    pub fn csv(&self) -> String {
        let mut s = String::from("k,inertia,labeled_acc\n");
        for p in &self.sweep {
            s.push_str(&format!("{},{:.6},{:.6}\n", p.k, p.inertia, p.labeled_acc));
        }
        s
    }
}

/// Picks the `k` whose k-means partition best explains the labeled samples.
///
/// `labeled` pairs a row of `reps` with its class. It is split in two halves:
/// the anchor half fixes a Hungarian cluster-to-class mapping and the held-out
/// half is scored under it. Candidates come from a shrinking grid: five
/// evenly spaced values, then the bracket around the best, until the bracket
/// is small enough to scan exhaustively. Ties pick the smallest such `k`.
pub fn estimate_class_count(
    reps: &Matrix,
    labeled: &[(usize, CategoryId)],
    k_min: usize,
    k_max: usize,
    cfg: &KMeansConfig,
) -> Result<ClassCountEstimate> {
    if k_min == 0 || k_min > k_max || k_max > reps.rows {
        return Err(Error::RangeInvalid {
            min: k_min,
            max: k_max,
        });
    }
    if labeled.len() < 2 {
        return Err(Error::ConfigInvalid("need at least two labeled samples".into()));
    }
    let mut order: Vec<usize> = (0..labeled.len()).collect();
    order.shuffle(&mut rng::keyed(cfg.seed, Domain::Estimate, 0));
    let (anchor, held): (Vec<_>, Vec<_>) = order.iter().enumerate().partition(|(i, _)| i % 2 == 0);
    let anchor: Vec<(usize, CategoryId)> = anchor.into_iter().map(|(_, &j)| labeled[j]).collect();
    let held: Vec<(usize, CategoryId)> = held.into_iter().map(|(_, &j)| labeled[j]).collect();

    let score = |k: usize| -> Result<SweepPoint> {
        let km = kmeans(reps, k, cfg)?;
        let a_clusters: Vec<usize> = anchor.iter().map(|&(r, _)| km.assignment[r]).collect();
        let a_labels: Vec<CategoryId> = anchor.iter().map(|&(_, l)| l).collect();
        let mapping = evalkit::fit_mapping(&a_clusters, &a_labels)?;
        let hits = held
            .iter()
            .filter(|&&(r, l)| mapping.is_correct(km.assignment[r], l))
            .count();
        Ok(SweepPoint {
            k,
            inertia: km.inertia,
            labeled_acc: hits as f64 / held.len() as f64,
        })
    };

    let mut evaluated: Vec<SweepPoint> = Vec::new();
    let eval = |k: usize, evaluated: &mut Vec<SweepPoint>| -> Result<()> {
        if !evaluated.iter().any(|p| p.k == k) {
            evaluated.push(score(k)?);
        }
        Ok(())
    };
    let (mut lo, mut hi) = (k_min, k_max);
    loop {
        if hi - lo <= 4 {
            for k in lo..=hi {
                eval(k, &mut evaluated)?;
            }
            break;
        }
        let grid: Vec<usize> = (0..5).map(|i| lo + (hi - lo) * i / 4).collect();
        for &k in &grid {
            eval(k, &mut evaluated)?;
        }
        let acc = |k: usize| evaluated.iter().find(|p| p.k == k).map_or(0.0, |p| p.labeled_acc);
        let mut best = 0;
        for i in 1..grid.len() {
            if acc(grid[i]) > acc(grid[best]) {
                best = i;
            }
        }
        let (nlo, nhi) = (grid[best.saturating_sub(1)], grid[(best + 1).min(4)]);
        if (nlo, nhi) == (lo, hi) {
            break;
        }
        lo = nlo;
        hi = nhi;
    }
    evaluated.sort_by_key(|p| p.k);
    let best = evaluated
        .iter()
        .fold(None::<&SweepPoint>, |b, p| match b {
            Some(b) if b.labeled_acc >= p.labeled_acc => Some(b),
            _ => Some(p),
        })
        .expect("nonempty sweep");
    Ok(ClassCountEstimate {
        k_hat: best.k,
        sweep: evaluated,
    })
}

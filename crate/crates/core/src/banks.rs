//! Per-class FIFO representation bank and the semantic-centroid bank.

use std::collections::{BTreeMap, VecDeque};
use std::fs;
use std::path::Path;

use rand::Rng as _;
use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::cluster::{self, KMeansConfig, Matrix};
use crate::data::CategoryId;
use crate::encoder::dot;
use crate::error::{Error, Result};
use crate::rng::{self, Domain};
use crate::tensor::{write_atomic, Tensor};

/// Which encoder copy produced a set of representations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RepSource {
    Online,
    Momentum,
}

/// Representations of a set of samples, one row per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct RepMatrix {
    pub source: RepSource,
    pub sample_ids: Vec<usize>,
    pub reps: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RepBank {
    n_z: usize,
    dim: usize,
    queues: BTreeMap<CategoryId, VecDeque<Vec<f32>>>,
}

/// Fills each known class queue with `n_z` of its representations, drawn
/// without replacement when the class has enough and with replacement
/// otherwise.
pub fn init_rep_bank(
    class_reps: &BTreeMap<CategoryId, Vec<Vec<f32>>>,
    known: &[CategoryId],
    n_z: usize,
    seed: u64,
) -> Result<RepBank> {
    if n_z == 0 {
        return Err(Error::ConfigInvalid("n_z must be >= 1".into()));
    }
    let mut queues = BTreeMap::new();
    let mut dim = None;
    for &y in known {
        let pool = match class_reps.get(&y) {
            Some(p) if !p.is_empty() => p,
            _ => return Err(Error::EmptyClass(y)),
        };
        let mut rng = rng::keyed(seed, Domain::RepBank, y as u64);
        let picks: Vec<usize> = if pool.len() >= n_z {
            index::sample(&mut rng, pool.len(), n_z).into_vec()
        } else {
            (0..n_z).map(|_| rng.random_range(0..pool.len())).collect()
        };
        let d = pool[0].len();
        if *dim.get_or_insert(d) != d || pool.iter().any(|r| r.len() != d) {
            return Err(Error::ShapeMismatch("representations differ in width".into()));
        }
        queues.insert(y, picks.into_iter().map(|i| pool[i].clone()).collect());
    }
    Ok(RepBank {
        n_z,
        dim: dim.unwrap_or(0),
        queues,
    })
}

impl RepBank {
    pub fn n_z(&self) -> usize {
        self.n_z
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn classes(&self) -> Vec<CategoryId> {
        self.queues.keys().copied().collect()
    }

    pub fn enqueue(&mut self, y: CategoryId, z: &[f32]) -> Result<()> {
        let q = self.queues.get_mut(&y).ok_or(Error::UnknownClass(y))?;
        if z.len() != self.dim {
            return Err(Error::ShapeMismatch(format!("rep width {} != {}", z.len(), self.dim)));
        }
        q.pop_front();
        q.push_back(z.to_vec());
        debug_assert_eq!(q.len(), self.n_z);
        Ok(())
    }

    /// Oldest first.
    pub fn positives(&self, y: CategoryId) -> Result<Vec<Vec<f32>>> {
        let q = self.queues.get(&y).ok_or(Error::UnknownClass(y))?;
        Ok(q.iter().cloned().collect())
    }

    /// Every entry, ordered by class then age (oldest first).
    pub fn all(&self) -> Vec<Vec<f32>> {
        self.queues.values().flat_map(|q| q.iter().cloned()).collect()
    }

    pub fn iter_class(&self, y: CategoryId) -> Result<impl Iterator<Item = &[f32]>> {
        let q = self.queues.get(&y).ok_or(Error::UnknownClass(y))?;
        Ok(q.iter().map(|v| v.as_slice()))
    }

    pub fn iter_all(&self) -> impl Iterator<Item = (CategoryId, &[f32])> {
        self.queues
            .iter()
            .flat_map(|(&y, q)| q.iter().map(move |v| (y, v.as_slice())))
    }

    pub fn lengths_ok(&self) -> bool {
        self.queues.values().all(|q| q.len() == self.n_z)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let data: Vec<f32> = self.all().concat();
        Tensor::new(vec![self.queues.len(), self.n_z, self.dim], data)?.write(&dir.join("queues.owt"))?;
        let index = RepBankIndex {
            n_z: self.n_z,
            dim: self.dim,
            classes: self.classes(),
        };
        write_atomic(&dir.join("rep_bank.json"), &serde_json::to_vec_pretty(&index)?)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("rep_bank.json");
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let index: RepBankIndex = serde_json::from_slice(&bytes)?;
        let tpath = dir.join("queues.owt");
        let t = Tensor::read(&tpath)?;
        if t.dims() != [index.classes.len(), index.n_z, index.dim] {
            return Err(Error::format(&tpath, "queue tensor does not match index"));
        }
        let data = t.into_data();
        let row = index.n_z * index.dim;
        let queues = index
            .classes
            .iter()
            .enumerate()
            .map(|(ci, &y)| {
                let q = data[ci * row..(ci + 1) * row]
                    .chunks(index.dim.max(1))
                    .map(|c| c.to_vec())
                    .collect();
                (y, q)
            })
            .collect();
        Ok(Self {
            n_z: index.n_z,
            dim: index.dim,
            queues,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct RepBankIndex {
    n_z: usize,
    dim: usize,
    classes: Vec<CategoryId>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CentroidBank {
    /// Unit-norm rows.
    pub centroids: Matrix,
    pub phi: Vec<f32>,
    pub sample_ids: Vec<usize>,
    /// Centroid index per entry of `sample_ids`.
    pub assignment: Vec<usize>,
    pub member_counts: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NearCentroid<'a> {
    pub index: usize,
    pub centroid: &'a [f32],
    pub phi: f32,
}

fn normalize(v: &mut [f32]) {
    let n = dot(v, v).sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

/// k-means over momentum-encoder representations; centroids are
/// unit-normalized afterwards and every sample is reassigned to its nearest
/// normalized centroid before densities are taken.
pub fn rebuild_centroids(reps: &RepMatrix, n_c: usize, cfg: &KMeansConfig) -> Result<CentroidBank> {
    if reps.source != RepSource::Momentum {
        return Err(Error::ConfigInvalid(
            "centroids must be built from momentum-encoder representations".into(),
        ));
    }
    let km = cluster::kmeans(&reps.reps, n_c, cfg)?;
    let mut centroids = km.centroids;
    let d = centroids.cols;
    for c in 0..n_c {
        normalize(&mut centroids.data[c * d..(c + 1) * d]);
    }
    let nearest: Vec<(usize, f64)> = crate::par::map_range(reps.reps.rows, |i| {
        let p = reps.reps.row(i);
        let mut best = (0, f64::INFINITY);
        for c in 0..n_c {
            let dist = cluster::squared_distance(p, centroids.row(c));
            if dist < best.1 {
                best = (c, dist);
            }
        }
        best
    });
    let mut member_counts = vec![0usize; n_c];
    let mut dists: Vec<Vec<f32>> = vec![Vec::new(); n_c];
    for &(c, d2) in &nearest {
        member_counts[c] += 1;
        dists[c].push(d2.sqrt() as f32);
    }
    // a cluster of one has zero spread; it takes the loosest proper density
    // instead of the floor, which would make it the sharpest temperature
    let proper = (0..n_c)
        .filter(|&c| member_counts[c] >= 2)
        .map(|c| cluster::density(&dists[c], member_counts[c]))
        .fold(None, |m: Option<f32>, v| Some(m.map_or(v, |m| m.max(v))));
    let phi: Vec<f32> = (0..n_c)
        .map(|c| match (member_counts[c], proper) {
            (0 | 1, Some(loosest)) => loosest,
            _ => cluster::density(&dists[c], member_counts[c]),
        })
        .collect();
    Ok(CentroidBank {
        centroids,
        phi,
        sample_ids: reps.sample_ids.clone(),
        assignment: nearest.into_iter().map(|(c, _)| c).collect(),
        member_counts,
    })
}

impl CentroidBank {
    pub fn len(&self) -> usize {
        self.centroids.rows
    }

    pub fn is_empty(&self) -> bool {
        self.centroids.rows == 0
    }

    /// All centroid indices by descending `z . c`, ties by index.
    pub fn ranking(&self, z: &[f32]) -> Vec<usize> {
        let scores: Vec<f32> = (0..self.len()).map(|c| dot(z, self.centroids.row(c))).collect();
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        order
    }

    /// Scales every density by a common factor so their mean is `target`.
    /// Relative sharpness between centroids is kept.
    pub fn rescale_density(&mut self, target: f32) {
        let mean = self.phi.iter().sum::<f32>() / self.phi.len().max(1) as f32;
        if mean > 0.0 && target > 0.0 {
            self.phi.iter_mut().for_each(|p| *p *= target / mean);
        }
    }

    /// [`Self::ranking`] of every row of `reps`.
    pub fn rankings(&self, reps: &Matrix) -> Vec<Vec<usize>> {
        crate::par::map_range(reps.rows, |i| self.ranking(reps.row(i)))
    }

    pub fn nearest_centroids(&self, z: &[f32], l: usize) -> Vec<NearCentroid<'_>> {
        self.ranking(z)
            .into_iter()
            .take(l)
            .map(|index| NearCentroid {
                index,
                centroid: self.centroids.row(index),
                phi: self.phi[index],
            })
            .collect()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        Tensor::new(vec![self.centroids.rows, self.centroids.cols], self.centroids.data.clone())?
            .write(&dir.join("centroids.owt"))?;
        Tensor::new(vec![self.phi.len()], self.phi.clone())?.write(&dir.join("phi.owt"))?;
        let index = CentroidIndex {
            sample_ids: self.sample_ids.clone(),
            assignment: self.assignment.clone(),
            member_counts: self.member_counts.clone(),
        };
        write_atomic(&dir.join("centroid_bank.json"), &serde_json::to_vec_pretty(&index)?)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("centroid_bank.json");
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let index: CentroidIndex = serde_json::from_slice(&bytes)?;
        let cpath = dir.join("centroids.owt");
        let c = Tensor::read(&cpath)?;
        let &[rows, cols] = c.dims() else {
            return Err(Error::format(&cpath, "centroid tensor must have rank 2"));
        };
        let phi = Tensor::read(&dir.join("phi.owt"))?.into_data();
        if phi.len() != rows || index.member_counts.len() != rows {
            return Err(Error::format(&cpath, "centroid bank parts disagree in size"));
        }
        Ok(Self {
            centroids: Matrix::new(rows, cols, c.into_data())?,
            phi,
            sample_ids: index.sample_ids,
            assignment: index.assignment,
            member_counts: index.member_counts,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct CentroidIndex {
    sample_ids: Vec<usize>,
    assignment: Vec<usize>,
    member_counts: Vec<usize>,
}

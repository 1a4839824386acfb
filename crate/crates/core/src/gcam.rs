//! Activation maps from class weights or cluster centroids, binarization,
//! largest-component extraction and box prediction, plus the end-to-end
//! localization/clustering evaluation of an encoder.

use serde::{Deserialize, Serialize};

use crate::banks::CentroidBank;
use crate::cluster::{self, KMeansConfig, Matrix};
use crate::data::{role_of, BoundingBox, CategoryTaxonomy, Sample};
use crate::encoder::{self, dot, EncoderParams, FeatureMap};
use crate::error::{Error, Result};
use crate::evalkit::{self, ClusterMapping, EvalReport, Outcome};
use crate::par;

pub const DEFAULT_THETA: f32 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Provenance {
    Cam(usize),
    Gcam(usize),
}

/// Raw (unnormalized) scores on the feature grid, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationMap {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
    pub provenance: Provenance,
}

impl ActivationMap {
    pub fn at(&self, i: usize, j: usize) -> f32 {
        self.data[i * self.w + j]
    }

    pub fn max(&self) -> f32 {
        self.data.iter().copied().fold(f32::NEG_INFINITY, f32::max)
    }

    /// Min-max normalized copy; constant maps normalize to all zeros.
    pub fn normalized(&self) -> Vec<f32> {
        let (lo, hi) = self
            .data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        let span = hi - lo;
        if !(span > 0.0) {
            return vec![0.0; self.data.len()];
        }
        self.data.iter().map(|&v| (v - lo) / span).collect()
    }
}

fn project_map(m: &FeatureMap, v: &[f32], provenance: Provenance) -> Result<ActivationMap> {
    if v.len() != m.d1 {
        return Err(Error::ShapeMismatch(format!(
            "weight has {} entries, feature map has {} channels",
            v.len(),
            m.d1
        )));
    }
    let plane = m.h * m.w;
    let mut data = vec![0.0f32; plane];
    for (c, &wc) in v.iter().enumerate() {
        for (d, &x) in data.iter_mut().zip(&m.data[c * plane..(c + 1) * plane]) {
            *d += wc * x;
        }
    }
    Ok(ActivationMap {
        h: m.h,
        w: m.w,
        data,
        provenance,
    })
}

/// `p(i,j) = w_k . m(i,j)`.
pub fn cam(m: &FeatureMap, w_k: &[f32], k: usize) -> Result<ActivationMap> {
    project_map(m, w_k, Provenance::Cam(k))
}

/// `p(i,j) = c_x . m(i,j)` for a feature-space centroid `c_x`.
pub fn gcam(m: &FeatureMap, c_x: &[f32], centroid_id: usize) -> Result<ActivationMap> {
    project_map(m, c_x, Provenance::Gcam(centroid_id))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BitMask {
    pub h: usize,
    pub w: usize,
    pub cells: Vec<bool>,
}

impl BitMask {
    pub fn count(&self) -> usize {
        self.cells.iter().filter(|&&c| c).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }
}

/// Cells whose min-max normalized score is at least `theta`. A constant map
/// gives all ones at `theta = 0` and all zeros otherwise.
pub fn binarize(map: &ActivationMap, theta: f32) -> BitMask {
    let norm = map.normalized();
    let constant = map.data.iter().all(|&v| v == map.data[0]);
    let cells = if constant {
        vec![theta <= 0.0; norm.len()]
    } else {
        norm.iter().map(|&v| v >= theta).collect()
    };
    BitMask {
        h: map.h,
        w: map.w,
        cells,
    }
}

/// Largest 8-connected component; ties go to the one found first in
/// row-major scan order.
pub fn largest_component(mask: &BitMask) -> BitMask {
    let (h, w) = (mask.h, mask.w);
    let mut label = vec![usize::MAX; h * w];
    let mut best: Option<(usize, usize)> = None;
    let mut next = 0;
    let mut stack = Vec::new();
    for start in 0..h * w {
        if !mask.cells[start] || label[start] != usize::MAX {
            continue;
        }
        let id = next;
        next += 1;
        let mut size = 0;
        label[start] = id;
        stack.push(start);
        while let Some(p) = stack.pop() {
            size += 1;
            let (i, j) = ((p / w) as isize, (p % w) as isize);
            for di in -1..=1 {
                for dj in -1..=1 {
                    let (ni, nj) = (i + di, j + dj);
                    if ni < 0 || nj < 0 || ni >= h as isize || nj >= w as isize {
                        continue;
                    }
                    let q = ni as usize * w + nj as usize;
                    if mask.cells[q] && label[q] == usize::MAX {
                        label[q] = id;
                        stack.push(q);
                    }
                }
            }
        }
        if best.is_none_or(|(_, s)| size > s) {
            best = Some((id, size));
        }
    }
    BitMask {
        h,
        w,
        cells: match best {
            Some((id, _)) => label.iter().map(|&l| l == id).collect(),
            None => vec![false; h * w],
        },
    }
}

/// Tight cell bound of `comp`, scaled to image pixels.
pub fn component_box(comp: &BitMask, image_w: usize, image_h: usize) -> Result<BoundingBox> {
    let mut bounds: Option<(usize, usize, usize, usize)> = None;
    for i in 0..comp.h {
        for j in 0..comp.w {
            if comp.cells[i * comp.w + j] {
                let b = bounds.get_or_insert((j, i, j, i));
                b.0 = b.0.min(j);
                b.1 = b.1.min(i);
                b.2 = b.2.max(j);
                b.3 = b.3.max(i);
            }
        }
    }
    let (x0, y0, x1, y1) = bounds.ok_or(Error::EmptyComponent)?;
    let sx = image_w / comp.w;
    let sy = image_h / comp.h;
    BoundingBox::new(
        (x0 * sx) as u32,
        (y0 * sy) as u32,
        ((x1 + 1) * sx) as u32,
        ((y1 + 1) * sy) as u32,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxPrediction {
    pub cluster_id: usize,
    pub bbox: BoundingBox,
    pub score: f32,
}

/// Box for one activation map. If thresholding leaves nothing (constant map),
/// the whole image is predicted.
pub fn box_from_map(map: &ActivationMap, cluster_id: usize, image_w: usize, image_h: usize, theta: f32) -> BoxPrediction {
    let comp = largest_component(&binarize(map, theta));
    let bbox = component_box(&comp, image_w, image_h).unwrap_or(BoundingBox {
        x_min: 0,
        y_min: 0,
        x_max: image_w as u32,
        y_max: image_h as u32,
    });
    BoxPrediction {
        cluster_id,
        bbox,
        score: map.max(),
    }
}

/// G-CAM localization of one feature map given its assigned cluster and the
/// cluster's feature-space centroid.
pub fn localize(m: &FeatureMap, cluster_id: usize, c_x: &[f32], image_w: usize, image_h: usize, theta: f32) -> Result<(ActivationMap, BoxPrediction)> {
    let map = gcam(m, c_x, cluster_id)?;
    let pred = box_from_map(&map, cluster_id, image_w, image_h, theta);
    Ok((map, pred))
}

/// Where evaluation clusters and their feature-space centroids come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ClusterSpace {
    /// k-means on pooled features `h` of the evaluated samples.
    Feature,
    /// k-means on projected `z` of the evaluated samples; centroids lifted to
    /// feature space as the mean `h` of each cluster's members.
    Projection,
    /// Nearest centroid of the training bank (by `z`); centroids lifted as
    /// the mean `h` of the bank's training members.
    TrainingBank,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub theta: f32,
    pub clusters: usize,
    pub space: ClusterSpace,
    pub kmeans: KMeansConfig,
}

impl EvalConfig {
    pub fn new(clusters: usize, seed: u64) -> Self {
        Self {
            theta: DEFAULT_THETA,
            clusters,
            space: ClusterSpace::Feature,
            kmeans: KMeansConfig {
                max_iters: 100,
                restarts: 4,
                seed,
            },
        }
    }
}

#[derive(Debug, Clone)]
pub struct Localization {
    pub sample_id: usize,
    pub map: ActivationMap,
    pub prediction: BoxPrediction,
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub report: EvalReport,
    pub mapping: ClusterMapping,
    pub outcomes: Vec<Outcome>,
    pub localizations: Vec<Localization>,
}

struct Extracted {
    map: FeatureMap,
    h: Vec<f32>,
    z: Vec<f32>,
}

fn extract(params: &EncoderParams, samples: &[&Sample], with_z: bool) -> Result<Vec<Extracted>> {
    par::map(samples, |s| {
        let trunk = encoder::forward_trunk(params, &s.image)?;
        let z = if with_z {
            encoder::project(params, &trunk.pooled)?.0
        } else {
            Vec::new()
        };
        Ok(Extracted {
            map: encoder::feature_map(&params.config, &trunk),
            h: trunk.pooled,
            z,
        })
    })
    .into_iter()
    .collect()
}

fn member_means(rows: &[Vec<f32>], assignment: &[usize], k: usize, dim: usize) -> Matrix {
    let mut sums = vec![0.0f64; k * dim];
    let mut counts = vec![0usize; k];
    for (r, &c) in rows.iter().zip(assignment) {
        counts[c] += 1;
        for (s, &v) in sums[c * dim..(c + 1) * dim].iter_mut().zip(r) {
            *s += v as f64;
        }
    }
    let data = sums
        .iter()
        .enumerate()
        .map(|(i, &s)| if counts[i / dim] > 0 { (s / counts[i / dim] as f64) as f32 } else { 0.0 })
        .collect();
    Matrix { rows: k, cols: dim, data }
}

/// Training bank centroids lifted to feature space, for
/// [`ClusterSpace::TrainingBank`].
#[derive(Debug, Clone, PartialEq)]
pub struct LiftedBank {
    pub z_centroids: Matrix,
    pub lifted: Matrix,
}

pub fn lift_bank(params: &EncoderParams, bank: &CentroidBank, training: &[&Sample]) -> Result<LiftedBank> {
    let by_id: std::collections::HashMap<usize, usize> =
        bank.sample_ids.iter().enumerate().map(|(row, &id)| (id, row)).collect();
    let mut rows = Vec::new();
    let mut assignment = Vec::new();
    let feats = extract(params, training, false)?;
    for (s, f) in training.iter().zip(feats) {
        if let Some(&row) = by_id.get(&s.id) {
            rows.push(f.h);
            assignment.push(bank.assignment[row]);
        }
    }
    Ok(LiftedBank {
        z_centroids: bank.centroids.clone(),
        lifted: member_means(&rows, &assignment, bank.len(), params.config.d1),
    })
}

/// Clusters the samples, localizes each one with the G-CAM of its cluster,
/// and scores everything with one Hungarian mapping over all samples.
pub fn evaluate(
    params: &EncoderParams,
    samples: &[&Sample],
    taxonomy: &CategoryTaxonomy,
    cfg: &EvalConfig,
    bank: Option<&LiftedBank>,
) -> Result<Evaluation> {
    let feats = extract(params, samples, cfg.space != ClusterSpace::Feature)?;
    let d1 = params.config.d1;
    let (assignment, centroids) = match cfg.space {
        ClusterSpace::Feature => {
            let hs = Matrix::from_rows(&feats.iter().map(|f| f.h.clone()).collect::<Vec<_>>())?;
            let km = cluster::kmeans(&hs, cfg.clusters, &cfg.kmeans)?;
            (km.assignment, km.centroids)
        }
        ClusterSpace::Projection => {
            let zs = Matrix::from_rows(&feats.iter().map(|f| f.z.clone()).collect::<Vec<_>>())?;
            let km = cluster::kmeans(&zs, cfg.clusters, &cfg.kmeans)?;
            let hs: Vec<Vec<f32>> = feats.iter().map(|f| f.h.clone()).collect();
            let lifted = member_means(&hs, &km.assignment, cfg.clusters, d1);
            (km.assignment, lifted)
        }
        ClusterSpace::TrainingBank => {
            let lb = bank.ok_or_else(|| Error::ConfigInvalid("training-bank evaluation needs a lifted bank".into()))?;
            let assignment = feats
                .iter()
                .map(|f| {
                    (0..lb.z_centroids.rows)
                        .max_by(|&a, &b| {
                            dot(&f.z, lb.z_centroids.row(a))
                                .total_cmp(&dot(&f.z, lb.z_centroids.row(b)))
                                .then(b.cmp(&a))
                        })
                        .unwrap_or(0)
                })
                .collect();
            (assignment, lb.lifted.clone())
        }
    };
    let side = params.config.image_side;
    let locs: Vec<Localization> = par::map_range(samples.len(), |i| {
        let c = assignment[i];
        let (map, prediction) = localize(&feats[i].map, c, centroids.row(c), side, side, cfg.theta)?;
        Ok(Localization {
            sample_id: samples[i].id,
            map,
            prediction,
        })
    })
    .into_iter()
    .collect::<Result<_>>()?;
    let outcomes: Vec<Outcome> = samples
        .iter()
        .zip(&locs)
        .map(|(s, l)| {
            let label = s.eval_label()?;
            Ok(Outcome {
                sample_id: s.id,
                label,
                role: role_of(taxonomy, label)?,
                cluster: l.prediction.cluster_id,
                pred_box: Some(l.prediction.bbox),
                gt_boxes: s.gt_boxes.clone(),
            })
        })
        .collect::<Result<_>>()?;
    let (report, mapping) = evalkit::evaluate_outcomes(&outcomes, &evalkit::IOU_RATIOS)?;
    Ok(Evaluation {
        report,
        mapping,
        outcomes,
        localizations: locs,
    })
}

/// Binary PGM (P5) of the normalized map, upsampled by `scale` per axis.
pub fn to_pgm(map: &ActivationMap, scale: usize) -> Vec<u8> {
    let norm = map.normalized();
    let (w, h) = (map.w * scale, map.h * scale);
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    for y in 0..h {
        for x in 0..w {
            let v = norm[(y / scale) * map.w + x / scale];
            out.push((v * 255.0).round().clamp(0.0, 255.0) as u8);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fmap(d1: usize, h: usize, w: usize, f: impl Fn(usize, usize, usize) -> f32) -> FeatureMap {
        let mut data = Vec::new();
        for c in 0..d1 {
            for i in 0..h {
                for j in 0..w {
                    data.push(f(c, i, j));
                }
            }
        }
        FeatureMap::new(d1, h, w, data).unwrap()
    }

    fn raw(h: usize, w: usize, data: Vec<f32>) -> ActivationMap {
        ActivationMap {
            h,
            w,
            data,
            provenance: Provenance::Cam(0),
        }
    }

    fn mask(h: usize, w: usize, bits: &[u8]) -> BitMask {
        BitMask {
            h,
            w,
            cells: bits.iter().map(|&b| b == 1).collect(),
        }
    }

    #[test]
    fn cam_basis_and_zero() {
        let m = fmap(3, 2, 2, |c, i, j| (c * 10 + i * 2 + j) as f32);
        let p = cam(&m, &[0.0, 1.0, 0.0], 0).unwrap();
        assert_eq!(p.data, vec![10.0, 11.0, 12.0, 13.0]);
        assert_eq!(cam(&m, &[0.0; 3], 0).unwrap().data, vec![0.0; 4]);
        assert!(cam(&m, &[0.0; 2], 0).is_err());
    }

    #[test]
    fn gcam_with_own_mean() {
        let m = fmap(2, 2, 2, |c, i, j| if c == 0 { (i + j) as f32 } else { (i * j) as f32 });
        let mean = encoder::pool(&m);
        assert_eq!(mean, vec![1.0, 0.25]);
        let p = gcam(&m, &mean, 0).unwrap();
        assert_eq!(p.data, vec![0.0, 1.0, 1.0, 2.25]);
    }

    #[test]
    fn binarize_examples() {
        let p = raw(2, 2, vec![0.0, 1.0, 0.5, 0.25]);
        assert_eq!(binarize(&p, 0.4), mask(2, 2, &[0, 1, 1, 0]));
        assert_eq!(binarize(&p, 0.0).count(), 4);
        assert_eq!(binarize(&p, 1.0), mask(2, 2, &[0, 1, 0, 0]));
        let flat = raw(1, 3, vec![2.0; 3]);
        assert_eq!(binarize(&flat, 0.0).count(), 3);
        assert_eq!(binarize(&flat, 0.5).count(), 0);
    }

    #[test]
    fn components() {
        #[rustfmt::skip]
        let m = mask(4, 4, &[
            1, 1, 0, 0,
            1, 0, 0, 1,
            0, 0, 1, 1,
            0, 0, 1, 1,
        ]);
        let big = largest_component(&m);
        assert_eq!(big.count(), 5);
        assert!(big.cells[7] && !big.cells[0]);
        let full = mask(2, 2, &[1, 1, 1, 1]);
        assert_eq!(largest_component(&full), full);
        let empty = mask(2, 2, &[0, 0, 0, 0]);
        assert_eq!(largest_component(&empty), empty);
        // diagonal neighbours connect; equal sizes keep the first found
        let diag = mask(3, 3, &[1, 0, 0, 0, 1, 0, 0, 0, 1]);
        assert_eq!(largest_component(&diag).count(), 3);
        let tie = mask(1, 3, &[1, 0, 1]);
        assert_eq!(largest_component(&tie), mask(1, 3, &[1, 0, 0]));
    }

    #[test]
    fn boxes() {
        let mut one = mask(4, 4, &[0; 16]);
        one.cells[4 + 2] = true;
        assert_eq!(component_box(&one, 16, 16).unwrap(), BoundingBox::new(8, 4, 12, 8).unwrap());
        let full = mask(4, 4, &[1; 16]);
        assert_eq!(component_box(&full, 16, 16).unwrap(), BoundingBox::new(0, 0, 16, 16).unwrap());
        let mut top = mask(4, 4, &[0; 16]);
        top.cells[..8].iter_mut().for_each(|c| *c = true);
        assert_eq!(component_box(&top, 16, 16).unwrap(), BoundingBox::new(0, 0, 16, 8).unwrap());
        assert!(matches!(component_box(&mask(2, 2, &[0; 4]), 8, 8), Err(Error::EmptyComponent)));
    }

    #[test]
    fn constant_map_falls_back_to_full_image() {
        let p = box_from_map(&raw(4, 4, vec![1.0; 16]), 3, 16, 16, 0.2);
        assert_eq!(p.bbox, BoundingBox::new(0, 0, 16, 16).unwrap());
        assert_eq!(p.cluster_id, 3);
    }

    #[test]
    fn pgm_layout() {
        let bytes = to_pgm(&raw(1, 2, vec![0.0, 4.0]), 2);
        let header = b"P5\n4 2\n255\n";
        assert_eq!(&bytes[..header.len()], header);
        assert_eq!(&bytes[header.len()..], &[0, 0, 255, 255, 0, 0, 255, 255]);
    }
}

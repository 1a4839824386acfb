//! Open-world evaluation: Hungarian cluster-to-class matching and the
//! Clus / Loc / Clus-Loc accuracies, reported per category role.
//!
//! Loc Acc judges each prediction against the sample's own ground-truth
//! boxes and ignores the cluster; Clus-Loc additionally requires the
//! Hungarian-mapped cluster to equal the ground-truth class. One mapping is
//! fit on the whole evaluation set and then sliced per role.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::{BoundingBox, CategoryId, Role};
use crate::error::{Error, Result};

pub const IOU_RATIOS: [f64; 3] = [0.3, 0.5, 0.7];

/// Minimum-cost assignment of a rectangular cost matrix.
///
/// The smaller side is implicitly padded with zero-cost dummies, so the
/// result holds `min(rows, cols)` `(row, col)` pairs sorted by row.
pub fn hungarian(cost: &[Vec<f64>]) -> Vec<(usize, usize)> {
    let rows = cost.len();
    let cols = cost.first().map_or(0, |r| r.len());
    if rows == 0 || cols == 0 {
        return Vec::new();
    }
    debug_assert!(cost.iter().all(|r| r.len() == cols));
    let n = rows.max(cols);
    let at = |i: usize, j: usize| -> f64 {
        if i < rows && j < cols {
            cost[i][j]
        } else {
            0.0
        }
    };

    // Shortest augmenting path with potentials, 1-based with a sentinel.
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = at(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out: Vec<(usize, usize)> = (1..=n)
        .filter(|&j| p[j] != 0 && p[j] - 1 < rows && j - 1 < cols)
        .map(|j| (p[j] - 1, j - 1))
        .collect();
    out.sort_unstable();
    out
}

/// Reporting bucket: one category role, or everything.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Group {
    Known,
    NovS,
    NovD,
    All,
}

impl Group {
    pub const ALL: [Group; 4] = [Group::Known, Group::NovS, Group::NovD, Group::All];

    pub fn of(role: Role) -> Group {
        match role {
            Role::Known => Group::Known,
            Role::NovS => Group::NovS,
            Role::NovD => Group::NovD,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Group::Known => "Known",
            Group::NovS => "NovS",
            Group::NovD => "NovD",
            Group::All => "All",
        }
    }
}

/// Per-group mean of a per-sample score; groups without samples are absent.
pub type GroupScores = BTreeMap<Group, f64>;

fn group_means(roles: &[Role], score: impl Fn(usize) -> f64) -> GroupScores {
    let mut sums: BTreeMap<Group, (f64, usize)> = BTreeMap::new();
    for (i, &role) in roles.iter().enumerate() {
        let s = score(i);
        for g in [Group::of(role), Group::All] {
            let e = sums.entry(g).or_insert((0.0, 0));
            e.0 += s;
            e.1 += 1;
        }
    }
    sums.into_iter()
        .map(|(g, (s, n))| (g, s / n as f64))
        .collect()
}

/// Cluster id to class id, as fixed by the Hungarian matching.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterMapping(pub BTreeMap<usize, CategoryId>);

impl ClusterMapping {
    pub fn class_of(&self, cluster: usize) -> Option<CategoryId> {
        self.0.get(&cluster).copied()
    }

    pub fn is_correct(&self, cluster: usize, label: CategoryId) -> bool {
        self.class_of(cluster) == Some(label)
    }
}

/// Fits the count-maximizing one-to-one cluster/class mapping.
pub fn fit_mapping(pred_clusters: &[usize], gt_labels: &[CategoryId]) -> Result<ClusterMapping> {
    if pred_clusters.len() != gt_labels.len() {
        return Err(Error::LengthMismatch(pred_clusters.len(), gt_labels.len()));
    }
    let clusters: Vec<usize> = {
        let mut v = pred_clusters.to_vec();
        v.sort_unstable();
        v.dedup();
        v
    };
    let classes: Vec<CategoryId> = {
        let mut v = gt_labels.to_vec();
        v.sort_unstable();
        v.dedup();
        v
    };
    let ci: BTreeMap<usize, usize> = clusters.iter().enumerate().map(|(i, &c)| (c, i)).collect();
    let li: BTreeMap<CategoryId, usize> = classes.iter().enumerate().map(|(i, &c)| (c, i)).collect();
    let mut counts = vec![vec![0.0; classes.len()]; clusters.len()];
    for (&c, &l) in pred_clusters.iter().zip(gt_labels) {
        counts[ci[&c]][li[&l]] += 1.0;
    }
    let cost: Vec<Vec<f64>> = counts
        .iter()
        .map(|r| r.iter().map(|&v| -v).collect())
        .collect();
    let mapping = hungarian(&cost)
        .into_iter()
        .map(|(r, c)| (clusters[r], classes[c]))
        .collect();
    Ok(ClusterMapping(mapping))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterScore {
    pub accuracy: GroupScores,
    pub mapping: ClusterMapping,
}

pub fn clus_acc(pred_clusters: &[usize], gt_labels: &[CategoryId], roles: &[Role]) -> Result<ClusterScore> {
    if roles.len() != gt_labels.len() {
        return Err(Error::LengthMismatch(roles.len(), gt_labels.len()));
    }
    let mapping = fit_mapping(pred_clusters, gt_labels)?;
    let accuracy = group_means(roles, |i| {
        mapping.is_correct(pred_clusters[i], gt_labels[i]) as u8 as f64
    });
    Ok(ClusterScore { accuracy, mapping })
}

pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let ix = a.x_max.min(b.x_max).saturating_sub(a.x_min.max(b.x_min)) as u64;
    let iy = a.y_max.min(b.y_max).saturating_sub(a.y_min.max(b.y_min)) as u64;
    let inter = ix * iy;
    let union = a.area() + b.area() - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

pub fn best_iou(pred: &BoundingBox, gts: &[BoundingBox]) -> f64 {
    gts.iter().map(|g| iou(pred, g)).fold(0.0, f64::max)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocScore {
    /// Mean over the IoU ratios.
    pub mean: GroupScores,
    pub per_ratio: Vec<(f64, GroupScores)>,
}

fn best_ious(preds: &[Option<BoundingBox>], gt_boxes: &[Vec<BoundingBox>], roles: &[Role]) -> Result<Vec<f64>> {
    if preds.len() != gt_boxes.len() {
        return Err(Error::LengthMismatch(preds.len(), gt_boxes.len()));
    }
    if roles.len() != preds.len() {
        return Err(Error::LengthMismatch(roles.len(), preds.len()));
    }
    preds
        .iter()
        .zip(gt_boxes)
        .enumerate()
        .map(|(i, (p, g))| p.as_ref().map(|b| best_iou(b, g)).ok_or(Error::MissingPrediction(i)))
        .collect()
}

fn loc_score(roles: &[Role], ratios: &[f64], correct: impl Fn(usize, f64) -> bool) -> LocScore {
    let per_ratio: Vec<(f64, GroupScores)> = ratios
        .iter()
        .map(|&r| (r, group_means(roles, |i| correct(i, r) as u8 as f64)))
        .collect();
    let mut mean = GroupScores::new();
    for (_, scores) in &per_ratio {
        for (g, v) in scores {
            *mean.entry(*g).or_insert(0.0) += v / ratios.len() as f64;
        }
    }
    LocScore { mean, per_ratio }
}

pub fn loc_acc(
    preds: &[Option<BoundingBox>],
    gt_boxes: &[Vec<BoundingBox>],
    roles: &[Role],
    ratios: &[f64],
) -> Result<LocScore> {
    let ious = best_ious(preds, gt_boxes, roles)?;
    Ok(loc_score(roles, ratios, |i, r| ious[i] >= r))
}

#[allow(clippy::too_many_arguments)]
pub fn clus_loc_acc(
    preds: &[Option<BoundingBox>],
    pred_clusters: &[usize],
    mapping: &ClusterMapping,
    gt_labels: &[CategoryId],
    gt_boxes: &[Vec<BoundingBox>],
    roles: &[Role],
    ratios: &[f64],
) -> Result<LocScore> {
    let ious = best_ious(preds, gt_boxes, roles)?;
    if pred_clusters.len() != preds.len() || gt_labels.len() != preds.len() {
        return Err(Error::LengthMismatch(pred_clusters.len(), preds.len()));
    }
    Ok(loc_score(roles, ratios, |i, r| {
        mapping.is_correct(pred_clusters[i], gt_labels[i]) && ious[i] >= r
    }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioMetrics {
    pub ratio: f64,
    pub loc_acc: f64,
    pub clus_loc_acc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupMetrics {
    pub samples: usize,
    pub clus_acc: f64,
    pub clus_loc_acc: f64,
    pub loc_acc: f64,
    pub by_ratio: Vec<RatioMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub groups: BTreeMap<Group, GroupMetrics>,
}

impl EvalReport {
    pub fn get(&self, g: Group) -> Option<&GroupMetrics> {
        self.groups.get(&g)
    }

    /// One `(group, metric, ratio, value)` row per entry; `ratio` is `mean`
    /// for ratio-averaged values.
    pub fn csv_rows(&self) -> Vec<String> {
        let mut rows = vec!["group,metric,ratio,value".to_string()];
        for (g, m) in &self.groups {
            let name = g.name();
            rows.push(format!("{name},clus_acc,mean,{:.6}", m.clus_acc));
            rows.push(format!("{name},loc_acc,mean,{:.6}", m.loc_acc));
            rows.push(format!("{name},clus_loc_acc,mean,{:.6}", m.clus_loc_acc));
            for r in &m.by_ratio {
                rows.push(format!("{name},loc_acc,{:.1},{:.6}", r.ratio, r.loc_acc));
                rows.push(format!("{name},clus_loc_acc,{:.1},{:.6}", r.ratio, r.clus_loc_acc));
            }
        }
        rows
    }
}

/// Per-sample evaluation record.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub sample_id: usize,
    pub label: CategoryId,
    pub role: Role,
    pub cluster: usize,
    pub pred_box: Option<BoundingBox>,
    pub gt_boxes: Vec<BoundingBox>,
}

/// Builds the full report; the cluster mapping is fit once on all outcomes.
pub fn evaluate_outcomes(outcomes: &[Outcome], ratios: &[f64]) -> Result<(EvalReport, ClusterMapping)> {
    let clusters: Vec<usize> = outcomes.iter().map(|o| o.cluster).collect();
    let labels: Vec<CategoryId> = outcomes.iter().map(|o| o.label).collect();
    let roles: Vec<Role> = outcomes.iter().map(|o| o.role).collect();
    let preds: Vec<Option<BoundingBox>> = outcomes.iter().map(|o| o.pred_box).collect();
    let gts: Vec<Vec<BoundingBox>> = outcomes.iter().map(|o| o.gt_boxes.clone()).collect();

    let clus = clus_acc(&clusters, &labels, &roles)?;
    let loc = loc_acc(&preds, &gts, &roles, ratios)?;
    let cl = clus_loc_acc(&preds, &clusters, &clus.mapping, &labels, &gts, &roles, ratios)?;

    let mut counts: BTreeMap<Group, usize> = BTreeMap::new();
    for &r in &roles {
        *counts.entry(Group::of(r)).or_default() += 1;
        *counts.entry(Group::All).or_default() += 1;
    }
    let groups = counts
        .into_iter()
        .map(|(g, n)| {
            let by_ratio = loc
                .per_ratio
                .iter()
                .zip(&cl.per_ratio)
                .map(|((r, l), (_, c))| RatioMetrics {
                    ratio: *r,
                    loc_acc: l[&g],
                    clus_loc_acc: c[&g],
                })
                .collect();
            (
                g,
                GroupMetrics {
                    samples: n,
                    clus_acc: clus.accuracy[&g],
                    clus_loc_acc: cl.mean[&g],
                    loc_acc: loc.mean[&g],
                    by_ratio,
                },
            )
        })
        .collect();
    Ok((EvalReport { groups }, clus.mapping))
}

/// Mean Loc Acc over the outcomes whose label is in `classes`.
pub fn loc_acc_for_classes(outcomes: &[Outcome], classes: &[CategoryId], ratios: &[f64]) -> Option<f64> {
    let picked: Vec<f64> = outcomes
        .iter()
        .filter(|o| classes.contains(&o.label))
        .filter_map(|o| o.pred_box.map(|b| best_iou(&b, &o.gt_boxes)))
        .collect();
    if picked.is_empty() {
        return None;
    }
    let per_ratio: f64 = ratios
        .iter()
        .map(|&r| picked.iter().filter(|&&v| v >= r).count() as f64 / picked.len() as f64)
        .sum();
    Some(per_ratio / ratios.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(x0: u32, y0: u32, x1: u32, y1: u32) -> BoundingBox {
        BoundingBox::new(x0, y0, x1, y1).unwrap()
    }

    fn total(cost: &[Vec<f64>], m: &[(usize, usize)]) -> f64 {
        m.iter().map(|&(r, c)| cost[r][c]).sum()
    }

    #[test]
    fn hungarian_small_cases() {
        let cost = vec![vec![1.0, 2.0], vec![2.0, 1.0]];
        let m = hungarian(&cost);
        assert_eq!(m, vec![(0, 0), (1, 1)]);
        assert_eq!(total(&cost, &m), 2.0);

        let n = 4;
        let cost: Vec<Vec<f64>> = (0..n)
            .map(|i| (0..n).map(|j| if i == j { 0.0 } else { 1.0 }).collect())
            .collect();
        let m = hungarian(&cost);
        assert_eq!(m, (0..n).map(|i| (i, i)).collect::<Vec<_>>());
        assert_eq!(total(&cost, &m), 0.0);
    }

    #[test]
    fn hungarian_rectangular() {
        let wide = vec![vec![5.0, 1.0, 9.0], vec![1.0, 5.0, 9.0]];
        assert_eq!(hungarian(&wide), vec![(0, 1), (1, 0)]);
        let tall = vec![vec![5.0], vec![1.0], vec![3.0]];
        assert_eq!(hungarian(&tall), vec![(1, 0)]);
        assert!(hungarian(&[]).is_empty());
    }

    #[test]
    fn clus_acc_examples() {
        // permutation of ids
        let pred = [2, 2, 0, 0, 1];
        let gt = [10, 10, 11, 11, 12];
        let roles = [Role::Known, Role::Known, Role::NovS, Role::NovS, Role::NovD];
        let s = clus_acc(&pred, &gt, &roles).unwrap();
        assert!(s.accuracy.values().all(|&v| v == 1.0));

        // contingency [[3,1],[0,4]]: best mapping is diagonal, 7/8
        let pred = [0, 0, 0, 0, 1, 1, 1, 1];
        let gt = [0, 0, 0, 1, 1, 1, 1, 1];
        let roles = [Role::Known; 8];
        let s = clus_acc(&pred, &gt, &roles).unwrap();
        assert_eq!(s.accuracy[&Group::All], 0.875);
        assert!(!s.accuracy.contains_key(&Group::NovS));

        // three clusters, two classes: the unmatched cluster scores zero
        let pred = [0, 0, 1, 1, 2];
        let gt = [0, 0, 1, 1, 1];
        let s = clus_acc(&pred, &gt, &[Role::Known; 5]).unwrap();
        assert_eq!(s.accuracy[&Group::All], 0.8);
        assert_eq!(s.mapping.class_of(2), None);

        assert!(matches!(clus_acc(&[0], &[0, 1], &[Role::Known]), Err(Error::LengthMismatch(..))));
    }

    #[test]
    fn iou_examples() {
        let a = b(0, 0, 4, 4);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &b(4, 0, 8, 4)), 0.0);
        assert!((iou(&a, &b(2, 0, 6, 4)) - 8.0 / 24.0).abs() < 1e-12);
        assert_eq!(iou(&a, &b(2, 0, 6, 4)), iou(&b(2, 0, 6, 4), &a));
    }

    #[test]
    fn loc_acc_examples() {
        let gts = vec![vec![b(0, 0, 10, 10)]; 2];
        let roles = [Role::Known, Role::NovD];
        let exact = vec![Some(b(0, 0, 10, 10)); 2];
        let s = loc_acc(&exact, &gts, &roles, &IOU_RATIOS).unwrap();
        assert_eq!(s.mean[&Group::All], 1.0);

        // IoU 60/100 = 0.6: passes 0.3 and 0.5, fails 0.7
        let partial = vec![Some(b(0, 0, 6, 10)); 2];
        let s = loc_acc(&partial, &gts, &roles, &IOU_RATIOS).unwrap();
        assert!((s.mean[&Group::All] - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(s.per_ratio[2].1[&Group::NovD], 0.0);

        let missing = vec![Some(b(0, 0, 6, 10)), None];
        assert!(matches!(
            loc_acc(&missing, &gts, &roles, &IOU_RATIOS),
            Err(Error::MissingPrediction(1))
        ));
    }

    #[test]
    fn clus_loc_conjunction() {
        let gts = vec![vec![b(0, 0, 4, 4)]; 4];
        let preds = vec![Some(b(0, 0, 4, 4)); 4];
        let roles = [Role::Known; 4];
        let labels = [0, 0, 1, 1];
        // clusters: half right under the best mapping
        let clusters = [0, 1, 1, 0];
        let clus = clus_acc(&clusters, &labels, &roles).unwrap();
        assert_eq!(clus.accuracy[&Group::All], 0.5);
        let cl = clus_loc_acc(&preds, &clusters, &clus.mapping, &labels, &gts, &roles, &IOU_RATIOS).unwrap();
        assert_eq!(cl.mean[&Group::All], 0.5);
    }
}

//! Canned desk-scale experiments: loss ablation, sensitivity to the number
//! of positive centroids and of clusters, and the zero-shot protocol.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::cluster::{self, ClassCountEstimate, KMeansConfig, Matrix};
use crate::data::{CategoryId, DatasetSplit, Role, Sample, SplitRole};
use crate::encoder::{self, EncoderParams};
use crate::error::Result;
use crate::evalkit::{self, EvalReport, Group, GroupMetrics};
use crate::par;
use crate::gcam::{self, ClusterSpace, EvalConfig, Evaluation};
use crate::rng::{self, Domain};
use crate::trainer::{self, Mode, TrainConfig, TrainOutcome};

pub const L_GRID: [usize; 4] = [1, 5, 10, 15];

/// Evaluation settings matching a dataset: one cluster per category.
pub fn eval_config_for(dataset: &DatasetSplit, seed: u64) -> EvalConfig {
    EvalConfig::new(dataset.taxonomy.len(), seed)
}

pub fn evaluate_outcome(outcome: &TrainOutcome, dataset: &DatasetSplit, eval: &EvalConfig) -> Result<Evaluation> {
    let test: Vec<&Sample> = dataset.test.iter().collect();
    evaluate_samples(outcome, dataset, &test, eval)
}

/// Evaluates `samples`; `dataset` supplies the taxonomy and, for the
/// training-bank space, the training samples behind the bank.
pub fn evaluate_samples(
    outcome: &TrainOutcome,
    dataset: &DatasetSplit,
    samples: &[&Sample],
    eval: &EvalConfig,
) -> Result<Evaluation> {
    let lifted = match (eval.space, &outcome.centroid_bank) {
        (ClusterSpace::TrainingBank, Some(bank)) => {
            let training: Vec<&Sample> = dataset.training().collect();
            Some(gcam::lift_bank(&outcome.state.online, bank, &training)?)
        }
        _ => None,
    };
    gcam::evaluate(&outcome.state.online, samples, &dataset.taxonomy, eval, lifted.as_ref())
}

/// Pooled features `h` of `samples`, one row each.
pub fn feature_matrix(params: &EncoderParams, samples: &[&Sample]) -> Result<Matrix> {
    let rows: Vec<Vec<f32>> = par::map(samples, |s| encoder::forward_trunk(params, &s.image).map(|t| t.pooled))
        .into_iter()
        .collect::<Result<_>>()?;
    Matrix::from_rows(&rows)
}

/// Class-count estimate over the features of every training sample, scored
/// on the labeled ones.
pub fn estimate_k(params: &EncoderParams, dataset: &DatasetSplit, k_min: usize, k_max: usize, seed: u64) -> Result<ClassCountEstimate> {
    let training: Vec<&Sample> = dataset.training().collect();
    let reps = feature_matrix(params, &training)?;
    let labeled: Vec<(usize, CategoryId)> = training
        .iter()
        .enumerate()
        .filter(|(_, s)| s.split_role == SplitRole::Labeled)
        .map(|(i, s)| s.training_label().map(|y| (i, y)))
        .collect::<Result<_>>()?;
    let cfg = KMeansConfig {
        max_iters: 100,
        restarts: 2,
        seed,
    };
    cluster::estimate_class_count(&reps, &labeled, k_min, k_max, &cfg)
}

/// Per-group, per-field median of several reports of the same shape.
pub fn median_report(reports: &[EvalReport]) -> EvalReport {
    let Some(first) = reports.first() else {
        return EvalReport { groups: Default::default() };
    };
    let mut out = first.clone();
    for (g, m) in out.groups.iter_mut() {
        let col = |f: &dyn Fn(&GroupMetrics) -> f64| median(reports.iter().filter_map(|r| r.get(*g)).map(f).collect());
        m.clus_acc = col(&|x| x.clus_acc);
        m.loc_acc = col(&|x| x.loc_acc);
        m.clus_loc_acc = col(&|x| x.clus_loc_acc);
        for (i, r) in m.by_ratio.iter_mut().enumerate() {
            r.loc_acc = col(&|x| x.by_ratio.get(i).map_or(f64::NAN, |b| b.loc_acc));
            r.clus_loc_acc = col(&|x| x.by_ratio.get(i).map_or(f64::NAN, |b| b.clus_loc_acc));
        }
    }
    out
}

pub fn train_and_evaluate(dataset: &DatasetSplit, cfg: &TrainConfig, eval: &EvalConfig) -> Result<(TrainOutcome, Evaluation)> {
    let outcome = trainer::train(dataset, cfg)?;
    let evaluation = evaluate_outcome(&outcome, dataset, eval)?;
    Ok((outcome, evaluation))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeRow {
    pub mode: Mode,
    pub report: EvalReport,
}

pub fn ablation(dataset: &DatasetSplit, base: &TrainConfig, eval: &EvalConfig) -> Result<Vec<ModeRow>> {
    Mode::ALL
        .into_iter()
        .map(|mode| {
            let cfg = TrainConfig {
                mode,
                checkpoint_dir: None,
                ..base.clone()
            };
            let (_, e) = train_and_evaluate(dataset, &cfg, eval)?;
            Ok(ModeRow { mode, report: e.report })
        })
        .collect()
}

fn metric(report: &EvalReport, g: Group, loc: bool) -> f64 {
    report
        .get(g)
        .map_or(f64::NAN, |m| if loc { m.loc_acc } else { m.clus_acc })
}

/// One row per mode with Clus and Loc accuracy for each role.
pub fn ablation_csv(rows: &[ModeRow]) -> String {
    let groups = [Group::Known, Group::NovS, Group::NovD];
    let mut s = String::from("mode");
    for metric_name in ["clus", "loc"] {
        for g in groups {
            s.push_str(&format!(",{metric_name}_{}", g.name()));
        }
    }
    s.push('\n');
    for r in rows {
        s.push_str(r.mode.name());
        for loc in [false, true] {
            for g in groups {
                s.push_str(&format!(",{:.4}", metric(&r.report, g, loc)));
            }
        }
        s.push('\n');
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: usize,
    pub report: EvalReport,
}

/// Co-learning with each `L` in `grid`. The negative count is capped so that
/// `L + n_neg` never exceeds the number of centroids.
pub fn sensitivity_l(dataset: &DatasetSplit, base: &TrainConfig, eval: &EvalConfig, grid: &[usize]) -> Result<Vec<SweepRow>> {
    grid.iter()
        .map(|&l| {
            let mut cfg = TrainConfig {
                mode: Mode::Colearn,
                checkpoint_dir: None,
                ..base.clone()
            };
            cfg.hyper.l_pos = l;
            cfg.hyper.n_neg = cfg.hyper.n_neg.min(cfg.hyper.n_c.saturating_sub(l));
            let (_, e) = train_and_evaluate(dataset, &cfg, eval)?;
            Ok(SweepRow { value: l, report: e.report })
        })
        .collect()
}

/// Co-learning with each centroid count in `grid`; `L` and the negative
/// count are capped to fit.
pub fn sensitivity_nc(dataset: &DatasetSplit, base: &TrainConfig, eval: &EvalConfig, grid: &[usize]) -> Result<Vec<SweepRow>> {
    grid.iter()
        .map(|&n_c| {
            let mut cfg = TrainConfig {
                mode: Mode::Colearn,
                checkpoint_dir: None,
                ..base.clone()
            };
            cfg.hyper.n_c = n_c;
            cfg.hyper.l_pos = cfg.hyper.l_pos.min(n_c.saturating_sub(1)).max(1);
            cfg.hyper.n_neg = cfg.hyper.n_neg.min(n_c.saturating_sub(cfg.hyper.l_pos));
            let (_, e) = train_and_evaluate(dataset, &cfg, eval)?;
            Ok(SweepRow { value: n_c, report: e.report })
        })
        .collect()
}

pub fn sweep_csv(name: &str, rows: &[SweepRow]) -> String {
    let mut s = format!("{name},group,clus_acc,clus_loc_acc,loc_acc\n");
    for r in rows {
        for (g, m) in &r.report.groups {
            s.push_str(&format!(
                "{},{},{:.4},{:.4},{:.4}\n",
                r.value,
                g.name(),
                m.clus_acc,
                m.clus_loc_acc,
                m.loc_acc
            ));
        }
    }
    s
}

/// Novel categories split into those kept in the unlabeled training data
/// and those held out of training entirely.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NovelPartition {
    pub seen: Vec<CategoryId>,
    pub held_out: Vec<CategoryId>,
}

pub fn partition_novel(dataset: &DatasetSplit, held_fraction: f64, seed: u64) -> NovelPartition {
    let mut novel: Vec<CategoryId> = dataset.taxonomy.with_role(Role::NovS);
    novel.extend(dataset.taxonomy.with_role(Role::NovD));
    novel.shuffle(&mut rng::keyed(seed, Domain::Split, 0));
    let held = ((novel.len() as f64 * held_fraction).round() as usize).min(novel.len());
    let mut held_out = novel.split_off(novel.len() - held);
    novel.sort_unstable();
    held_out.sort_unstable();
    NovelPartition { seen: novel, held_out }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZeroShotReport {
    pub partition: NovelPartition,
    /// Held-out-class Loc Acc when those classes were in training.
    pub trained_loc_acc: f64,
    /// Held-out-class Loc Acc when they never appeared in training.
    pub held_out_loc_acc: f64,
    pub trained: EvalReport,
    pub zero_shot: EvalReport,
}

pub fn zeroshot(dataset: &DatasetSplit, base: &TrainConfig, eval: &EvalConfig, held_fraction: f64) -> Result<ZeroShotReport> {
    let partition = partition_novel(dataset, held_fraction, base.hyper.seed);
    let cfg = TrainConfig {
        checkpoint_dir: None,
        ..base.clone()
    };
    let (_, full) = train_and_evaluate(dataset, &cfg, eval)?;
    let reduced = dataset.without_unlabeled_classes(&partition.held_out);
    let (_, zs) = train_and_evaluate(&reduced, &cfg, eval)?;
    let loc = |e: &Evaluation| {
        evalkit::loc_acc_for_classes(&e.outcomes, &partition.held_out, &evalkit::IOU_RATIOS).unwrap_or(f64::NAN)
    };
    Ok(ZeroShotReport {
        trained_loc_acc: loc(&full),
        held_out_loc_acc: loc(&zs),
        partition,
        trained: full.report,
        zero_shot: zs.report,
    })
}

pub fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

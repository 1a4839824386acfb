//! Co-learning loop over the two banks, its ablation variants, and the
//! parametric cross-entropy baseline.

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::banks::{self, CentroidBank, RepBank, RepMatrix, RepSource};
use crate::checkpoint::Checkpoint;
use crate::cluster::{KMeansConfig, Matrix};
use crate::data::{CategoryId, DatasetSplit, Sample, SplitRole, ToyImage};
use rand::Rng as _;
use crate::encoder::{
    self, backward_into, momentum_update, sgd_step, sgd_update, EncoderConfig, EncoderParams, EncoderState, Linear,
    SgdConfig,
};
use crate::error::{Error, Result};
use crate::losses::{self, LossOutput};
use crate::par;
use crate::params::HyperParams;
use crate::rng::{self, Domain};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Colearn,
    SclOnly,
    SclOcl,
    CeBaseline,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::CeBaseline, Mode::SclOnly, Mode::SclOcl, Mode::Colearn];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Colearn => "colearn",
            Mode::SclOnly => "scl_only",
            Mode::SclOcl => "scl_ocl",
            Mode::CeBaseline => "ce_baseline",
        }
    }

    pub fn parse(s: &str) -> Result<Mode> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::ConfigInvalid(format!("unknown mode {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub hyper: HyperParams,
    pub encoder: EncoderConfig,
    pub mode: Mode,
    pub recluster_every: usize,
    /// When set, a checkpoint is written after every epoch and per-epoch
    /// stats are appended to `history.jsonl`.
    pub checkpoint_dir: Option<PathBuf>,
}

impl TrainConfig {
    pub fn new(hyper: HyperParams, mode: Mode) -> Self {
        Self {
            hyper,
            encoder: EncoderConfig::default(),
            mode,
            recluster_every: 1,
            checkpoint_dir: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.hyper.validate()?;
        self.encoder.validate()?;
        if self.recluster_every == 0 {
            return Err(Error::ConfigInvalid("recluster_every must be >= 1".into()));
        }
        Ok(())
    }

    fn sgd(&self) -> SgdConfig {
        SgdConfig {
            lr: self.hyper.lr,
            weight_decay: self.hyper.weight_decay,
            momentum: self.hyper.sgd_momentum,
        }
    }

    fn kmeans(&self, round: usize) -> KMeansConfig {
        KMeansConfig {
            max_iters: self.hyper.kmeans_iters,
            restarts: self.hyper.kmeans_restarts,
            seed: self.hyper.seed.wrapping_mul(1_000_003).wrapping_add(round as u64),
        }
    }
}

/// Linear classifier on pooled features; row `k` of the weight is the class
/// vector used for CAM.
#[derive(Debug, Clone, PartialEq)]
pub struct CEHead {
    pub classes: Vec<CategoryId>,
    pub linear: Linear,
}

impl CEHead {
    pub fn class_weight(&self, k: usize) -> &[f32] {
        &self.linear.weight[k * self.linear.inputs..(k + 1) * self.linear.inputs]
    }

    pub fn logits(&self, h: &[f32]) -> Vec<f32> {
        let mut out = vec![0.0; self.linear.outputs];
        self.linear.forward(h, &mut out);
        out
    }

    pub fn predict(&self, h: &[f32]) -> CategoryId {
        let l = self.logits(h);
        let k = (0..l.len()).fold(0, |b, k| if l[k] > l[b] { k } else { b });
        self.classes[k]
    }
}

pub fn init_state(encoder: EncoderConfig, seed: u64) -> Result<EncoderState> {
    Ok(EncoderState::new(EncoderParams::init(encoder, &mut rng::keyed(seed, Domain::Init, 0))?))
}

/// Momentum-encoder representations of the given samples.
pub fn extract_momentum(state: &EncoderState, samples: &[&Sample]) -> Result<RepMatrix> {
    let rows: Vec<Vec<f32>> = par::map(samples, |s| encoder::represent(&state.momentum, &s.image).map(|r| r.0))
        .into_iter()
        .collect::<Result<_>>()?;
    Ok(RepMatrix {
        source: RepSource::Momentum,
        sample_ids: samples.iter().map(|s| s.id).collect(),
        reps: Matrix::from_rows(&rows)?,
    })
}

fn build_centroids(reps: &RepMatrix, cfg: &TrainConfig, round: usize) -> Result<CentroidBank> {
    let mut bank = banks::rebuild_centroids(reps, cfg.hyper.n_c, &cfg.kmeans(round))?;
    bank.rescale_density(cfg.hyper.density_mean);
    Ok(bank)
}

/// Random translation by up to `shift` pixels per axis, keyed by
/// `(seed, index)`. `shift == 0` returns the image unchanged.
pub fn augment(image: &ToyImage, shift: usize, seed: u64, index: u64) -> ToyImage {
    if shift == 0 {
        return image.clone();
    }
    let m = shift as i32;
    let mut r = rng::keyed(seed, Domain::Augment, index);
    image.shifted(r.random_range(-m..=m), r.random_range(-m..=m))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prepared {
    pub rep_bank: RepBank,
    pub centroid_bank: CentroidBank,
    pub rep_cache: RepMatrix,
}

pub fn prepare(dataset: &DatasetSplit, state: &EncoderState, cfg: &TrainConfig) -> Result<Prepared> {
    let training: Vec<&Sample> = dataset.training().collect();
    let rep_cache = extract_momentum(state, &training)?;
    let mut class_reps: BTreeMap<CategoryId, Vec<Vec<f32>>> = BTreeMap::new();
    for (row, s) in training.iter().enumerate() {
        if s.split_role == SplitRole::Labeled {
            class_reps
                .entry(s.training_label()?)
                .or_default()
                .push(rep_cache.reps.row(row).to_vec());
        }
    }
    let rep_bank = banks::init_rep_bank(&class_reps, &dataset.taxonomy.known(), cfg.hyper.n_z, cfg.hyper.seed)?;
    let centroid_bank = build_centroids(&rep_cache, cfg, 0)?;
    Ok(Prepared {
        rep_bank,
        centroid_bank,
        rep_cache,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub steps: usize,
    pub labeled: usize,
    pub unlabeled: usize,
    /// Mean weighted objective over all anchors.
    pub total: f64,
    /// Mean supervised term over labeled anchors (0 when there are none).
    pub scl: f64,
    /// Mean centroid term over anchors that received one.
    pub centroid: f64,
}

struct ItemResult {
    total: f64,
    scl: Option<f64>,
    centroid: Option<f64>,
    grads: EncoderParams,
}

fn item_loss(
    cfg: &TrainConfig,
    s: &Sample,
    state: &EncoderState,
    rep_bank: &RepBank,
    centroids: &CentroidBank,
    ranking: &[usize],
    rng_index: u64,
) -> Result<ItemResult> {
    let h = &cfg.hyper;
    let image = augment(&s.image, h.augment_shift, h.seed, rng_index);
    let cache = encoder::forward(&state.online, &image)?;
    let z = &cache.z;
    let label = match s.split_role {
        SplitRole::Labeled => Some(s.training_label()?),
        _ => None,
    };
    let scl = match label {
        Some(y) => Some(losses::scl_loss(z, y, rep_bank, h.tau)?),
        None => None,
    };
    let centroid = match cfg.mode {
        Mode::Colearn => {
            let mut r = rng::keyed(h.seed, Domain::Negatives, rng_index);
            Some(losses::mcl_loss_ranked(z, centroids, ranking, h.l_pos, h.n_neg, h.positive_logit, &mut r)?)
        }
        Mode::SclOcl => Some(losses::ocl_loss_ranked(z, centroids, ranking[0])?),
        Mode::SclOnly | Mode::CeBaseline => None,
    };
    let zero = LossOutput::zero(z.len());
    let (alpha, beta) = (if scl.is_some() { h.alpha } else { 0.0 }, if centroid.is_some() { h.beta } else { 0.0 });
    let total = losses::total_loss(scl.as_ref().unwrap_or(&zero), centroid.as_ref().unwrap_or(&zero), alpha, beta);
    let mut grads = state.online.zeros_like();
    if total.grad_z.iter().any(|&g| g != 0.0) {
        backward_into(&state.online, &cache, &total.grad_z, &mut grads);
    }
    Ok(ItemResult {
        total: total.value,
        scl: scl.map(|l| l.value),
        centroid: centroid.map(|l| l.value),
        grads,
    })
}

/// Mutable training state carried across epochs.
#[derive(Debug, Clone, PartialEq)]
pub struct Session {
    pub state: EncoderState,
    pub velocity: EncoderParams,
    pub rep_bank: RepBank,
    pub centroid_bank: CentroidBank,
    /// Per training sample, every centroid ordered by similarity to the
    /// momentum representation it was clustered with.
    pub rankings: Vec<Vec<usize>>,
}

/// One pass over the shuffled training set (labeled and unlabeled mixed).
/// Centroids stay frozen for the whole epoch.
pub fn train_epoch(session: &mut Session, dataset: &DatasetSplit, cfg: &TrainConfig, epoch: usize) -> Result<EpochStats> {
    let training: Vec<&Sample> = dataset.training().collect();
    let mut order: Vec<usize> = (0..training.len()).collect();
    order.shuffle(&mut rng::keyed(cfg.hyper.seed, Domain::Shuffle, epoch as u64));
    let sgd = cfg.sgd();
    let (mut total, mut scl, mut cen) = (0.0, 0.0, 0.0);
    let (mut n_lab, mut n_unl, mut n_cen, mut steps) = (0, 0, 0, 0);

    for batch in order.chunks(cfg.hyper.batch_size) {
        let step = session.state.step_count;
        let results: Vec<ItemResult> = {
            let sess = &*session;
            par::map_range(batch.len(), |k| {
                let idx = step * cfg.hyper.batch_size as u64 + k as u64;
                let i = batch[k];
                item_loss(cfg, training[i], &sess.state, &sess.rep_bank, &sess.centroid_bank, &sess.rankings[i], idx)
            })
            .into_iter()
            .collect::<Result<_>>()?
        };
        let mut grads = session.state.online.zeros_like();
        for r in &results {
            grads.add_scaled(&r.grads, 1.0);
            total += r.total;
            if let Some(v) = r.scl {
                scl += v;
                n_lab += 1;
            } else {
                n_unl += 1;
            }
            if let Some(v) = r.centroid {
                cen += v;
                n_cen += 1;
            }
        }
        grads.scale(1.0 / batch.len() as f32);
        grads.clear_biases(cfg.hyper.freeze_bias);
        sgd_step(&mut session.state.online, &grads, sgd, &mut session.velocity);
        if !session.state.online.is_finite() {
            return Err(Error::Diverged(session.state.step_count));
        }
        momentum_update(&mut session.state, cfg.hyper.momentum_coef);
        session.state.step_count += 1;
        steps += 1;

        let labeled: Vec<&Sample> = batch
            .iter()
            .map(|&i| training[i])
            .filter(|s| s.split_role == SplitRole::Labeled)
            .collect();
        let keys = extract_momentum(&session.state, &labeled)?;
        for (row, s) in labeled.iter().enumerate() {
            session.rep_bank.enqueue(s.training_label()?, keys.reps.row(row))?;
        }
        assert!(session.rep_bank.lengths_ok(), "representation queue lost its length");
    }
    let mean = |sum: f64, n: usize| if n == 0 { 0.0 } else { sum / n as f64 };
    Ok(EpochStats {
        epoch,
        steps,
        labeled: n_lab,
        unlabeled: n_unl,
        total: mean(total, n_lab + n_unl),
        scl: mean(scl, n_lab),
        centroid: mean(cen, n_cen),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub state: EncoderState,
    pub rep_bank: Option<RepBank>,
    pub centroid_bank: Option<CentroidBank>,
    pub ce_head: Option<CEHead>,
    pub history: Vec<EpochStats>,
    /// Number of centroid-bank builds, including the one in preparation.
    pub clusterings: usize,
}

impl TrainOutcome {
    /// Final state restored from disk; per-epoch history is not kept there.
    pub fn from_checkpoint(ckpt: Checkpoint) -> Self {
        Self {
            state: ckpt.state,
            rep_bank: ckpt.rep_bank,
            centroid_bank: ckpt.centroid_bank,
            ce_head: ckpt.ce_head,
            history: Vec::new(),
            clusterings: 0,
        }
    }

    pub fn checkpoint(&self, cfg: &TrainConfig, epoch: usize) -> Checkpoint {
        Checkpoint {
            mode: cfg.mode,
            epoch,
            hyper: cfg.hyper.clone(),
            state: self.state.clone(),
            rep_bank: self.rep_bank.clone(),
            centroid_bank: self.centroid_bank.clone(),
            ce_head: self.ce_head.clone(),
        }
    }
}

fn record(cfg: &TrainConfig, ckpt: &Checkpoint, stats: &EpochStats) -> Result<()> {
    let Some(dir) = &cfg.checkpoint_dir else {
        return Ok(());
    };
    ckpt.save(dir)?;
    let path = dir.join("history.jsonl");
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&path)
        .map_err(|e| Error::io(&path, e))?;
    writeln!(f, "{}", serde_json::to_string(stats)?).map_err(|e| Error::io(&path, e))
}

fn reset_history(cfg: &TrainConfig) -> Result<()> {
    if let Some(dir) = &cfg.checkpoint_dir {
        let path = dir.join("history.jsonl");
        if path.exists() {
            std::fs::remove_file(&path).map_err(|e| Error::io(&path, e))?;
        }
    }
    Ok(())
}

pub fn train(dataset: &DatasetSplit, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if cfg.mode == Mode::CeBaseline {
        return train_ce_baseline(dataset, cfg);
    }
    reset_history(cfg)?;
    let state = init_state(cfg.encoder, cfg.hyper.seed)?;
    let prepared = prepare(dataset, &state, cfg)?;
    let mut session = Session {
        velocity: state.online.zeros_like(),
        state,
        rankings: prepared.centroid_bank.rankings(&prepared.rep_cache.reps),
        rep_bank: prepared.rep_bank,
        centroid_bank: prepared.centroid_bank,
    };
    let training: Vec<&Sample> = dataset.training().collect();
    let mut history = Vec::new();
    let mut clusterings = 1;
    for epoch in 0..cfg.hyper.epochs {
        let stats = train_epoch(&mut session, dataset, cfg, epoch)?;
        if (epoch + 1) % cfg.recluster_every == 0 {
            let reps = extract_momentum(&session.state, &training)?;
            session.centroid_bank = build_centroids(&reps, cfg, epoch + 1)?;
            session.rankings = session.centroid_bank.rankings(&reps.reps);
            clusterings += 1;
        }
        let snapshot = TrainOutcome {
            state: session.state.clone(),
            rep_bank: Some(session.rep_bank.clone()),
            centroid_bank: Some(session.centroid_bank.clone()),
            ce_head: None,
            history: Vec::new(),
            clusterings,
        };
        record(cfg, &snapshot.checkpoint(cfg, epoch + 1), &stats)?;
        history.push(stats);
    }
    Ok(TrainOutcome {
        state: session.state,
        rep_bank: Some(session.rep_bank),
        centroid_bank: Some(session.centroid_bank),
        ce_head: None,
        history,
        clusterings,
    })
}

/// Gradient of softmax cross-entropy for one labeled sample with respect to
/// the head and, through `h`, to the encoder trunk.
pub fn ce_item(
    params: &EncoderParams,
    head: &CEHead,
    image: &ToyImage,
    target: usize,
) -> Result<(f64, EncoderParams, Linear)> {
    let trunk = encoder::forward_trunk(params, image)?;
    let logits = head.logits(&trunk.pooled);
    let (value, g_logits) = losses::cross_entropy(&logits, target);
    let mut g_head = Linear::zeros(head.linear.inputs, head.linear.outputs);
    head.linear.accumulate(&mut g_head, &trunk.pooled, &g_logits);
    let mut g_h = vec![0.0; head.linear.inputs];
    head.linear.backward_input(&g_logits, &mut g_h);
    let mut grads = params.zeros_like();
    encoder::backward_trunk_into(params, &trunk, &g_h, &mut grads);
    Ok((value, grads, g_head))
}

/// Encoder plus linear head trained with cross-entropy on the labeled set;
/// unlabeled samples are never read.
pub fn train_ce_baseline(dataset: &DatasetSplit, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    reset_history(cfg)?;
    let classes = dataset.taxonomy.known();
    let class_index: BTreeMap<CategoryId, usize> = classes.iter().enumerate().map(|(i, &c)| (c, i)).collect();
    let labeled: Vec<(&Sample, usize)> = dataset
        .labeled
        .iter()
        .map(|s| {
            let y = s.training_label()?;
            class_index.get(&y).map(|&k| (s, k)).ok_or(Error::UnknownClass(y))
        })
        .collect::<Result<_>>()?;
    if labeled.is_empty() {
        return Err(Error::ConfigInvalid("baseline needs labeled samples".into()));
    }
    let mut state = init_state(cfg.encoder, cfg.hyper.seed)?;
    let mut head = CEHead {
        classes: classes.clone(),
        linear: Linear::uniform(cfg.encoder.d1, classes.len(), &mut rng::keyed(cfg.hyper.seed, Domain::Init, 1)),
    };
    let sgd = SgdConfig {
        lr: cfg.hyper.ce_lr,
        ..cfg.sgd()
    };
    let mut velocity = state.online.zeros_like();
    let mut head_velocity = Linear::zeros(head.linear.inputs, head.linear.outputs);
    let mut history = Vec::new();
    for epoch in 0..cfg.hyper.epochs {
        let mut order: Vec<usize> = (0..labeled.len()).collect();
        order.shuffle(&mut rng::keyed(cfg.hyper.seed, Domain::Shuffle, epoch as u64));
        let (mut total, mut steps) = (0.0, 0);
        for batch in order.chunks(cfg.hyper.batch_size) {
            let step = state.step_count;
            let results: Vec<(f64, EncoderParams, Linear)> = par::map_range(batch.len(), |j| {
                let (s, k) = labeled[batch[j]];
                let idx = step * cfg.hyper.batch_size as u64 + j as u64;
                let image = augment(&s.image, cfg.hyper.augment_shift, cfg.hyper.seed, idx);
                ce_item(&state.online, &head, &image, k)
            })
            .into_iter()
            .collect::<Result<_>>()?;
            let mut grads = state.online.zeros_like();
            let mut g_head = Linear::zeros(head.linear.inputs, head.linear.outputs);
            for (v, g, gh) in &results {
                total += v;
                grads.add_scaled(g, 1.0);
                for (a, b) in g_head.weight.iter_mut().zip(&gh.weight) {
                    *a += b;
                }
                for (a, b) in g_head.bias.iter_mut().zip(&gh.bias) {
                    *a += b;
                }
            }
            let inv = 1.0 / batch.len() as f32;
            grads.scale(inv);
            grads.clear_biases(cfg.hyper.freeze_bias);
            g_head.weight.iter_mut().chain(g_head.bias.iter_mut()).for_each(|v| *v *= inv);
            sgd_step(&mut state.online, &grads, sgd, &mut velocity);
            sgd_update(&mut head.linear.weight, &g_head.weight, &mut head_velocity.weight, sgd);
            sgd_update(&mut head.linear.bias, &g_head.bias, &mut head_velocity.bias, sgd);
            if !state.online.is_finite() || !head.linear.weight.iter().all(|v| v.is_finite()) {
                return Err(Error::Diverged(state.step_count));
            }
            momentum_update(&mut state, cfg.hyper.momentum_coef);
            state.step_count += 1;
            steps += 1;
        }
        let stats = EpochStats {
            epoch,
            steps,
            labeled: labeled.len(),
            unlabeled: 0,
            total: total / labeled.len() as f64,
            scl: 0.0,
            centroid: 0.0,
        };
        let snapshot = TrainOutcome {
            state: state.clone(),
            rep_bank: None,
            centroid_bank: None,
            ce_head: Some(head.clone()),
            history: Vec::new(),
            clusterings: 0,
        };
        record(cfg, &snapshot.checkpoint(cfg, epoch + 1), &stats)?;
        history.push(stats);
    }
    Ok(TrainOutcome {
        state,
        rep_bank: None,
        centroid_bank: None,
        ce_head: Some(head),
        history,
        clusterings: 0,
    })
}

/// Training accuracy of a baseline head on the labeled set.
pub fn ce_accuracy(params: &EncoderParams, head: &CEHead, samples: &[Sample]) -> Result<f64> {
    let hits: Vec<bool> = par::map(samples, |s| {
        let trunk = encoder::forward_trunk(params, &s.image)?;
        Ok(head.predict(&trunk.pooled) == s.eval_label()?)
    })
    .into_iter()
    .collect::<Result<_>>()?;
    Ok(hits.iter().filter(|&&h| h).count() as f64 / samples.len().max(1) as f64)
}

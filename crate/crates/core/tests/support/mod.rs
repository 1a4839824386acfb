//! Independent oracles and randomized checks shared by the integration tests
//! and the acceptance runner. Every check returns `Err` with a description
//! of the first failing instance.

#![allow(dead_code)]

use std::collections::{BTreeMap, VecDeque};

use owsol::banks::{init_rep_bank, CentroidBank, RepBank};
use owsol::cluster::{kmeans, KMeansConfig, Matrix};
use owsol::data::{Role, ToyImage};
use owsol::encoder::{EncoderConfig, EncoderParams, FeatureMap, Linear};
use owsol::evalkit::{self, hungarian, Group};
use owsol::gcam::{self, ActivationMap, Provenance};
use owsol::losses::{cross_entropy, mcl_loss, ocl_loss, scl_loss};
use owsol::params::PositiveLogit;
use owsol::rng::{keyed, Domain, Rng};
use owsol::trainer::{ce_item, CEHead};
use rand::Rng as _;
use rand_distr::{Distribution, Normal};

pub type Check = Result<(), String>;

pub const EPS: f64 = 1e-3;
pub const GRAD_TOL: f64 = 1e-4;
pub const D: usize = 8;
const N_Z: usize = 4;
const N_C: usize = 16;
const L: usize = 5;
const N_NEG: usize = 8;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Check {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

pub fn unit(rng: &mut Rng, d: usize) -> Vec<f32> {
    let v: Vec<f32> = (0..d).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    let n = v.iter().map(|x| x * x).sum::<f32>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

pub fn rep_bank(rng: &mut Rng, classes: u32, n_z: usize) -> RepBank {
    let reps: BTreeMap<u32, Vec<Vec<f32>>> = (0..classes)
        .map(|y| (y, (0..n_z).map(|_| unit(rng, D)).collect()))
        .collect();
    let known: Vec<u32> = (0..classes).collect();
    init_rep_bank(&reps, &known, n_z, 0).unwrap()
}

pub fn centroid_bank(rng: &mut Rng, n_c: usize, phi_range: (f32, f32)) -> CentroidBank {
    let rows: Vec<Vec<f32>> = (0..n_c).map(|_| unit(rng, D)).collect();
    CentroidBank {
        centroids: Matrix::from_rows(&rows).unwrap(),
        phi: (0..n_c).map(|_| rng.random_range(phi_range.0..=phi_range.1)).collect(),
        sample_ids: vec![],
        assignment: vec![],
        member_counts: vec![1; n_c],
    }
}

fn dot(a: &[f64], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, &y)| x * y as f64).sum()
}

pub fn lse(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn oracle_scl(z: &[f64], y: u32, bank: &RepBank, tau: f64) -> f64 {
    let all: Vec<f64> = bank.iter_all().map(|(_, p)| dot(z, p) / tau).collect();
    let denom = lse(&all);
    let pos: Vec<f64> = bank.iter_all().filter(|(c, _)| *c == y).map(|(_, p)| dot(z, p) / tau).collect();
    pos.iter().map(|s| denom - s).sum::<f64>() / pos.len() as f64
}

pub fn oracle_ocl(z: &[f64], bank: &CentroidBank, positive: usize) -> f64 {
    let logits: Vec<f64> = (0..bank.len())
        .map(|c| dot(z, bank.centroids.row(c)) / bank.phi[c] as f64)
        .collect();
    lse(&logits) - logits[positive]
}

pub fn oracle_mcl(z: &[f64], bank: &CentroidBank, positives: &[usize], negatives: &[usize]) -> f64 {
    let mut c_star = vec![0.0; z.len()];
    for &c in positives {
        for (s, &v) in c_star.iter_mut().zip(bank.centroids.row(c)) {
            *s += v as f64 / bank.phi[c] as f64 / positives.len() as f64;
        }
    }
    let pos: f64 = z.iter().zip(&c_star).map(|(a, b)| a * b).sum();
    let mut logits = vec![pos];
    logits.extend(negatives.iter().map(|&c| dot(z, bank.centroids.row(c)) / bank.phi[c] as f64));
    lse(&logits) - pos
}

pub fn central_difference(x: &[f32], f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let base: Vec<f64> = x.iter().map(|&v| v as f64).collect();
    (0..x.len())
        .map(|k| {
            let (mut p, mut m) = (base.clone(), base.clone());
            p[k] += EPS;
            m[k] -= EPS;
            (f(&p) - f(&m)) / (2.0 * EPS)
        })
        .collect()
}

pub fn rel_err(analytic: &[f32], fd: &[f64]) -> f64 {
    let a: Vec<f64> = analytic.iter().map(|&v| v as f64).collect();
    let diff = a.iter().zip(fd).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(fd.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

fn widen(z: &[f32]) -> Vec<f64> {
    z.iter().map(|&v| v as f64).collect()
}

/// Supervised term against its oracle; returns the worst relative error.
pub fn scl_gradients(instances: u64) -> Result<f64, String> {
    let mut worst = 0.0f64;
    for seed in 0..instances {
        let mut rng = keyed(seed, Domain::Init, 1);
        let bank = rep_bank(&mut rng, 3, N_Z);
        let z = unit(&mut rng, D);
        let y = rng.random_range(0..3u32);
        let tau = rng.random_range(0.2f32..1.0) as f64;
        let out = scl_loss(&z, y, &bank, tau as f32).map_err(|e| e.to_string())?;
        let value = oracle_scl(&widen(&z), y, &bank, tau);
        ensure((out.value - value).abs() < 1e-9, || format!("scl seed {seed}: value {} vs {value}", out.value))?;
        let err = rel_err(&out.grad_z, &central_difference(&z, |p| oracle_scl(p, y, &bank, tau)));
        ensure(err <= GRAD_TOL, || format!("scl seed {seed}: relative error {err:e}"))?;
        worst = worst.max(err);
    }
    Ok(worst)
}

pub fn ocl_gradients(instances: u64) -> Result<f64, String> {
    let mut worst = 0.0f64;
    for seed in 0..instances {
        let mut rng = keyed(seed, Domain::Init, 2);
        let bank = centroid_bank(&mut rng, N_C, (0.3, 1.0));
        let z = unit(&mut rng, D);
        let out = ocl_loss(&z, &bank).map_err(|e| e.to_string())?;
        let positive = bank.ranking(&z)[0];
        let value = oracle_ocl(&widen(&z), &bank, positive);
        ensure((out.value - value).abs() < 1e-9, || format!("ocl seed {seed}: value {} vs {value}", out.value))?;
        let err = rel_err(&out.grad_z, &central_difference(&z, |p| oracle_ocl(p, &bank, positive)));
        ensure(err <= GRAD_TOL, || format!("ocl seed {seed}: relative error {err:e}"))?;
        worst = worst.max(err);
    }
    Ok(worst)
}

pub fn mcl_gradients(instances: u64) -> Result<f64, String> {
    let mut worst = 0.0f64;
    for seed in 0..instances {
        let mut rng = keyed(seed, Domain::Init, 3);
        let bank = centroid_bank(&mut rng, N_C, (0.3, 1.0));
        let z = unit(&mut rng, D);
        let ranking = bank.ranking(&z);
        // replay the negative draw to recover the sampled set
        let negative_rng = || keyed(seed, Domain::Negatives, 0);
        let out = mcl_loss(&z, &bank, L, N_NEG, PositiveLogit::AsPrinted, &mut negative_rng()).map_err(|e| e.to_string())?;
        let mut picks = rand::seq::index::sample(&mut negative_rng(), N_C - L, N_NEG).into_vec();
        picks.sort_unstable();
        let negatives: Vec<usize> = picks.into_iter().map(|i| ranking[L + i]).collect();
        let value = oracle_mcl(&widen(&z), &bank, &ranking[..L], &negatives);
        ensure((out.value - value).abs() < 1e-9, || format!("mcl seed {seed}: value {} vs {value}", out.value))?;
        let err = rel_err(&out.grad_z, &central_difference(&z, |p| oracle_mcl(p, &bank, &ranking[..L], &negatives)));
        ensure(err <= GRAD_TOL, || format!("mcl seed {seed}: relative error {err:e}"))?;
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Baseline cross-entropy: logit gradient, and the head weight gradient
/// produced by the training item.
pub fn ce_gradients(instances: u64) -> Result<f64, String> {
    let cfg = EncoderConfig {
        image_side: 8,
        channels: 1,
        patch: 4,
        d1: D,
        d_hidden: D,
        d2: D,
    };
    let mut worst = 0.0f64;
    for seed in 0..instances {
        let mut rng = keyed(seed, Domain::Init, 4);
        let logits: Vec<f32> = (0..3).map(|_| rng.random_range(-3.0f32..3.0)).collect();
        let target = rng.random_range(0..3);
        let (value, grad) = cross_entropy(&logits, target);
        let f = |l: &[f64]| lse(l) - l[target];
        ensure((value - f(&widen(&logits))).abs() < 1e-9, || format!("ce seed {seed}: value mismatch"))?;
        let err = rel_err(&grad, &central_difference(&logits, f));
        ensure(err <= GRAD_TOL, || format!("ce seed {seed}: logit relative error {err:e}"))?;
        worst = worst.max(err);

        let params = EncoderParams::init(cfg, &mut rng).map_err(|e| e.to_string())?;
        let mut linear = Linear::uniform(D, 3, &mut rng);
        linear.bias.iter_mut().for_each(|b| *b = rng.random_range(-0.5..0.5));
        let head = CEHead {
            classes: vec![0, 1, 2],
            linear,
        };
        let pixels: Vec<f32> = (0..64).map(|_| rng.random_range(0.0..1.0)).collect();
        let image = ToyImage::new(8, 8, 1, pixels).unwrap();
        let (_, _, g_head) = ce_item(&params, &head, &image, target).map_err(|e| e.to_string())?;
        let h = widen(&owsol::encoder::forward_trunk(&params, &image).unwrap().pooled);
        let objective = |w: &[f64]| {
            let logits: Vec<f64> = (0..3)
                .map(|k| head.linear.bias[k] as f64 + (0..D).map(|i| w[k * D + i] * h[i]).sum::<f64>())
                .collect();
            lse(&logits) - logits[target]
        };
        let err = rel_err(&g_head.weight, &central_difference(&head.linear.weight, objective));
        ensure(err <= GRAD_TOL, || format!("ce seed {seed}: head relative error {err:e}"))?;
        worst = worst.max(err);
    }
    Ok(worst)
}

/// One positive, unit densities and every other centroid as a negative.
pub fn mcl_equals_ocl(instances: u64) -> Check {
    for seed in 0..instances {
        let mut rng = keyed(seed, Domain::Init, 6);
        let n_c = rng.random_range(2..20);
        let mut bank = centroid_bank(&mut rng, n_c, (1.0, 1.0));
        bank.phi.iter_mut().for_each(|p| *p = 1.0);
        let z = unit(&mut rng, D);
        let ocl = ocl_loss(&z, &bank).map_err(|e| e.to_string())?;
        let mcl = mcl_loss(&z, &bank, 1, n_c - 1, PositiveLogit::AsPrinted, &mut rng).map_err(|e| e.to_string())?;
        ensure((ocl.value - mcl.value).abs() < 1e-6, || format!("seed {seed}: {} vs {}", ocl.value, mcl.value))?;
        let grads_close = ocl.grad_z.iter().zip(&mcl.grad_z).all(|(a, b)| (a - b).abs() < 1e-6);
        ensure(grads_close, || format!("seed {seed}: gradients differ"))?;
    }
    Ok(())
}

pub fn losses_non_negative(instances: u64) -> Check {
    for seed in 0..instances {
        let mut rng = keyed(seed, Domain::Init, 7);
        let rb = rep_bank(&mut rng, 3, N_Z);
        let cb = centroid_bank(&mut rng, N_C, (0.01, 2.0));
        let z = unit(&mut rng, D);
        let tau = rng.random_range(0.005f32..2.0);
        let y = rng.random_range(0..3u32);
        let l = rng.random_range(1..N_C);
        let n_neg = rng.random_range(0..=N_C - l);
        let logit = if seed % 2 == 0 {
            PositiveLogit::AsPrinted
        } else {
            PositiveLogit::ExtraDensity
        };
        let logits: Vec<f32> = (0..3).map(|_| rng.random_range(-10.0f32..10.0)).collect();
        let scl = scl_loss(&z, y, &rb, tau).map_err(|e| e.to_string())?;
        let ocl = ocl_loss(&z, &cb).map_err(|e| e.to_string())?;
        let mcl = mcl_loss(&z, &cb, l, n_neg, logit, &mut rng).map_err(|e| e.to_string())?;
        let ce = cross_entropy(&logits, y as usize).0;
        let total = owsol::losses::total_loss(&scl, &mcl, 1.0, 0.5);
        for (name, v) in [("scl", scl.value), ("ocl", ocl.value), ("mcl", mcl.value), ("ce", ce), ("total", total.value)] {
            ensure(v >= 0.0 && v.is_finite(), || format!("seed {seed}: {name} = {v}"))?;
        }
    }
    Ok(())
}

pub fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for i in 0..=p.len() {
            let mut q = p.clone();
            q.insert(i, n - 1);
            out.push(q);
        }
    }
    out
}

/// Integer costs keep every sum exact, so totals are compared with `==`.
pub fn hungarian_is_optimal(trials: u64, max_n: usize) -> Check {
    for n in 1..=max_n {
        let perms = permutations(n);
        for t in 0..trials {
            let mut rng = keyed(n as u64, Domain::Init, t);
            let cost: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..n).map(|_| rng.random_range(0..100) as f64).collect())
                .collect();
            let brute = perms
                .iter()
                .map(|p| p.iter().enumerate().map(|(i, &j)| cost[i][j]).sum::<f64>())
                .fold(f64::INFINITY, f64::min);
            let pairs = hungarian(&cost);
            let mut cols: Vec<usize> = pairs.iter().map(|&(_, j)| j).collect();
            cols.sort_unstable();
            ensure(cols == (0..n).collect::<Vec<_>>(), || format!("n = {n}, trial {t}: not a permutation"))?;
            let got: f64 = pairs.iter().map(|&(i, j)| cost[i][j]).sum();
            ensure(got == brute, || format!("n = {n}, trial {t}: {got} vs brute force {brute}"))?;
        }
    }
    Ok(())
}

pub fn kmeans_monotone(runs: u64) -> Check {
    for run in 0..runs {
        let mut rng = keyed(run, Domain::Init, 20);
        let n = rng.random_range(10..80);
        let d = rng.random_range(1..6);
        let data: Vec<f32> = (0..n * d).map(|_| rng.random_range(-5.0..5.0)).collect();
        let points = Matrix::new(n, d, data).unwrap();
        let k = rng.random_range(1..=n.min(8));
        let res = kmeans(&points, k, &KMeansConfig { max_iters: 100, restarts: 1, seed: run }).map_err(|e| e.to_string())?;
        for w in res.inertia_history.windows(2) {
            ensure(w[1] <= w[0], || format!("run {run}: inertia rose {} -> {}", w[0], w[1]))?;
        }
        ensure(res.assignment.len() == n, || format!("run {run}: assignment length"))?;
    }
    Ok(())
}

/// Gaussian blobs with centers on a ring at least 10 std apart.
pub fn blobs(seed: u64, std: f64) -> (Matrix, Vec<u32>, usize) {
    let mut rng = keyed(seed, Domain::Init, 21);
    let k = rng.random_range(2..9);
    let min_gap = 10.0 * std;
    // chord between neighbours on a ring of radius r is 2 r sin(pi / k)
    let radius = min_gap / (2.0 * (std::f64::consts::PI / k as f64).sin());
    let noise = Normal::new(0.0, std).unwrap();
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for c in 0..k {
        let a = std::f64::consts::TAU * c as f64 / k as f64;
        let (cx, cy) = (radius * a.cos(), radius * a.sin());
        for _ in 0..30 {
            rows.push(vec![(cx + noise.sample(&mut rng)) as f32, (cy + noise.sample(&mut rng)) as f32]);
            labels.push(c as u32);
        }
    }
    (Matrix::from_rows(&rows).unwrap(), labels, k)
}

pub fn kmeans_recovers_blobs(seeds: u64) -> Check {
    for seed in 0..seeds {
        let (points, labels, k) = blobs(seed, 0.5);
        let res = kmeans(&points, k, &KMeansConfig { max_iters: 100, restarts: 4, seed }).map_err(|e| e.to_string())?;
        let roles = vec![Role::Known; labels.len()];
        let acc = evalkit::clus_acc(&res.assignment, &labels, &roles).map_err(|e| e.to_string())?.accuracy[&Group::All];
        ensure(acc == 1.0, || format!("seed {seed} (k = {k}): clus_acc {acc}"))?;
    }
    Ok(())
}

fn random_fmap(rng: &mut Rng) -> FeatureMap {
    let (d1, h, w) = (rng.random_range(1..12), rng.random_range(1..7), rng.random_range(1..7));
    let data = (0..d1 * h * w).map(|_| rng.random_range(-2.0f32..2.0)).collect();
    FeatureMap::new(d1, h, w, data).unwrap()
}

pub fn gcam_is_cam(inputs: u64) -> Check {
    for t in 0..inputs {
        let mut rng = keyed(t, Domain::Init, 30);
        let m = random_fmap(&mut rng);
        let v: Vec<f32> = (0..m.d1).map(|_| rng.random_range(-2.0f32..2.0)).collect();
        let a = gcam::cam(&m, &v, 0).map_err(|e| e.to_string())?;
        let b = gcam::gcam(&m, &v, 0).map_err(|e| e.to_string())?;
        let same = a.data.iter().zip(&b.data).all(|(x, y)| x.to_bits() == y.to_bits()) && a.data.len() == b.data.len();
        ensure(same && (a.h, a.w) == (b.h, b.w), || format!("input {t}: maps differ"))?;
    }
    Ok(())
}

/// Map values are dyadic and the transforms use power-of-two scales with
/// small dyadic offsets, so every transformed value is exact in f32 and the
/// comparison can be bitwise.
pub fn binarize_affine_invariant(inputs: u64) -> Check {
    for t in 0..inputs {
        let mut rng = keyed(t, Domain::Init, 31);
        let (h, w) = (rng.random_range(1..9), rng.random_range(1..9));
        let data: Vec<f32> = (0..h * w).map(|_| rng.random_range(-64i32..=64) as f32 / 16.0).collect();
        let map = ActivationMap {
            h,
            w,
            data,
            provenance: Provenance::Gcam(0),
        };
        let a = 2f32.powi(rng.random_range(-3..=3));
        let b = rng.random_range(-32i32..=32) as f32 / 4.0;
        let moved = ActivationMap {
            data: map.data.iter().map(|&v| a * v + b).collect(),
            ..map.clone()
        };
        for theta in [0.0, 0.1, 0.2, 0.35, 0.5, 0.75, 0.9, 1.0] {
            ensure(gcam::binarize(&map, theta) == gcam::binarize(&moved, theta), || {
                format!("input {t}: mask changed under {a} * map + {b} at theta {theta}")
            })?;
        }
    }
    Ok(())
}

/// Random enqueue sequence checked against a plain deque per class.
pub fn fifo_matches_shadow(steps: u64, n_z: usize) -> Check {
    let mut rng = keyed(n_z as u64, Domain::Init, 40);
    let classes = 5u32;
    let init: BTreeMap<u32, Vec<Vec<f32>>> = (0..classes)
        .map(|y| (y, (0..n_z).map(|_| unit(&mut rng, D)).collect()))
        .collect();
    let known: Vec<u32> = (0..classes).collect();
    let mut bank = init_rep_bank(&init, &known, n_z, 9).map_err(|e| e.to_string())?;
    let mut shadow: BTreeMap<u32, VecDeque<Vec<f32>>> = known
        .iter()
        .map(|&y| (y, bank.iter_class(y).unwrap().map(<[f32]>::to_vec).collect()))
        .collect();
    for step in 0..steps {
        let y = rng.random_range(0..classes + 1);
        let z = unit(&mut rng, D);
        let res = bank.enqueue(y, &z);
        if y == classes {
            ensure(res.is_err(), || format!("step {step}: unknown class accepted"))?;
        } else {
            res.map_err(|e| e.to_string())?;
            let q = shadow.get_mut(&y).unwrap();
            q.pop_front();
            q.push_back(z);
        }
        for &c in &known {
            let got: Vec<&[f32]> = bank.iter_class(c).unwrap().collect();
            ensure(got.len() == n_z, || format!("step {step}: class {c} holds {}", got.len()))?;
            let same = got.iter().zip(&shadow[&c]).all(|(a, b)| *a == b.as_slice());
            ensure(same, || format!("step {step}: class {c} diverged from the shadow queue"))?;
        }
    }
    Ok(())
}

use std::fs;
use std::path::{Path, PathBuf};

use clap::ValueEnum;
use owsol::checkpoint::Checkpoint;
use owsol::config::{self, ConfigMap};
use owsol::data::{DatasetSplit, Sample};
use owsol::dataset::{load_dataset, save_dataset};
use owsol::evalkit::{EvalReport, Group};
use owsol::experiments::{self as ex, ModeRow, SweepRow};
use owsol::gcam::{self, EvalConfig, DEFAULT_THETA};
use owsol::params::HyperParams;
use owsol::synthgen::{generate_dataset, GenConfig};
use owsol::tensor::Tensor;
use owsol::trainer::{self, Mode, TrainConfig, TrainOutcome};
use owsol::{Error, Result};

use crate::manifest::{io, RunManifest};
use crate::{Common, SplitArg};

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Experiment {
    Ablation,
    #[value(name = "sensitivity-L", alias = "sensitivity-l")]
    SensitivityL,
    #[value(name = "sensitivity-Nc", alias = "sensitivity-nc")]
    SensitivityNc,
    Zeroshot,
}

const NC_GRID: [usize; 4] = [16, 32, 64, 128];

fn load_config(common: &Common) -> Result<ConfigMap> {
    let mut cfg = match &common.config {
        Some(path) => config::read(path)?,
        None => ConfigMap::default(),
    };
    if let Some(seed) = common.seed {
        cfg.set("seed", seed);
    }
    Ok(cfg)
}

fn seed_of(cfg: &ConfigMap) -> Result<u64> {
    cfg.0
        .get("seed")
        .map_or(Ok(0), |v| v.parse().map_err(|_| Error::ConfigInvalid(format!("seed: cannot parse {v:?}"))))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| io(dir, e))
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| io(path, e))
}

fn image_side(dataset: &DatasetSplit) -> Option<usize> {
    dataset.training().chain(&dataset.test).next().map(|s| s.image.width())
}

fn train_config(cfg: &ConfigMap, dataset: &DatasetSplit) -> Result<TrainConfig> {
    let mut t = TrainConfig::new(HyperParams::default(), Mode::Colearn);
    if let Some(side) = image_side(dataset) {
        t.encoder.image_side = side;
    }
    cfg.apply_train(&mut t)?;
    if image_side(dataset).is_some_and(|side| side != t.encoder.image_side) {
        return Err(Error::ConfigInvalid("image_side does not match the dataset".into()));
    }
    Ok(t)
}

fn eval_config(cfg: &ConfigMap, dataset: &DatasetSplit, seed: u64, theta: Option<f32>) -> Result<EvalConfig> {
    let mut e = EvalConfig::new(cfg.eval_clusters()?.unwrap_or(dataset.taxonomy.len()), seed);
    e.theta = match theta {
        Some(t) if (0.0..=1.0).contains(&t) => t,
        Some(t) => return Err(Error::ConfigInvalid(format!("theta must be in [0, 1], got {t}"))),
        None => cfg.theta(DEFAULT_THETA)?,
    };
    e.space = cfg.eval_space()?;
    Ok(e)
}

pub fn gen_data(common: &Common, out: &Path) -> Result<()> {
    let cfg = load_config(common)?;
    let mut g = GenConfig::default();
    cfg.apply_gen(&mut g)?;
    let run = RunManifest::start("gen-data", g.seed, cfg.render(), vec![]);
    let split = generate_dataset(&g)?;
    save_dataset(&split, out)?;
    println!(
        "wrote {} labeled, {} unlabeled, {} val, {} test samples to {}",
        split.labeled.len(),
        split.unlabeled.len(),
        split.val.len(),
        split.test.len(),
        out.display()
    );
    run.finish(out)
}

pub fn train(common: &Common, data: &Path, out: &Path, mode: Option<&str>) -> Result<()> {
    let mut cfg = load_config(common)?;
    if let Some(m) = mode {
        cfg.set("mode", m);
    }
    let dataset = load_dataset(data)?;
    let mut t = train_config(&cfg, &dataset)?;
    t.checkpoint_dir = Some(out.to_path_buf());
    let run = RunManifest::start("train", t.hyper.seed, cfg.render(), vec![data.to_path_buf()]);
    create_dir(out)?;
    let outcome = trainer::train(&dataset, &t)?;
    if let Some(last) = outcome.history.last() {
        println!(
            "{}: {} epochs, final loss {:.4}, checkpoint in {}",
            t.mode.name(),
            outcome.history.len(),
            last.total,
            out.display()
        );
    }
    run.finish(out)
}

struct Loaded {
    outcome: TrainOutcome,
    dataset: DatasetSplit,
    data_dir: PathBuf,
    seed: u64,
}

fn load_run(checkpoint: &Path, data: Option<&Path>) -> Result<Loaded> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let data_dir = match data {
        Some(d) => d.to_path_buf(),
        None => RunManifest::read(checkpoint)
            .ok()
            .and_then(|m| m.inputs.into_iter().next())
            .ok_or_else(|| Error::ConfigInvalid(format!("{} does not name its dataset; pass --data", checkpoint.display())))?,
    };
    let dataset = load_dataset(&data_dir)?;
    let seed = ckpt.hyper.seed;
    Ok(Loaded {
        outcome: TrainOutcome::from_checkpoint(ckpt),
        dataset,
        data_dir,
        seed,
    })
}

fn split_samples(dataset: &DatasetSplit, split: SplitArg) -> Vec<&Sample> {
    match split {
        SplitArg::Test => dataset.test.iter().collect(),
        SplitArg::Val => dataset.val.iter().collect(),
    }
}

fn split_name(split: SplitArg) -> &'static str {
    match split {
        SplitArg::Test => "test",
        SplitArg::Val => "val",
    }
}

fn print_report(report: &EvalReport) {
    println!("{:<6} {:>8} {:>8} {:>8}", "group", "clus", "loc", "clus_loc");
    for g in [Group::Known, Group::NovS, Group::NovD, Group::All] {
        if let Some(m) = report.get(g) {
            println!("{:<6} {:>8.4} {:>8.4} {:>8.4}", g.name(), m.clus_acc, m.loc_acc, m.clus_loc_acc);
        }
    }
}

pub fn eval(
    common: &Common,
    checkpoint: &Path,
    data: Option<&Path>,
    split: SplitArg,
    theta: Option<f32>,
    sweep: bool,
    out: Option<PathBuf>,
) -> Result<()> {
    let cfg = load_config(common)?;
    let run_data = load_run(checkpoint, data)?;
    let out = out.unwrap_or_else(|| checkpoint.join(format!("eval-{}", split_name(split))));
    let ecfg = eval_config(&cfg, &run_data.dataset, run_data.seed, theta)?;
    let run = RunManifest::start("eval", run_data.seed, cfg.render(), vec![checkpoint.to_path_buf(), run_data.data_dir.clone()]);
    let samples = split_samples(&run_data.dataset, split);
    let e = ex::evaluate_samples(&run_data.outcome, &run_data.dataset, &samples, &ecfg)?;
    create_dir(&out)?;
    write(&out.join("report.json"), serde_json::to_vec_pretty(&e.report)?)?;
    write(&out.join("report.csv"), e.report.csv_rows().join("\n") + "\n")?;
    print_report(&e.report);
    if sweep {
        let mut csv = String::from("theta,loc_acc,clus_loc_acc\n");
        let mut best = (f32::NAN, f64::NEG_INFINITY);
        for t in (1..=9).map(|i| i as f32 / 10.0) {
            let r = ex::evaluate_samples(&run_data.outcome, &run_data.dataset, &samples, &EvalConfig { theta: t, ..ecfg.clone() })?;
            let all = r.report.get(Group::All).expect("all group");
            csv.push_str(&format!("{t:.1},{:.6},{:.6}\n", all.loc_acc, all.clus_loc_acc));
            if all.loc_acc > best.1 {
                best = (t, all.loc_acc);
            }
        }
        write(&out.join("theta_sweep.csv"), csv)?;
        println!("best theta {:.1}: loc_acc {:.4}", best.0, best.1);
    }
    run.finish(&out)
}

pub fn gcam_export(
    common: &Common,
    checkpoint: &Path,
    data: Option<&Path>,
    split: SplitArg,
    theta: Option<f32>,
    out: &Path,
) -> Result<()> {
    let cfg = load_config(common)?;
    let run_data = load_run(checkpoint, data)?;
    let ecfg = eval_config(&cfg, &run_data.dataset, run_data.seed, theta)?;
    let run = RunManifest::start("gcam-export", run_data.seed, cfg.render(), vec![checkpoint.to_path_buf(), run_data.data_dir.clone()]);
    let samples = split_samples(&run_data.dataset, split);
    let e = ex::evaluate_samples(&run_data.outcome, &run_data.dataset, &samples, &ecfg)?;
    let (maps, heat) = (out.join("maps"), out.join("heatmaps"));
    create_dir(&maps)?;
    create_dir(&heat)?;
    let side = run_data.outcome.state.online.config.image_side;
    let mut csv = String::from("sample_id,cluster_id,x_min,y_min,x_max,y_max,score\n");
    for l in &e.localizations {
        Tensor::new(vec![l.map.h, l.map.w], l.map.data.clone())?.write(&maps.join(format!("{:06}.owt", l.sample_id)))?;
        let scale = (side / l.map.w.max(1)).max(1);
        write(&heat.join(format!("{:06}.pgm", l.sample_id)), gcam::to_pgm(&l.map, scale))?;
        let b = l.prediction.bbox;
        csv.push_str(&format!(
            "{},{},{},{},{},{},{:.6}\n",
            l.sample_id, l.prediction.cluster_id, b.x_min, b.y_min, b.x_max, b.y_max, l.prediction.score
        ));
    }
    write(&out.join("boxes.csv"), csv)?;
    println!("exported {} localizations to {}", e.localizations.len(), out.display());
    run.finish(out)
}

pub fn estimate_k(
    common: &Common,
    checkpoint: &Path,
    data: Option<&Path>,
    k_min: usize,
    k_max: usize,
    out: Option<PathBuf>,
) -> Result<()> {
    let cfg = load_config(common)?;
    let run_data = load_run(checkpoint, data)?;
    let out = out.unwrap_or_else(|| checkpoint.join("estimate-k"));
    let run = RunManifest::start("estimate-k", run_data.seed, cfg.render(), vec![checkpoint.to_path_buf(), run_data.data_dir.clone()]);
    let est = ex::estimate_k(&run_data.outcome.state.online, &run_data.dataset, k_min, k_max, run_data.seed)?;
    create_dir(&out)?;
    write(&out.join("estimate_k.csv"), est.csv())?;
    println!("k_hat = {}", est.k_hat);
    run.finish(&out)
}

struct SeedRun {
    seed: u64,
    dataset: DatasetSplit,
    train: TrainConfig,
    eval: EvalConfig,
}

fn seed_runs(cfg: &ConfigMap, data: Option<&Path>, seeds: &[u64]) -> Result<Vec<SeedRun>> {
    let seeds = if seeds.is_empty() { vec![seed_of(cfg)?] } else { seeds.to_vec() };
    let loaded = data.map(load_dataset).transpose()?;
    seeds
        .into_iter()
        .map(|seed| {
            let mut c = cfg.clone();
            c.set("seed", seed);
            let dataset = match &loaded {
                Some(d) => d.clone(),
                None => {
                    let mut g = GenConfig::default();
                    c.apply_gen(&mut g)?;
                    generate_dataset(&g)?
                }
            };
            let train = train_config(&c, &dataset)?;
            let eval = eval_config(&c, &dataset, seed, None)?;
            Ok(SeedRun {
                seed,
                dataset,
                train,
                eval,
            })
        })
        .collect()
}

fn median_rows<T: Clone>(per_seed: &[Vec<T>], report: impl Fn(&T) -> &EvalReport, rebuild: impl Fn(&T, EvalReport) -> T) -> Vec<T> {
    let Some(first) = per_seed.first() else {
        return Vec::new();
    };
    (0..first.len())
        .map(|i| {
            let reports: Vec<EvalReport> = per_seed.iter().map(|rows| report(&rows[i]).clone()).collect();
            rebuild(&first[i], ex::median_report(&reports))
        })
        .collect()
}

pub fn experiment(
    kind: Experiment,
    common: &Common,
    data: Option<&Path>,
    seeds: &[u64],
    grid: &[usize],
    held_fraction: f64,
    out: &Path,
) -> Result<()> {
    let cfg = load_config(common)?;
    let runs = seed_runs(&cfg, data, seeds)?;
    let first_seed = runs.first().map_or(0, |r| r.seed);
    let inputs = data.map(|d| vec![d.to_path_buf()]).unwrap_or_default();
    let run = RunManifest::start(&format!("experiment {kind:?}"), first_seed, cfg.render(), inputs);
    create_dir(out)?;
    match kind {
        Experiment::Ablation => {
            let mut per_seed = Vec::new();
            for r in &runs {
                let rows = ex::ablation(&r.dataset, &r.train, &r.eval)?;
                write(&out.join(format!("ablation_seed{}.csv", r.seed)), ex::ablation_csv(&rows))?;
                per_seed.push(rows);
            }
            let med = median_rows(&per_seed, |r: &ModeRow| &r.report, |r, report| ModeRow { mode: r.mode, report });
            let csv = ex::ablation_csv(&med);
            write(&out.join("ablation.csv"), &csv)?;
            write(&out.join("ablation.json"), serde_json::to_vec_pretty(&med)?)?;
            print!("{csv}");
        }
        Experiment::SensitivityL | Experiment::SensitivityNc => {
            let (name, default): (&str, &[usize]) = match kind {
                Experiment::SensitivityL => ("l", &ex::L_GRID),
                _ => ("n_c", &NC_GRID),
            };
            let grid = if grid.is_empty() { default } else { grid };
            let mut per_seed = Vec::new();
            for r in &runs {
                let rows = match kind {
                    Experiment::SensitivityL => ex::sensitivity_l(&r.dataset, &r.train, &r.eval, grid)?,
                    _ => ex::sensitivity_nc(&r.dataset, &r.train, &r.eval, grid)?,
                };
                write(&out.join(format!("sensitivity_{name}_seed{}.csv", r.seed)), ex::sweep_csv(name, &rows))?;
                per_seed.push(rows);
            }
            let med = median_rows(&per_seed, |r: &SweepRow| &r.report, |r, report| SweepRow { value: r.value, report });
            let csv = ex::sweep_csv(name, &med);
            write(&out.join(format!("sensitivity_{name}.csv")), &csv)?;
            print!("{csv}");
        }
        Experiment::Zeroshot => {
            if !(0.0..=1.0).contains(&held_fraction) {
                return Err(Error::ConfigInvalid(format!("held fraction must be in [0, 1], got {held_fraction}")));
            }
            let mut csv = String::from("seed,trained_loc_acc,held_out_loc_acc,difference\n");
            let mut reports = Vec::new();
            for r in &runs {
                let z = ex::zeroshot(&r.dataset, &r.train, &r.eval, held_fraction)?;
                csv.push_str(&format!(
                    "{},{:.6},{:.6},{:.6}\n",
                    r.seed,
                    z.trained_loc_acc,
                    z.held_out_loc_acc,
                    z.held_out_loc_acc - z.trained_loc_acc
                ));
                reports.push(z);
            }
            let med = |f: &dyn Fn(&ex::ZeroShotReport) -> f64| ex::median(reports.iter().map(f).collect());
            let (t, h) = (med(&|z| z.trained_loc_acc), med(&|z| z.held_out_loc_acc));
            csv.push_str(&format!("median,{t:.6},{h:.6},{:.6}\n", h - t));
            write(&out.join("zeroshot.csv"), &csv)?;
            write(&out.join("zeroshot.json"), serde_json::to_vec_pretty(&reports)?)?;
            print!("{csv}");
        }
    }
    run.finish(out)
}

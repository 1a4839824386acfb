use owsol::checkpoint::Checkpoint;
use owsol::data::DatasetSplit;
use owsol::params::{BiasFreeze, HyperParams};
use owsol::synthgen::{generate_dataset, GenConfig};
use owsol::trainer::{init_state, prepare, train, Mode, TrainConfig};
use owsol::Error;

fn small_dataset(seed: u64) -> DatasetSplit {
    generate_dataset(&GenConfig {
        n_known: 3,
        n_nov_s: 1,
        n_nov_d: 1,
        samples_per_class: 8,
        val_per_class: 0,
        test_per_class: 2,
        seed,
        ..GenConfig::default()
    })
    .unwrap()
}

fn small_config(mode: Mode) -> TrainConfig {
    TrainConfig::new(
        HyperParams {
            n_z: 4,
            n_c: 8,
            l_pos: 2,
            n_neg: 6,
            batch_size: 8,
            epochs: 1,
            seed: 5,
            ..HyperParams::default()
        },
        mode,
    )
}

#[test]
fn zero_learning_rate_keeps_weights_but_rotates_queues() {
    let ds = small_dataset(1);
    let mut cfg = small_config(Mode::Colearn);
    cfg.hyper.lr = 0.0;
    let init = init_state(cfg.encoder, cfg.hyper.seed).unwrap();
    let before = prepare(&ds, &init, &cfg).unwrap();
    let out = train(&ds, &cfg).unwrap();
    assert_eq!(out.state.online, init.online);
    assert_eq!(out.state.momentum, init.momentum);
    assert!(out.state.step_count > 0);
    let bank = out.rep_bank.unwrap();
    assert_ne!(bank, before.rep_bank);
    assert!(bank.lengths_ok());
    for k in ds.taxonomy.known() {
        assert_eq!(bank.positives(k).unwrap().len(), cfg.hyper.n_z);
    }
}

#[test]
fn one_epoch_clusters_twice() {
    let ds = small_dataset(2);
    let out = train(&ds, &small_config(Mode::Colearn)).unwrap();
    assert_eq!(out.clusterings, 2);
    assert_eq!(out.history.len(), 1);
    assert_eq!(out.history[0].labeled + out.history[0].unlabeled, ds.n_training());
}

#[test]
fn every_mode_trains_and_repeats_exactly() {
    let ds = small_dataset(3);
    for mode in Mode::ALL {
        let cfg = small_config(mode);
        let a = train(&ds, &cfg).unwrap();
        let b = train(&ds, &cfg).unwrap();
        assert_eq!(a, b, "{}", mode.name());
        assert!(a.state.online.is_finite());
        assert_eq!(a.ce_head.is_some(), mode == Mode::CeBaseline);
        assert_eq!(a.centroid_bank.is_some(), mode != Mode::CeBaseline);
    }
}

#[test]
fn frozen_biases_stay_zero() {
    let ds = small_dataset(4);
    for mode in [Mode::Colearn, Mode::CeBaseline] {
        let out = train(&ds, &small_config(mode)).unwrap();
        for l in out.state.online.layers() {
            assert!(l.bias.iter().all(|&b| b == 0.0));
        }
    }
    let mut cfg = small_config(Mode::SclOnly);
    cfg.hyper.freeze_bias = BiasFreeze::Projection;
    let out = train(&ds, &cfg).unwrap();
    let layers = out.state.online.layers();
    assert!(layers[..3].iter().any(|l| l.bias.iter().any(|&b| b != 0.0)));
    assert!(layers[3..].iter().all(|l| l.bias.iter().all(|&b| b == 0.0)));
}

#[test]
fn runaway_learning_rate_is_reported() {
    let ds = small_dataset(5);
    let mut cfg = small_config(Mode::SclOnly);
    cfg.hyper.lr = 1e30;
    // either the weights overflow or every unit dies first
    let r = train(&ds, &cfg);
    assert!(
        matches!(r, Err(Error::Diverged(_) | Error::DegenerateNorm(_))),
        "{:?}",
        r.map(|o| o.state.step_count)
    );
}

#[test]
fn checkpoint_round_trip() {
    let ds = small_dataset(6);
    let dir = tempfile::tempdir().unwrap();
    for mode in [Mode::Colearn, Mode::CeBaseline] {
        let cfg = small_config(mode);
        let out = train(&ds, &cfg).unwrap();
        let ckpt = out.checkpoint(&cfg, 1);
        let path = dir.path().join(mode.name());
        ckpt.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), ckpt);
    }
}

#[test]
fn tampered_header_is_rejected() {
    let ds = small_dataset(7);
    let cfg = small_config(Mode::SclOnly);
    let ckpt = train(&ds, &cfg).unwrap().checkpoint(&cfg, 1);
    let dir = tempfile::tempdir().unwrap();
    ckpt.save(dir.path()).unwrap();
    let path = dir.path().join("header.json");
    let text = std::fs::read_to_string(&path).unwrap();
    std::fs::write(&path, text.replace("\"epochs\": 1", "\"epochs\": 2")).unwrap();
    assert!(Checkpoint::load(dir.path()).is_err());
}

#[test]
fn invalid_hyperparameters_are_config_errors() {
    let ds = small_dataset(8);
    let mut cfg = small_config(Mode::Colearn);
    cfg.hyper.n_neg = 100;
    let err = train(&ds, &cfg).unwrap_err();
    assert!(matches!(err, Error::ConfigInvalid(_)));
    assert!(err.is_config_error());
}

mod common;

use mtlaug::checkpoint;
use mtlaug::cli::load_corpus;
use mtlaug::config::ExperimentConfig;
use mtlaug::Error;
use mtlaug_core::corpus::Dataset;
use mtlaug_core::eval::{loso_splits, Setup};
use mtlaug_core::train::{Trainer, TrainerState};

struct Fixture {
    setup: Setup,
    train: Dataset,
    val: Dataset,
    pool: Dataset,
    hash: String,
}

fn fixture(dir: &std::path::Path, overrides: &[&str]) -> Fixture {
    let path = common::write_config(dir);
    let mut sets: Vec<String> = vec!["train.max_epochs=4".into(), "train.regenerate_augmentations=true".into()];
    sets.extend(overrides.iter().map(|s| s.to_string()));
    let cfg = ExperimentConfig::load(Some(&path), &sets, None).unwrap();
    let data = load_corpus(&cfg.corpus).unwrap();
    let pool = load_corpus(&cfg.target).unwrap().unlabeled();
    let split = &loso_splits(&data, 0).unwrap()[0];
    let mut setup = cfg.setup().unwrap();
    setup.train.seed = cfg.seed;
    Fixture {
        train: data.select(&split.train),
        val: data.select(&split.val),
        pool,
        hash: cfg.hash(),
        setup,
    }
}

fn trainer(f: &Fixture) -> Trainer {
    Trainer::new(&f.train, &f.val, Some(&f.pool), &f.setup.extractor, &f.setup.model, &f.setup.train).unwrap()
}

fn reload(f: &Fixture, dir: &std::path::Path) -> Trainer {
    let t = trainer(f);
    let state = checkpoint::load(dir, &f.hash).unwrap().into_state(&t.model.store, &t.adam).unwrap();
    Trainer::resume(&f.train, &f.val, Some(&f.pool), &f.setup.extractor, &f.setup.model, &f.setup.train, state).unwrap()
}

fn assert_same(a: &TrainerState, b: &TrainerState) {
    for ((_, x), (_, y)) in a.params.iter().zip(b.params.iter()) {
        let (xb, yb): (Vec<u32>, Vec<u32>) = (
            x.value.data().iter().map(|v| v.to_bits()).collect(),
            y.value.data().iter().map(|v| v.to_bits()).collect(),
        );
        assert_eq!(xb, yb, "{}", x.name);
    }
    assert!(a.centers == b.centers, "centers");
    assert!(a.adam == b.adam, "adam");
    assert!(a.best == b.best, "best");
    assert!(a.schedule == b.schedule, "schedule");
    assert!(a.rng == b.rng, "rng");
    assert_eq!(a.history.rows.len(), b.history.rows.len());
    for (x, y) in a.history.rows.iter().zip(&b.history.rows) {
        assert!(x == y, "{x:?} != {y:?}");
    }
    assert_eq!(a.history.steps.len(), b.history.steps.len());
    for (x, y) in a.history.steps.iter().zip(&b.history.steps) {
        assert!(x == y, "{x:?} != {y:?}");
    }
    assert_eq!(
        (a.input_mean.to_bits(), a.input_std.to_bits(), a.epoch, a.unlabeled_cursor, a.done),
        (b.input_mean.to_bits(), b.input_std.to_bits(), b.epoch, b.unlabeled_cursor, b.done)
    );
    assert_eq!(a.unlabeled_order, b.unlabeled_order);
}

#[test]
fn save_load_round_trip_is_exact() {
    let tmp = tempfile::tempdir().unwrap();
    let f = fixture(tmp.path(), &[]);
    let mut t = trainer(&f);
    t.run_epoch().unwrap();
    let ck = tmp.path().join("ck");
    checkpoint::save(&ck, &t.state(), &f.hash).unwrap();
    assert!(checkpoint::exists(&ck));
    assert_same(&t.state(), &reload(&f, &ck).state());
}

#[test]
fn interrupted_run_matches_uninterrupted_trajectory() {
    let tmp = tempfile::tempdir().unwrap();
    let f = fixture(tmp.path(), &[]);
    let mut whole = trainer(&f);
    let mut trajectory = Vec::new();
    while !whole.is_done() {
        whole.run_epoch().unwrap();
        trajectory.push(whole.state());
    }
    assert!(trajectory.len() >= 3);

    let ck = tmp.path().join("ck");
    let mut part = trainer(&f);
    part.run_epoch().unwrap();
    checkpoint::save(&ck, &part.state(), &f.hash).unwrap();
    drop(part);
    let mut k = 0;
    loop {
        let mut t = reload(&f, &ck);
        assert_same(&t.state(), &trajectory[k]);
        if t.is_done() {
            break;
        }
        t.run_epoch().unwrap();
        k += 1;
        checkpoint::save(&ck, &t.state(), &f.hash).unwrap();
    }
    assert_eq!(k + 1, trajectory.len());
}

#[test]
fn corruption_is_detected() {
    let tmp = tempfile::tempdir().unwrap();
    let f = fixture(tmp.path(), &[]);
    let mut t = trainer(&f);
    t.run_epoch().unwrap();
    let ck = tmp.path().join("ck");
    checkpoint::save(&ck, &t.state(), &f.hash).unwrap();
    let tensors = ck.join("tensors.bin");
    let mut bytes = std::fs::read(&tensors).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x40;
    std::fs::write(&tensors, &bytes).unwrap();
    assert!(matches!(checkpoint::load(&ck, &f.hash), Err(Error::Integrity { .. })));
    bytes.truncate(mid);
    std::fs::write(&tensors, &bytes).unwrap();
    assert!(matches!(checkpoint::load(&ck, &f.hash), Err(Error::Integrity { .. })));
}

#[test]
fn config_mismatch_is_refused() {
    let tmp = tempfile::tempdir().unwrap();
    let f = fixture(tmp.path(), &[]);
    let g = fixture(tmp.path(), &["train.lr=0.0005"]);
    assert_ne!(f.hash, g.hash);
    let mut t = trainer(&f);
    t.run_epoch().unwrap();
    let ck = tmp.path().join("ck");
    checkpoint::save(&ck, &t.state(), &f.hash).unwrap();
    assert!(matches!(checkpoint::load(&ck, &g.hash), Err(Error::ConfigMismatch { .. })));
}

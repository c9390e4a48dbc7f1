use std::path::PathBuf;

use capsib_core::data::{load_mnist, mnist_paths, Dataset, Split};
use capsib_core::model::*;
use capsib_core::rng::{uniform_tensor, SplitRng};
use capsib_core::training::*;
use capsib_core::{Precision, Tensor};

fn tiny_model() -> ModelConfig {
    ModelConfig {
        mode: Mode::Supervised,
        input_shape: [1, 8, 8],
        encoder: vec![
            ConvSpec { filters: 8, kernel: 3, stride: 1, padding: 0 },
            ConvSpec { filters: 8, kernel: 3, stride: 2, padding: 0 },
        ],
        primary_dim: 4,
        classes: 3,
        capsule_dim: 4,
        mask: MaskMode::Vector,
        decoder: DecoderSpec::Fc { hidden: vec![16] },
        batch_norm: false,
    }
}

fn tiny_train(epochs: usize) -> TrainConfig {
    TrainConfig { epochs, batch_size: 8, learning_rate: 0.01, seed: 5, ..TrainConfig::default() }
}

/// Class k brightens row band k; noise elsewhere.
fn toy_data(n: usize, seed: u64, split: Split) -> Dataset {
    let noise = uniform_tensor::<f32>(&mut SplitRng::new(seed).stream(9), &[n, 1, 8, 8], 0.2).map(f32::abs);
    let labels: Vec<usize> = (0..n).map(|i| (i * 7 + seed as usize) % 3).collect();
    let mut data = noise.into_data();
    for (i, &y) in labels.iter().enumerate() {
        for r in (y * 2)..(y * 2 + 3) {
            for c in 0..8 {
                data[i * 64 + r * 8 + c] = 0.9;
            }
        }
    }
    Dataset::new(Tensor::new(vec![n, 1, 8, 8], data), Some(labels), split).unwrap()
}

#[test]
fn repeated_steps_overfit_a_tiny_batch() {
    let ds = toy_data(8, 1, Split::Train);
    let (x, y) = ds.gather(&(0..8).collect::<Vec<_>>());
    let mut t = Trainer::<f32>::new(tiny_model(), tiny_train(1)).unwrap();
    let first = t.train_step(&x, y.as_deref()).unwrap().loss;
    let mut last = first;
    for _ in 1..50 {
        last = t.train_step(&x, y.as_deref()).unwrap().loss;
        assert!(last.is_consistent(), "{last:?}");
    }
    assert!(last.total < 0.5 * first.total, "{} -> {}", first.total, last.total);
    assert_eq!(t.adam().t, 50);
}

#[test]
fn zero_beta_matches_objective_without_the_term() {
    let ds = toy_data(8, 2, Split::Train);
    let (x, y) = ds.gather(&(0..8).collect::<Vec<_>>());
    let with = TrainConfig { beta: 0.0, ..tiny_train(1) };
    let without = TrainConfig { information_term: false, beta: 0.7, ..tiny_train(1) };
    let mut a = Trainer::<f32>::new(tiny_model(), with).unwrap();
    let mut b = Trainer::<f32>::new(tiny_model(), without).unwrap();
    for step in 0..50 {
        let la = a.train_step(&x, y.as_deref()).unwrap().loss;
        let lb = b.train_step(&x, y.as_deref()).unwrap().loss;
        assert!((la.total - lb.total).abs() <= 1e-7, "step {step}: {} vs {}", la.total, lb.total);
        assert_eq!(lb.beta, 0.0);
        assert!(lb.is_consistent());
    }
    assert_eq!(a.params(), b.params());
}

#[test]
fn supervised_total_is_margin_plus_weighted_terms() {
    let ds = toy_data(8, 3, Split::Train);
    let (x, y) = ds.gather(&(0..8).collect::<Vec<_>>());
    let cfg = TrainConfig { beta: 2.5, alpha: 0.3, ..tiny_train(1) };
    let mut t = Trainer::<f64>::new(tiny_model(), cfg).unwrap();
    let l = t.train_step(&x, y.as_deref()).unwrap().loss;
    let want = l.margin + 0.3 * l.reconstruction + 2.5 * l.information;
    assert!((l.total - want).abs() < 1e-12);
    assert!(l.information < 0.0 && l.information >= -0.5);
}

#[test]
fn fit_is_deterministic_and_logs_train_and_test_rows() {
    let (train, test) = (toy_data(40, 4, Split::Train), toy_data(20, 40, Split::Test));
    let run = || {
        let mut t = Trainer::<f32>::new(tiny_model(), tiny_train(2)).unwrap();
        let mut seen = 0;
        let rows = t
            .fit(&train, Some(&test), |_, r| {
                seen += r.len();
                Ok(())
            })
            .unwrap();
        assert_eq!(seen, 4);
        (rows, t.params().clone())
    };
    let (r1, p1) = run();
    let (r2, p2) = run();
    assert_eq!(r1, r2);
    assert_eq!(p1, p2);
    let kinds: Vec<_> = r1.iter().map(|r| (r.epoch, r.split)).collect();
    assert_eq!(kinds, [(1, Split::Train), (1, Split::Test), (2, Split::Train), (2, Split::Test)]);
    for r in &r1 {
        assert!(r.mean_std_z >= 0.0 && r.mean_abs_z >= 0.0);
        assert!(r.breakdown(1.0).is_consistent(), "{r:?}");
        let acc = r.accuracy.unwrap();
        assert!((0.0..=1.0).contains(&acc));
    }
}

#[test]
fn resumed_training_equals_uninterrupted() {
    let (train, test) = (toy_data(24, 6, Split::Train), toy_data(10, 60, Split::Test));
    let mut straight = Trainer::<f32>::new(tiny_model(), tiny_train(2)).unwrap();
    let rows = straight.fit(&train, Some(&test), |_, _| Ok(())).unwrap();

    let mut half = Trainer::<f32>::new(tiny_model(), tiny_train(2)).unwrap();
    half.run_epoch(&train).unwrap();
    half.evaluate(&test).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.ckpt");
    Checkpoint::from_trainer(&half).save(&path).unwrap();
    let mut resumed = Checkpoint::<f32>::load(&path).unwrap().resume(&tiny_model()).unwrap();
    assert_eq!(resumed.epoch(), 1);
    let tail = resumed.fit(&train, Some(&test), |_, _| Ok(())).unwrap();
    assert_eq!(tail, rows[2..]);
    assert_eq!(resumed.params(), straight.params());
    assert_eq!(resumed.adam(), straight.adam());
}

#[test]
fn checkpoint_bytes_round_trip_exactly() {
    let train = toy_data(16, 7, Split::Train);
    let mut t = Trainer::<f64>::new(tiny_model(), tiny_train(1)).unwrap();
    t.run_epoch(&train).unwrap();
    let bytes = Checkpoint::from_trainer(&t).to_bytes();
    let back = Checkpoint::<f64>::from_bytes(&bytes).unwrap();
    assert_eq!(back, Checkpoint::from_trainer(&t));
    assert_eq!(back.to_bytes(), bytes);
    assert_eq!(peek_precision(&bytes).unwrap(), Precision::F64);
    assert_eq!(content_hash(&bytes).len(), 64);

    let dir = tempfile::tempdir().unwrap();
    let (p1, p2) = (dir.path().join("1"), dir.path().join("2"));
    back.save(&p1).unwrap();
    Checkpoint::<f64>::load(&p1).unwrap().save(&p2).unwrap();
    assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
}

#[test]
fn damaged_or_mismatched_checkpoints_are_refused() {
    let t = Trainer::<f32>::new(tiny_model(), tiny_train(1)).unwrap();
    let bytes = Checkpoint::from_trainer(&t).to_bytes();
    let load = |b: &[u8]| Checkpoint::<f32>::from_bytes(b).unwrap_err();

    let mut flipped = bytes.clone();
    let mid = flipped.len() / 2;
    flipped[mid] ^= 0x10;
    assert!(matches!(load(&flipped), CheckpointError::Corrupt(_)));
    assert!(matches!(load(&bytes[..bytes.len() - 1]), CheckpointError::Corrupt(_)));
    assert!(matches!(load(&bytes[..20]), CheckpointError::Corrupt(_)));
    assert!(matches!(load(b"nope"), CheckpointError::BadMagic));
    let mut future = bytes.clone();
    future[8..12].copy_from_slice(&(CHECKPOINT_VERSION + 1).to_le_bytes());
    assert!(matches!(load(&future), CheckpointError::Version { found: 2, expected: 1 }));
    assert!(matches!(
        Checkpoint::<f64>::from_bytes(&bytes).unwrap_err(),
        CheckpointError::Precision { found: Precision::F32, .. }
    ));

    let other = ModelConfig { capsule_dim: 6, ..tiny_model() };
    let err = Checkpoint::<f32>::from_bytes(&bytes).unwrap().resume(&other).unwrap_err();
    assert!(matches!(err, TrainError::Checkpoint(CheckpointError::ConfigMismatch(_))), "{err}");

    let mut ck = Checkpoint::<f32>::from_bytes(&bytes).unwrap();
    ck.model = other;
    assert!(matches!(ck.into_trainer().unwrap_err(), TrainError::Checkpoint(CheckpointError::ConfigMismatch(_))));
}

#[test]
fn non_finite_input_aborts_with_component() {
    let mut t = Trainer::<f32>::new(tiny_model(), tiny_train(1)).unwrap();
    let x = Tensor::full(&[2, 1, 8, 8], f32::NAN);
    let err = t.train_step(&x, Some(&[0, 1])).unwrap_err();
    assert!(matches!(err, TrainError::NonFinite { component: "forward" }), "{err}");
    assert!(err.to_string().starts_with("non-finite"));
}

#[test]
fn invalid_configs_are_rejected() {
    for bad in [
        TrainConfig { beta: -1.0, ..TrainConfig::default() },
        TrainConfig { beta: f64::NAN, ..TrainConfig::default() },
        TrainConfig { alpha: 0.0, ..TrainConfig::default() },
        TrainConfig { batch_size: 0, ..TrainConfig::default() },
        TrainConfig { routing_iterations: 0, ..TrainConfig::default() },
    ] {
        assert!(matches!(Trainer::<f32>::new(tiny_model(), bad), Err(TrainError::Config(_))));
    }
    let d = TrainConfig::default();
    assert_eq!((d.learning_rate, d.epochs, d.routing_iterations), (0.001, 100, 3));
    let desk = TrainConfig::desk();
    assert_eq!((desk.epochs, desk.batch_size, desk.train_samples, desk.test_samples), (5, 64, Some(10_000), Some(2_000)));
}

#[test]
fn metrics_rows_round_trip_through_csv() {
    let row = MetricsRow {
        epoch: 3,
        split: Split::Test,
        margin: 0.125,
        recon: 0.04,
        info: -0.4801,
        total: 0.2,
        accuracy: Some(0.9725),
        mean_abs_z: 0.011,
        mean_std_z: 0.02,
        beta: 0.01,
        dim: 8,
        seed: 2,
    };
    assert_eq!(MetricsRow::parse_csv(&row.csv()), Some(row.clone()));
    let unsup = MetricsRow { accuracy: None, split: Split::Train, ..row };
    assert_eq!(MetricsRow::parse_csv(&unsup.csv()), Some(unsup.clone()));
    assert_eq!(CSV_HEADER.split(',').count(), unsup.csv().split(',').count());
    assert!(MetricsRow::parse_csv("1,valid,0,0,0,0,,0,0,0,8,1").is_none());
}

fn data_root() -> PathBuf {
    std::env::var_os("CAPSIB_DATA_DIR").map(PathBuf::from).unwrap_or_else(|| PathBuf::from("/root/data"))
}

#[test]
fn untrained_model_is_near_chance() {
    let root = data_root();
    let cfg = TrainConfig { seed: 11, ..TrainConfig::desk() };
    let (model, ds) = if mnist_paths(&root, Split::Test).0.exists() {
        (ModelConfig::table1(), load_mnist(&root, Split::Test).unwrap().head(2000))
    } else {
        eprintln!("MNIST not found under {}; using synthetic 10-class data", root.display());
        let m = ModelConfig { classes: 10, input_shape: [1, 8, 8], ..tiny_model() };
        let x = uniform_tensor::<f32>(&mut SplitRng::new(3).stream(4), &[2000, 1, 8, 8], 1.0).map(f32::abs);
        let y = (0..2000).map(|i| (i * 37 + i / 7) % 10).collect();
        (m, Dataset::new(x, Some(y), Split::Test).unwrap())
    };
    let t = Trainer::<f32>::new(model, cfg).unwrap();
    let row = t.evaluate(&ds).unwrap();
    let acc = row.accuracy.unwrap();
    assert!((acc - 0.1).abs() <= 0.05, "accuracy {acc}");
    assert!(row.mean_std_z >= 0.0);
}

#[test]
fn sweep_runs_every_cell_and_marks_failures() {
    let (train, test) = (toy_data(16, 8, Split::Train), toy_data(8, 80, Split::Test));
    let mut cells = SweepCell::grid(&[0.0, 0.5], &[2, 4], &[1]);
    assert_eq!(cells.len(), 4);
    cells.push(SweepCell { beta: -1.0, dim: 4, seed: 1 });
    let saved = std::sync::Mutex::new(Vec::new());
    let on_done = |i: usize, t: &Trainer<f32>, rows: &[MetricsRow]| {
        assert_eq!(rows.len(), 2);
        saved.lock().unwrap().push((i, t.model().config().capsule_dim));
        Ok(())
    };
    let out = beta_sweep::<f32>(&tiny_model(), &tiny_train(1), &cells, &train, Some(&test), 3, &on_done);
    assert_eq!(out.len(), 5);
    for (o, c) in out.iter().zip(&cells) {
        assert_eq!(&o.cell, c);
    }
    assert!(out[..4].iter().all(|o| o.rows.as_ref().is_ok_and(|r| r.len() == 2)));
    assert!(out[4].rows.as_ref().unwrap_err().contains("beta"));
    let last = out[1].last().unwrap();
    assert_eq!((last.split, last.beta, last.dim), (Split::Test, 0.5, 2));
    let mut saved = saved.into_inner().unwrap();
    saved.sort_unstable();
    assert_eq!(saved, [(0, 2), (1, 2), (2, 4), (3, 4)]);

    // the same cell alone gives the same rows
    let solo = beta_sweep::<f32>(&tiny_model(), &tiny_train(1), &cells[2..3], &train, Some(&test), 1, &|_, _, _| Ok(()));
    assert_eq!(solo[0].rows, out[2].rows);
}

fn outcome(beta: f64, seed: u64, acc: f64, std: f64, info: f64) -> SweepOutcome {
    let row = MetricsRow {
        epoch: 5,
        split: Split::Test,
        margin: 0.1,
        recon: 0.05,
        info,
        total: 0.0,
        accuracy: Some(acc),
        mean_abs_z: std / 2.0,
        mean_std_z: std,
        beta,
        dim: 8,
        seed,
    };
    SweepOutcome { cell: SweepCell { beta, dim: 8, seed }, rows: Ok(vec![row]) }
}

#[test]
fn trend_verdicts_take_the_seed_majority() {
    let mut outs = Vec::new();
    // seeds 0 and 1 follow every trend; seed 2 breaks them all
    for seed in 0..2 {
        outs.push(outcome(0.01, seed, 0.97, 0.2, -0.40));
        outs.push(outcome(1.0, seed, 0.96, 0.1, -0.45));
        outs.push(outcome(10.0, seed, 0.90, 0.05, -0.49));
    }
    outs.push(outcome(0.01, 2, 0.90, 0.05, -0.49));
    outs.push(outcome(1.0, 2, 0.96, 0.1, -0.45));
    outs.push(outcome(10.0, 2, 0.97, 0.2, -0.40));
    let v = trend_verdicts(&outs);
    assert_eq!(v.len(), 4);
    assert!(v.iter().all(|v| v.kind == VerdictKind::Pass && v.detail.starts_with("2/3")), "{v:?}");

    // a non-monotone middle β fails the info check only
    outs[1] = outcome(1.0, 0, 0.96, 0.1, -0.39);
    outs[4] = outcome(1.0, 1, 0.96, 0.1, -0.39);
    let v = trend_verdicts(&outs);
    let info = v.iter().find(|v| v.check == "info").unwrap();
    assert_eq!(info.kind, VerdictKind::Fail);
    assert!(info.to_string().starts_with("FAIL info dim=8"));
    assert_eq!(v.iter().filter(|v| v.kind == VerdictKind::Pass).count(), 3);

    let single: Vec<_> = (0..3).map(|s| outcome(0.01, s, 0.9, 0.1, -0.4)).collect();
    assert!(trend_verdicts(&single).iter().all(|v| v.kind == VerdictKind::Skipped));

    let mut failed = outs.clone();
    for o in failed.iter_mut() {
        o.rows = Err("boom".into());
    }
    assert!(trend_verdicts(&failed).iter().all(|v| v.kind == VerdictKind::Skipped));
}

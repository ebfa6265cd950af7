use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;
use crate::stimulus::{write_dataset, DatasetConfig, DatasetIndex, DatasetKind, RgbImage, Split, StimulusConfig};
use crate::tensor::Tensor;
use crate::zoo::{build_model, Arch, Model, ModelSpec, ParamGroup, ParamKind};

fn noise_set(n: usize, size: usize, seed: u64, label: impl Fn(usize) -> usize) -> LabeledSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let images: Vec<RgbImage> = (0..n)
        .map(|_| RgbImage::from_raw(size, size, (0..size * size * 3).map(|_| rng.gen()).collect()).unwrap())
        .collect();
    LabeledSet::from_images(&images, (0..n).map(label).collect()).unwrap()
}

fn small_cfg(steps: usize, interval: usize) -> TrainConfig {
    TrainConfig { batch_size: 8, max_steps: steps, eval_interval: interval, eval_batch: 32, ..TrainConfig::for_dataset(DatasetKind::MarkedLong) }
}

fn model(arch: Arch, size: usize, seed: u64) -> Model<f32> {
    build_model(&ModelSpec::for_arch(arch, size), seed).unwrap()
}

fn rec(step: usize, acc: f64) -> EvalRecord {
    EvalRecord { step, train_loss: None, val_accuracy: acc }
}

#[test]
fn sample_efficiency_trapezoid() {
    let flat: Vec<_> = (0..5).map(|i| rec(i * 100, 1.0)).collect();
    assert_eq!(sample_efficiency(&flat).unwrap(), 1.0);
    let linear = [rec(0, 0.5), rec(1000, 1.0)];
    assert!((sample_efficiency(&linear).unwrap() - 0.75).abs() < 1e-15);
    let dense: Vec<_> = (0..=10).map(|i| rec(i * 10, 0.5 + 0.05 * i as f64)).collect();
    assert!((sample_efficiency(&dense).unwrap() - 0.75).abs() < 1e-12);
    // Uneven spacing weights by step.
    let uneven = [rec(0, 0.0), rec(10, 1.0), rec(100, 1.0)];
    assert!((sample_efficiency(&uneven).unwrap() - 95.0 / 100.0).abs() < 1e-15);
    assert!(sample_efficiency(&[]).is_err());
    assert!(sample_efficiency(&[rec(5, 0.5), rec(5, 0.6)]).is_err());
    assert_eq!(sample_efficiency(&[rec(0, 0.6)]).unwrap(), 0.6);
}

#[test]
fn config_defaults_and_validation() {
    assert_eq!(TrainConfig::for_dataset(DatasetKind::MarkedLong).lr, 5e-4);
    let pf = TrainConfig::for_dataset(DatasetKind::PathFinder);
    assert_eq!((pf.lr, pf.beta1, pf.beta2, pf.eps), (1e-3, 0.9, 0.999, 1e-8));
    assert!(pf.validate().is_ok());
    assert!(TrainConfig { eval_interval: 300, ..pf.clone() }.validate().is_err());
    assert!(TrainConfig { batch_size: 0, ..pf.clone() }.validate().is_err());
    assert!(TrainConfig { lr: -1.0, ..pf.clone() }.validate().is_err());
}

#[test]
fn constant_label_is_learned() {
    let set = noise_set(64, 16, 1, |_| 1);
    let mut m = model(Arch::Ff1L, 16, 3);
    let log = train(&mut m, &set, &set, &small_cfg(50, 10)).unwrap();
    assert_eq!(log.metrics.final_val_accuracy, 1.0);
    assert!(log.records.windows(2).all(|w| w[0].step < w[1].step));
    assert_eq!(log.records.len(), 6);
    assert!(log.records.iter().all(|r| (0.0..=1.0).contains(&r.val_accuracy)));
    assert!((0.0..=1.0).contains(&log.metrics.sample_efficiency));
}

#[test]
fn identical_runs_identical_logs() {
    let set = noise_set(40, 16, 2, |i| i % 2);
    let run = || {
        let mut m = model(Arch::Gru1L, 16, 5);
        let log = train(&mut m, &set, &set, &TrainConfig { seed: 9, ..small_cfg(12, 4) }).unwrap();
        (serde_json::to_vec(&log).unwrap(), m.to_checkpoint(serde_json::Value::Null).unwrap().to_bytes().unwrap())
    };
    assert_eq!(run(), run());
}

#[test]
fn zero_lr_changes_nothing_and_stays_at_chance() {
    let set = noise_set(1000, 16, 4, |i| i % 2);
    let before = model(Arch::Ff1L, 16, 6);
    let mut after = before.clone();
    let cfg = TrainConfig { lr: 0.0, update_norm_stats: false, ..small_cfg(5, 5) };
    let log = train(&mut after, &set, &set, &cfg).unwrap();
    assert!(changed_params(&before, &after).is_empty());
    let acc = log.metrics.final_val_accuracy;
    assert!((acc - 0.5).abs() <= 0.05, "{acc}");
    // With running statistics enabled only those move.
    let mut stats = before.clone();
    train(&mut stats, &set, &set, &TrainConfig { update_norm_stats: true, ..cfg }).unwrap();
    let changed = changed_params(&before, &stats);
    assert!(!changed.is_empty());
    assert!(changed.iter().all(|&i| before.params[i].kind == ParamKind::RunningStat));
}

#[test]
fn evaluation_ignores_batch_partition() {
    let set = noise_set(37, 16, 5, |i| (i * 7 / 3) % 2);
    let mut m = model(Arch::Ff1L, 16, 7);
    train(&mut m, &set, &set, &small_cfg(4, 4)).unwrap();
    let a = evaluate(&m, &set, 1).unwrap();
    for b in [2, 5, 16, 37, 100] {
        assert_eq!(evaluate(&m, &set, b).unwrap(), a);
    }
    let (x, labels) = set.batch::<f32>(&(0..set.len()).collect::<Vec<_>>());
    assert_eq!(accuracy_of(&m.predict(&x).unwrap(), &labels).unwrap(), a);
}

#[test]
fn accuracy_of_oracle_predictions() {
    let labels = [0, 1, 1, 0];
    let perfect = Tensor::new(vec![4, 2], vec![0.9, 0.1, 0.2, 0.8, 0.3, 0.7, 0.6, 0.4]).unwrap();
    assert_eq!(accuracy_of(&perfect, &labels).unwrap(), 1.0);
    let wrong = perfect.map(|v| 1.0 - v);
    assert_eq!(accuracy_of(&wrong, &labels).unwrap(), 0.0);
    assert!(accuracy_of(&perfect, &[0, 1]).is_err());
}

#[test]
fn divergence_restores_last_good() {
    let set = noise_set(16, 16, 6, |i| i % 2);
    let start = model(Arch::Ff1L, 16, 8);
    let mut m = start.clone();
    let dir = tempfile::tempdir().unwrap();
    let ck = dir.path().join("last.ckpt");
    let cfg = TrainConfig { lr: 1e38, checkpoint: Some(ck.clone()), ..small_cfg(40, 40) };
    match train(&mut m, &set, &set, &cfg) {
        Err(Error::Diverged { last_good, .. }) => assert_eq!(last_good, Some(ck.clone())),
        other => panic!("expected divergence, got {other:?}"),
    }
    assert!(changed_params(&start, &m).is_empty());
    assert!(changed_params(&start, &load_model(&ck).unwrap()).is_empty());
}

#[test]
fn transfer_updates_only_readout_and_norms() {
    let src = noise_set(24, 16, 7, |i| i % 2);
    let mut pre = model(Arch::V1Net1L, 16, 9);
    train(&mut pre, &src, &src, &small_cfg(4, 4)).unwrap();
    let tgt = noise_set(24, 16, 8, |i| (i / 2) % 2);
    let mut tuned = pre.clone();
    let log = transfer_finetune(&mut tuned, &tgt, &tgt, &small_cfg(6, 3)).unwrap();
    let changed = changed_params(&pre, &tuned);
    assert_eq!(changed, pre.transfer_variables());
    assert_eq!(changed.len(), 10);
    for (i, p) in pre.params.iter().enumerate() {
        if matches!(p.group, ParamGroup::InputConv | ParamGroup::Intermediate) {
            assert!(!changed.contains(&i), "{} moved", p.name);
        }
    }
    assert_eq!(log.metrics.phase, "transfer");
    assert_eq!(log.metrics.zero_shot_accuracy, Some(log.records[0].val_accuracy));
    assert_eq!(log.metrics.trained_tensors, 8);

    let mut frozen = pre.clone();
    let cfg = TrainConfig { lr: 0.0, update_norm_stats: false, ..small_cfg(3, 3) };
    let log = transfer_finetune(&mut frozen, &tgt, &tgt, &cfg).unwrap();
    assert_eq!(log.metrics.final_val_accuracy, log.metrics.zero_shot_accuracy.unwrap());
}

#[test]
fn transfer_needs_partition() {
    let set = noise_set(8, 16, 9, |i| i % 2);
    let mut m: Model<f32> = build_model(&ModelSpec::for_arch(Arch::Ff1L, 16).without_norm(), 0).unwrap();
    // A normless model still has its readout, but nothing to adapt the
    // features with, so the protocol does not apply.
    assert!(matches!(transfer_finetune(&mut m, &set, &set, &small_cfg(2, 2)), Err(Error::InvalidArgument(_))));
}

#[test]
fn checkpoint_round_trip_reproduces_accuracy() {
    let set = noise_set(30, 16, 10, |i| i % 2);
    let mut m = model(Arch::FfSmcnn, 16, 11);
    train(&mut m, &set, &set, &small_cfg(4, 2)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_model(&m, &path, serde_json::json!({ "note": "test" })).unwrap();
    let back = load_model(&path).unwrap();
    assert_eq!(evaluate(&back, &set, 8).unwrap(), evaluate(&m, &set, 8).unwrap());
    assert!(changed_params(&m, &back).is_empty());

    let mut bytes = std::fs::read(&path).unwrap();
    bytes[0] ^= 0xFF;
    std::fs::write(&path, &bytes).unwrap();
    assert!(matches!(load_model(&path), Err(Error::Checkpoint(_))));
}

#[test]
fn runs_report_and_parallel_loading() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let dcfg = DatasetConfig {
        stimulus: StimulusConfig::for_kind(DatasetKind::MarkedLong, 32),
        count_per_class: 12,
        base_seed: 3,
        train_fraction: 0.75,
        augment: false,
    };
    write_dataset(&data, &dcfg, 2).unwrap();
    let index = DatasetIndex::open(&data).unwrap();
    let one = LabeledSet::load(&index, Split::Train, 1).unwrap();
    assert_eq!(one, LabeledSet::load(&index, Split::Train, 4).unwrap());
    assert_eq!(one.len(), 18);
    assert_eq!(one.balance(), [0.5, 0.5]);
    let val = LabeledSet::load(&index, Split::Val, 3).unwrap();
    assert_eq!(val.len(), 6);

    let runs = dir.path().join("runs");
    for seed in [0, 1] {
        let mut m = model(Arch::Ff1L, 32, seed);
        let cfg = TrainConfig { seed, ..small_cfg(2, 2) };
        let log = train(&mut m, &one, &val, &cfg).unwrap();
        let rc = RunConfig { arch: "FF-1L".into(), train: cfg, init_seed: seed, source_checkpoint: None };
        save_run(runs.join(format!("s{seed}")), &rc, &log, &m).unwrap();
        assert_eq!(load_log(runs.join(format!("s{seed}"))).unwrap().records, log.records);
    }
    let csv = report(&runs).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 3);
    assert_eq!(lines[0], REPORT_HEADER);
    let params = crate::zoo::count_params(&model(Arch::Ff1L, 32, 0));
    assert!(lines[1].starts_with(&format!("s0,FF-1L,train,0,{params},2,")));
    assert!(report(dir.path().join("nothing")).is_err());
}

#[test]
fn grid_and_ordering() {
    let set = noise_set(16, 16, 12, |i| i % 2);
    let cfg = ExperimentConfig {
        archs: vec![Arch::Ff1L, Arch::Atr1L],
        seeds: vec![0, 1],
        train: small_cfg(2, 1),
        budget_s: 60.0,
        probe_steps: 1,
        eval_probe: 8,
    };
    let proj = project(&cfg, &set, &set).unwrap();
    assert_eq!(proj.timings.len(), 2);
    assert!(proj.total_s > 0.0);
    let results = run_grid(&cfg, &set, &set, None).unwrap();
    assert_eq!(results.len(), 4);
    let wins = ordering_wins(&results, Arch::Ff1L, &[Arch::Atr1L]).unwrap();
    let rev = ordering_wins(&results, Arch::Atr1L, &[Arch::Ff1L]).unwrap();
    assert!(wins + rev <= 2);
    assert!(ordering_wins(&results, Arch::Ff1L, &[Arch::Gru1L]).is_err());
}

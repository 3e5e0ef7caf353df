use super::*;
use crate::data::{synthesize_split, Split, SynthConfig};
use rand::RngExt;

fn loss_of(logits: &Tensor<f64>, masks: &[Mask]) -> f64 {
    let tape = Tape::new();
    let x = tape.leaf(logits.clone());
    let loss = nll_loss(x, masks).unwrap().value().item();
    loss
}

fn random_case(seed: u64, h: usize, w: usize) -> (Tensor<f64>, Mask) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let logits = Tensor::from_fn(&[h, w, 2], |_| rng.random_range(-4.0..4.0));
    let mask = Mask::from_fn(h, w, |_, _| rng.random_bool(0.5));
    (logits, mask)
}

#[test]
fn uniform_logits_give_ln_c() {
    let mask = Mask::from_fn(3, 5, |r, c| (r * c) % 2 == 0);
    let loss = loss_of(&Tensor::full(&[3, 5, 2], 0.7), &[mask]);
    assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
}

#[test]
fn saturated_logits_give_near_zero() {
    let mask = Mask::from_fn(4, 4, |r, _| r < 2);
    let logits = Tensor::from_fn(&[4, 4, 2], |i| {
        let (pix, class) = (i / 2, i % 2);
        if usize::from(mask.labels()[pix]) == class { 20.0 } else { 0.0 }
    });
    let loss = loss_of(&logits, &[mask]);
    assert!(loss < 1e-8 && loss >= 0.0, "{loss}");
}

#[test]
fn matches_brute_force_and_is_shift_invariant() {
    let (logits, mask) = random_case(3, 4, 4);
    let mut expect = 0.0;
    for p in 0..16 {
        let (a, b) = (logits.data()[2 * p], logits.data()[2 * p + 1]);
        let z = a.exp() + b.exp();
        let t = if mask.labels()[p] == 1 { b } else { a };
        expect -= (t.exp() / z).ln();
    }
    expect /= 16.0;
    assert!((loss_of(&logits, &[mask.clone()]) - expect).abs() < 1e-6);
    let shifted = Tensor::from_fn(&[4, 4, 2], |i| logits.data()[i] + (i / 2) as f64 * 3.5);
    assert!((loss_of(&shifted, &[mask]) - expect).abs() < 1e-6);
}

#[test]
fn loss_rejects_bad_targets() {
    let tape = Tape::new();
    let x = tape.leaf(Tensor::<f64>::zeros(&[2, 2, 2]));
    assert!(nll_loss(x, &[Mask::filled(2, 3, true)]).is_err());
    let one_class = tape.leaf(Tensor::<f64>::zeros(&[2, 2, 1]));
    assert!(matches!(nll_loss(one_class, &[Mask::filled(2, 2, true)]), Err(Error::InvalidInput(_))));
}

#[test]
fn config_round_trip_and_invariants() {
    let cfg = TrainConfig { learning_rate: 5e-4, epochs: 3, seed: 11, ..Default::default() };
    let mut back = TrainConfig::default();
    back.apply(&KvFile::parse(&cfg.to_kv_string()).unwrap()).unwrap();
    assert_eq!(back, cfg);
    for bad in ["epochs = 0", "batch_size = 0", "learning_rate = 0", "momentum = 1"] {
        let mut c = TrainConfig::default();
        let r = c.apply(&KvFile::parse(bad).unwrap()).and_then(|_| c.validate());
        assert!(matches!(r, Err(Error::Config(_))), "{bad}");
    }
}

fn tiny(train: usize, val: usize) -> (Dataset, Dataset) {
    let cfg = SynthConfig { min_duration: 0.5, max_duration: 1.0, ..Default::default() }.with_counts(train, val, 0);
    let model = ModelConfig::toy();
    let t = synthesize_split(&cfg, 2, Split::Train).unwrap();
    let v = synthesize_split(&cfg, 2, Split::Val).unwrap();
    (
        Dataset::from_synth(Split::Train, &t, &model).unwrap(),
        Dataset::from_synth(Split::Val, &v, &model).unwrap(),
    )
}

#[test]
fn one_sample_one_epoch_is_one_step() {
    let (train_set, _) = tiny(1, 0);
    let cfg = TrainConfig { epochs: 1, ..Default::default() };
    let (state, report) = fit(&ModelConfig::toy(), &train_set, None, &cfg).unwrap();
    assert_eq!(report.step_losses.len(), 1);
    assert_eq!(state.optimizer.t, 1);
    assert_eq!(report.records.len(), 1);
    assert!(report.records[0].val.is_none());
}

#[test]
fn step_count_and_determinism() {
    let (train_set, val_set) = tiny(5, 2);
    let cfg = TrainConfig { epochs: 2, batch_size: 2, learning_rate: 1e-3, seed: 4, ..Default::default() };
    let (a, ra) = fit(&ModelConfig::toy(), &train_set, Some(&val_set), &cfg).unwrap();
    let (b, rb) = fit(&ModelConfig::toy(), &train_set, Some(&val_set), &cfg).unwrap();
    assert_eq!(ra.step_losses.len(), 6);
    assert_eq!(ra.step_losses, rb.step_losses);
    assert_eq!(a.model.params().values(), b.model.params().values());
    assert!(ra.records.iter().all(|r| r.val.is_some()));
    let other = TrainConfig { seed: 5, ..cfg };
    let (_, rc) = fit(&ModelConfig::toy(), &train_set, Some(&val_set), &other).unwrap();
    assert_ne!(ra.step_losses, rc.step_losses);
}

#[test]
fn resume_continues_the_trajectory() {
    let (train_set, val_set) = tiny(4, 2);
    let dir = tempfile::tempdir().unwrap();
    let full_cfg = TrainConfig { epochs: 3, batch_size: 2, learning_rate: 1e-3, seed: 8, ..Default::default() };
    let (full, full_report) = fit(&ModelConfig::toy(), &train_set, Some(&val_set), &full_cfg).unwrap();

    let first = TrainConfig { epochs: 1, ..full_cfg.clone() };
    let mut state = TrainState::new(ViTVS::<f32>::new(ModelConfig::toy(), 8).unwrap());
    let opts = TrainOptions { out_dir: Some(dir.path()), on_epoch: None };
    train(&mut state, &train_set, Some(&val_set), &first, opts).unwrap();
    assert!(dir.path().join(BEST_CHECKPOINT).exists());
    let mut resumed = TrainState::<f32>::load(&dir.path().join(LAST_CHECKPOINT)).unwrap();
    assert_eq!(resumed.epochs_done, 1);
    let report = train(&mut resumed, &train_set, Some(&val_set), &full_cfg, TrainOptions::default()).unwrap();
    assert_eq!(report.step_losses, full_report.step_losses);
    let losses = |r: &TrainReport| r.records.iter().map(|e| (e.loss, e.val)).collect::<Vec<_>>();
    assert_eq!(losses(&report), losses(&full_report));
    assert_eq!(resumed.model.params().values(), full.model.params().values());
    // The training checkpoint also loads as a bare model.
    ViTVS::<f32>::load(&dir.path().join(LAST_CHECKPOINT)).unwrap();
}

#[test]
fn dimension_mismatch_is_a_config_error() {
    let (train_set, _) = tiny(1, 0);
    let cfg = TrainConfig { epochs: 1, ..Default::default() };
    let err = fit(&ModelConfig::desk(), &train_set, None, &cfg).unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err}");
    let empty = Dataset { split: Split::Train, samples: vec![] };
    assert!(fit(&ModelConfig::toy(), &empty, None, &cfg).is_err());
}

#[test]
fn report_tsv_layout() {
    let report = TrainReport {
        records: vec![
            EpochRecord { epoch: 1, loss: 0.5, val: Some(ValScores { iou: 50.0, dice: 66.0, f1: 66.0 }), seconds: Some(1.25) },
            EpochRecord { epoch: 2, loss: 0.25, val: None, seconds: None },
        ],
        ..Default::default()
    };
    let tsv = report.to_tsv();
    let lines: Vec<&str> = tsv.lines().collect();
    assert_eq!(lines[0], REPORT_HEADER);
    assert_eq!(lines[1], "1\t0.50000000\t50.0000\t66.0000\t66.0000\t1.250");
    assert_eq!(lines[2], "2\t0.25000000\t-\t-\t-\t-");
}

#[test]
fn ablation_rows_and_repeat_determinism() {
    let (train_set, val_set) = tiny(2, 2);
    let cfg = TrainConfig { epochs: 1, batch_size: 2, learning_rate: 1e-3, ..Default::default() };
    let rows = ablate(&ModelConfig::toy(), &[1, 1], &cfg, &train_set, &val_set, &val_set, |_| {}).unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0].val, rows[1].val);
    assert_eq!(rows[0].variant, "ViTVS 1-block");
    for r in &rows {
        for v in [r.val.iou, r.val.dice, r.val.f1, r.test.iou, r.test.dice, r.test.f1] {
            assert!((0.0..=100.0).contains(&v));
        }
    }
    assert!(ablate(&ModelConfig::toy(), &[0], &cfg, &train_set, &val_set, &val_set, |_| {}).is_err());
}

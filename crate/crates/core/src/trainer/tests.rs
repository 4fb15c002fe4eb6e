use super::*;
use crate::backbone::AttachmentPlan;
use crate::data::DatasetSpec;

fn small() -> ExperimentConfig {
    let mut c = ExperimentConfig::quick_synthetic();
    c.backbone.stage_channels = vec![4, 8, 8];
    c.backbone.input_shape = [3, 8, 8];
    c.plan.k = 2;
    c.plan.distill = true;
    c.dataset = DatasetSpec::Synthetic {
        classes: 4,
        per_class: 8,
        test_per_class: 4,
        size: [3, 8, 8],
        seed: 3,
    };
    c.batch.train = 8;
    c.schedule.epochs = 3;
    c.schedule.milestones = vec![1];
    c
}

#[test]
fn run_records_every_epoch_and_drops_lr_at_milestone() {
    let mut t = Trainer::<f32>::new(small()).unwrap();
    let recs = t.run(None).unwrap();
    assert_eq!(recs.len(), 3);
    assert_eq!(recs.iter().map(|r| r.epoch).collect::<Vec<_>>(), vec![0, 1, 2]);
    assert_eq!(recs[0].lr, 0.05);
    assert_eq!(recs[1].lr, 0.05 * 0.1);
    for r in &recs {
        for a in [r.acc_si, r.acc_ag, r.acc_sd.unwrap()] {
            assert!((0.0..=1.0).contains(&a));
        }
        assert!(r.train_loss.is_finite() && r.wall_ms_per_iter > 0.0);
    }
    assert_eq!(t.step, 3 * 4);
}

#[test]
fn identical_seeds_give_bit_identical_losses() {
    let run = || {
        let mut t = Trainer::<f32>::new(small()).unwrap();
        t.run(None).unwrap();
        t.trace.iter().map(|s| s.loss.to_bits()).collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
    let mut other = small();
    other.seeds.data = 9;
    let mut t = Trainer::<f32>::new(other).unwrap();
    t.run(None).unwrap();
    assert_ne!(t.trace.iter().map(|s| s.loss.to_bits()).collect::<Vec<_>>(), run());
}

#[test]
fn checkpoint_round_trip_reproduces_predictions_bit_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = small();
    c.schedule.epochs = 1;
    let mut t = Trainer::<f32>::new(c).unwrap();
    t.run(Some(dir.path())).unwrap();
    let ck: Checkpoint<f32> = load_checkpoint(dir.path().join(CHECKPOINT_FILE)).unwrap();
    let norm = t.normalization();
    for s in InferenceScheme::ALL {
        let (a, _) = predict(&t.model, &t.test_set, &norm, s, 5).unwrap();
        let (b, _) = predict(&ck.model, &t.test_set, &norm, s, 5).unwrap();
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()), "{s}");
    }
    assert_eq!(ck.model.heads, t.model.heads);
    assert_eq!(ck.epoch, 1);
    assert_eq!(read_records(dir.path().join(METRICS_FILE)).unwrap().len(), 1);
    let saved = ExperimentConfig::load(dir.path().join(CONFIG_FILE)).unwrap();
    assert_eq!(saved, t.config);
}

#[test]
fn resumed_training_matches_uninterrupted_training() {
    let dir = tempfile::tempdir().unwrap();
    let mut full = Trainer::<f64>::new(small()).unwrap();
    full.run(None).unwrap();

    let mut first = small();
    first.schedule.epochs = 3;
    let mut t = Trainer::<f64>::new(first).unwrap();
    t.run_epoch().unwrap();
    save_checkpoint(dir.path().join("ck"), &t.checkpoint()).unwrap();
    let ck = load_checkpoint_for::<f64>(dir.path().join("ck"), &t.config).unwrap();
    let mut resumed = Trainer::resume(ck).unwrap();
    assert_eq!(resumed.lr(), t.config.lr_schedule().lr_at_epoch(1));
    resumed.run(None).unwrap();
    let tail: Vec<u64> = full.trace[4..].iter().map(|s| s.loss.to_bits()).collect();
    assert_eq!(resumed.trace.iter().map(|s| s.loss.to_bits()).collect::<Vec<_>>(), tail);
}

#[test]
fn checkpoint_refuses_foreign_config_and_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("ck");
    let t = Trainer::<f32>::new(small()).unwrap();
    save_checkpoint(&p, &t.checkpoint()).unwrap();
    let mut other = t.config.clone();
    other.plan.beta = 0.25;
    let err = load_checkpoint_for::<f32>(&p, &other).unwrap_err();
    assert!(matches!(err, SfeError::Config(_)), "{err}");
    assert!(load_checkpoint::<f64>(&p).is_err());

    let bytes = std::fs::read(&p).unwrap();
    let cases: Vec<(Vec<u8>, &str)> = vec![
        (bytes[..bytes.len() - 3].to_vec(), "payload"),
        (bytes[..10].to_vec(), "shorter"),
        ({
            let mut b = bytes.clone();
            b[8] = 7;
            b
        }, "version"),
        ({
            let mut b = bytes.clone();
            b[1] = b'x';
            b
        }, "magic"),
    ];
    for (b, needle) in cases {
        let err = checkpoint::decode_checkpoint::<f32>(&b, &p).unwrap_err().to_string();
        assert!(err.contains(needle), "{needle}: {err}");
    }
}

#[test]
fn non_finite_input_aborts_the_step() {
    let mut t = Trainer::<f32>::new(small()).unwrap();
    let mut x: Tensor<f32> = Tensor::zeros(vec![2, 3, 8, 8]);
    x.data_mut()[5] = f32::NAN;
    let err = t.train_step(&x, &[0, 1], 0.1).unwrap_err();
    assert!(matches!(err, SfeError::Numeric(_)), "{err}");
}

#[test]
fn baseline_config_trains() {
    let mut c = small();
    c.plan = AttachmentPlan::baseline();
    let mut t = Trainer::<f32>::new(c).unwrap();
    let recs = t.run(None).unwrap();
    assert!(recs.iter().all(|r| r.acc_sd.is_none()));
    assert_eq!(recs[0].acc_si, recs[0].acc_ag);
}

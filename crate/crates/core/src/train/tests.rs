use super::*;
use crate::layers::ModelConfig;
use rand::Rng;

fn dist(v: &[f64]) -> LabelDistribution<f64> {
    LabelDistribution::new(v.to_vec()).unwrap()
}

#[test]
fn kl_examples() {
    let y = dist(&[0.2, 0.5, 0.3]);
    assert_eq!(kl_loss(&y, &y), 0.0);
    assert!((kl_loss(&dist(&[1.0, 0.0]), &dist(&[0.5, 0.5])) - 2f64.ln()).abs() < 1e-15);
    let want = 0.3 * 0.6f64.ln() + 0.7 * 1.4f64.ln();
    assert!((kl_loss(&dist(&[0.3, 0.7]), &dist(&[0.5, 0.5])) - want).abs() < 1e-15);
    assert!((want - 0.08228).abs() < 1e-5);
    // clamped zero prediction stays finite
    assert!(kl_loss(&dist(&[0.5, 0.5]), &dist(&[1.0, 0.0])).is_finite());
}

#[test]
fn kl_is_cross_entropy_minus_entropy() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..1000 {
        let c = rng.random_range(2..8);
        let w = |rng: &mut ChaCha8Rng| (0..c).map(|_| rng.random::<f64>()).collect::<Vec<_>>();
        let y = LabelDistribution::from_weights(w(&mut rng)).unwrap();
        let p = LabelDistribution::from_weights(w(&mut rng)).unwrap();
        let kl = kl_loss(&y, &p);
        assert!(kl >= 0.0);
        assert!((kl - (cross_entropy(&y, &p) - entropy(&y))).abs() < 1e-6);
    }
}

fn store_with(values: &[f64]) -> ParamStore<f64> {
    let mut s = ParamStore::new();
    s.insert("p", Tensor::from_f64([values.len()], values).unwrap());
    s
}

fn grads(g: &[f64]) -> BTreeMap<String, Vec<f64>> {
    BTreeMap::from([("p".to_string(), g.to_vec())])
}

#[test]
fn adam_cases() {
    let mut s = store_with(&[1.0, -2.0]);
    let mut adam = Adam::new(0.1);
    adam.update(&mut s, &grads(&[0.0, 0.0])).unwrap();
    assert_eq!(s.get("p").unwrap().data(), &[1.0, -2.0]);

    let mut s = store_with(&[1.0, -2.0, 0.5]);
    let mut adam = Adam::new(0.01);
    let g = [0.3, -4.0, 1e-3];
    adam.update(&mut s, &grads(&g)).unwrap();
    for ((p, p0), g) in s.get("p").unwrap().data().iter().zip([1.0, -2.0, 0.5]).zip(g) {
        let want = p0 - 0.01 * g / (g.abs() + 1e-8);
        assert!((p - want).abs() < 1e-12);
    }

    // constant gradient: per-step change tends to lr
    let mut s = store_with(&[0.0]);
    let mut adam = Adam::new(1e-3);
    let mut prev = 0.0;
    for i in 0..2000 {
        adam.update(&mut s, &grads(&[2.5])).unwrap();
        let p = s.get("p").unwrap().data()[0];
        if i > 1500 {
            assert!(((prev - p) - 1e-3).abs() < 1e-9);
        }
        prev = p;
    }
}

fn tiny_config(kind: ModelKind, classes: usize) -> ModelConfig {
    ModelConfig {
        frames: 8,
        conv_filters: [2, 4, 4],
        hidden: 4,
        att_size: 4,
        ..ModelConfig::standard(kind, classes)
    }
}

/// Class `c` lights up band block `c` in both channels.
fn toy_set(per_class: usize, classes: usize, t: usize, seed: u64) -> SegmentSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut set = SegmentSet::new(classes);
    for c in 0..classes {
        for i in 0..per_class {
            let mut data = vec![0f32; 2 * 64 * t];
            for k in 0..2 {
                for m in 0..64 {
                    for tt in 0..t {
                        let on = m / 16 == c % 4;
                        data[(k * 64 + m) * t + tt] = rng.random_range(-1.0..1.0) + if on { 3.0 } else { 0.0 };
                    }
                }
            }
            set.push_recording(c * per_class + i, c, vec![SpectroImage::new(64, t, 2, data).unwrap()]);
        }
    }
    set
}

#[test]
fn loss_on_fixed_batch_decreases() {
    for seed in 0..3 {
        let cfg = tiny_config(ModelKind::AttCrnn, 3);
        let mut model = Model::<f64>::new(cfg.clone(), seed).unwrap();
        let set = toy_set(4, 3, 8, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let batch = sample_bc_batch::<f64, _>(&set.images, &set.labels, 3, 8, &mut rng).unwrap();
        let x: Vec<f64> = batch.iter().flat_map(|s| s.image.data().to_vec()).collect();
        let y: Vec<f64> = batch.iter().flat_map(|s| s.label.probs().to_vec()).collect();
        let x = Tensor::new([8, 2, 64, 8], x).unwrap();
        let y = Tensor::new([8, 3], y).unwrap();
        let mut adam = Adam::new(1e-4);
        // without dropout the batch loss is a fixed function of the weights
        model.config.conv_dropout = 0.0;
        model.config.rnn_dropout = 0.0;
        let losses: Vec<f64> = (0..11)
            .map(|_| optimize_batch(&mut model, &mut adam, x.clone(), &y, &mut rng).unwrap())
            .collect();
        assert!(losses[10] < losses[0], "seed {seed}: {losses:?}");
    }
}

#[test]
fn training_is_deterministic_and_fits_a_toy_set() {
    let set = toy_set(6, 3, 8, 1);
    let cfg = TrainConfig {
        epochs: 80,
        batch_size: 6,
        learning_rate: 1e-2,
        seed: 4,
        ..TrainConfig::default()
    };
    let run = || {
        let model = Model::<f32>::new(tiny_config(ModelKind::AttCrnn, 3), 4).unwrap();
        train(model, &set, None, &cfg, |_| {}).unwrap()
    };
    let a = run();
    let b = run();
    assert_eq!(a.history, b.history);
    assert_eq!(a.history.records.len(), 80);
    assert_eq!(segment_accuracy(&a.best, &set).unwrap(), a.history.records[a.best_epoch - 1].seg_accuracy);
    assert!(a.history.records.iter().any(|r| r.seg_accuracy >= 0.9), "{:?}", a.history);
    let mut csv = Vec::new();
    a.history.write_csv(&mut csv).unwrap();
    assert!(String::from_utf8(csv).unwrap().starts_with("epoch,train_loss,seg_accuracy\n1,"));
}

#[test]
fn cnn_baseline_trains() {
    let set = toy_set(3, 2, 8, 2);
    let cfg = TrainConfig {
        epochs: 60,
        batch_size: 6,
        learning_rate: 3e-3,
        kind: ModelKind::CnnBaseline,
        ..TrainConfig::default()
    };
    let model = Model::<f32>::new(tiny_config(ModelKind::CnnBaseline, 2), 0).unwrap();
    let out = train(model, &set, None, &cfg, |_| {}).unwrap();
    let mean = |r: &[EpochRecord]| r.iter().map(|r| r.train_loss).sum::<f64>() / r.len() as f64;
    let r = &out.history.records;
    assert!(mean(&r[50..]) < mean(&r[..10]), "{:?}", out.history);
}

#[test]
fn non_finite_loss_aborts() {
    let set = toy_set(2, 2, 8, 0);
    let mut model = Model::<f32>::new(tiny_config(ModelKind::AttCrnn, 2), 0).unwrap();
    model.params.get_mut("out.b").unwrap().data_mut()[0] = f32::NAN;
    let cfg = TrainConfig {
        epochs: 1,
        batch_size: 4,
        ..TrainConfig::default()
    };
    match train(model, &set, None, &cfg, |_| {}) {
        Err(Error::NonFiniteLoss { epoch: 1, batch: 1 }) => {}
        other => panic!("unexpected {:?}", other.map(|o| o.history)),
    }
}

#[test]
fn config_validation() {
    assert!(TrainConfig::default().validate().is_ok());
    for bad in [
        TrainConfig { epochs: 0, ..TrainConfig::default() },
        TrainConfig { batch_size: 0, ..TrainConfig::default() },
        TrainConfig { learning_rate: -1.0, ..TrainConfig::default() },
        TrainConfig { conv_dropout: 1.0, ..TrainConfig::default() },
    ] {
        assert!(bad.validate().is_err());
    }
}


use super::*;
use crate::config::{FfnKind, MoeSettings};
use crate::data::{generate_synthetic, make_windows, SyntheticSpec};
use crate::tensor::DType;

fn tiny(ffn: FfnKind) -> ModelConfig {
    ModelConfig {
        window: 4,
        joints: 2,
        joint_dim: 3,
        embed_dim: 4,
        num_layers: 1,
        hidden_dim: 8,
        dropout: 0.0,
        ffn,
        dtype: DType::F64,
        ..ModelConfig::default()
    }
}

fn samples(n: usize, seed: u64) -> Vec<WindowedSample> {
    let mut rng = Rng::seed_from(seed);
    let frames = Tensor::from_fn(&[4 + 5 + n - 1, 2, 3], |_| 0.5 * rng.normal());
    make_windows(&frames, 4, 5, 1).unwrap()
}

fn train_cfg() -> TrainConfig {
    TrainConfig {
        batch_size: 2,
        optimizer: OptimizerKind::Adam,
        epochs: 4,
        horizon: 5,
        ..TrainConfig::default()
    }
}

#[test]
fn mse_cases() {
    let a = Tensor::from_fn(&[3, 2, 3], |i| i as f64 * 0.1);
    assert_eq!(mse(&a, &a).unwrap(), 0.0);
    let b = Tensor::from_fn(&[3, 2, 3], |i| i as f64 * 0.1 + 1.0);
    assert!((mse(&a, &b).unwrap() - 1.0).abs() < 1e-15);
    let mut rng = Rng::seed_from(3);
    let c = Tensor::from_fn(&[3, 2, 3], |_| rng.normal());
    let mut oracle = 0.0;
    for n in 0..3 {
        for j in 0..2 {
            for k in 0..3 {
                oracle += (c.get(&[n, j, k]) - a.get(&[n, j, k])).powi(2);
            }
        }
    }
    oracle /= 18.0;
    assert!((mse(&c, &a).unwrap() - oracle).abs() / oracle < 1e-12);
    let mut g = Graph::new(DType::F64);
    let (cv, av) = (g.constant(c.clone()), g.constant(a.clone()));
    let l = mse_loss(&mut g, cv, av).unwrap();
    assert!((g.value(l).data()[0] - oracle).abs() / oracle < 1e-12);
    assert!(mse(&a, &Tensor::zeros(&[2, 2, 3])).is_err());
}

#[test]
fn full_teacher_forcing_feeds_ground_truth() {
    let model = StTransformer::new(tiny(FfnKind::Dense), &mut Rng::seed_from(1)).unwrap();
    let s = &samples(1, 2)[0];
    let (loss, _, forced) = unrolled_loss(&model, s, 1.0, &mut Rng::seed_from(3)).unwrap();
    assert!(forced.iter().all(|&f| f));
    let history = Tensor::cat_leading(&[&s.input, &s.target]).unwrap();
    let preds: Vec<Tensor> = (0..5)
        .map(|k| model.predict_next(&history.slice_leading(k, k + 4).unwrap()).unwrap())
        .collect();
    let refs: Vec<&Tensor> = preds.iter().collect();
    let oracle = mse(&Tensor::cat_leading(&refs).unwrap(), &s.target).unwrap();
    assert!((loss - oracle).abs() <= 1e-14 * oracle);
}

#[test]
fn minimal_teacher_forcing_is_autoregressive() {
    let model = StTransformer::new(tiny(moe()), &mut Rng::seed_from(4)).unwrap();
    let s = &samples(1, 5)[0];
    let (loss, _, forced) = unrolled_loss(&model, s, 1e-3, &mut Rng::seed_from(6)).unwrap();
    assert!(forced.iter().all(|&f| !f));
    let oracle = mse(&predict(&model, &s.input, 5).unwrap(), &s.target).unwrap();
    assert!((loss - oracle).abs() <= 1e-14 * oracle);
}

fn moe() -> FfnKind {
    FfnKind::SoftMoe(MoeSettings {
        num_experts: 2,
        slots_per_expert: 1,
        expert_hidden: 4,
    })
}

#[test]
fn identical_seeds_give_identical_losses() {
    let data = samples(6, 7);
    let run = || {
        let mut t = Trainer::new(tiny(FfnKind::Dense), train_cfg()).unwrap();
        (0..3)
            .map(|_| t.run_epoch(&data, &[]).unwrap().train_loss)
            .collect::<Vec<f64>>()
    };
    let a = run();
    assert_eq!(a, run());
    assert!(a[2] < a[0]);
}

#[test]
fn resume_reproduces_uninterrupted_run() {
    let data = samples(5, 8);
    let val = samples(2, 9);
    let cfg = ModelConfig {
        dropout: 0.2,
        ..tiny(moe())
    };
    let mut straight = Trainer::new(cfg.clone(), train_cfg()).unwrap();
    let mut first = Trainer::new(cfg.clone(), train_cfg()).unwrap();
    straight.run_epoch(&data, &val).unwrap();
    first.run_epoch(&data, &val).unwrap();
    let bytes = first.checkpoint().encode().unwrap();
    drop(first);
    let mut resumed = Trainer::resume(Checkpoint::decode(&bytes).unwrap(), cfg, train_cfg()).unwrap();
    for _ in 0..3 {
        let a = straight.run_epoch(&data, &val).unwrap();
        let b = resumed.run_epoch(&data, &val).unwrap();
        assert_eq!(a.train_loss.to_bits(), b.train_loss.to_bits());
        assert_eq!(a, b);
    }
    assert_eq!(straight.model().params(), resumed.model().params());
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    for kind in [OptimizerKind::Sgd, OptimizerKind::NoamOpt] {
        let mut t = Trainer::new(tiny(moe()), TrainConfig { optimizer: kind, ..train_cfg() }).unwrap();
        t.run_epoch(&samples(3, 10), &samples(1, 11)).unwrap();
        let ck = t.checkpoint();
        let bytes = ck.encode().unwrap();
        let back = Checkpoint::decode(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.encode().unwrap(), bytes);
    }
}

#[test]
fn checkpoint_corruption_is_detected() {
    let t = Trainer::new(tiny(FfnKind::Dense), train_cfg()).unwrap();
    let bytes = t.checkpoint().encode().unwrap();
    for pos in [8, 40, bytes.len() / 2, bytes.len() - 20, bytes.len() - 1] {
        let mut bad = bytes.clone();
        bad[pos] ^= 0x10;
        assert!(Checkpoint::decode(&bad).is_err(), "flip at {pos}");
    }
    assert!(Checkpoint::decode(&bytes[..bytes.len() - 9]).is_err());
    let mut magic = bytes.clone();
    magic[1] = b'X';
    assert!(matches!(
        Checkpoint::decode(&magic),
        Err(Error::Format(crate::error::FormatError::BadMagic { .. }))
    ));
}

#[test]
fn mismatched_config_is_rejected() {
    let t = Trainer::new(tiny(FfnKind::Dense), train_cfg()).unwrap();
    let ck = t.checkpoint();
    let other = ModelConfig {
        hidden_dim: 9,
        ..tiny(FfnKind::Dense)
    };
    assert!(matches!(
        Trainer::resume(ck.clone(), other, train_cfg()),
        Err(Error::FingerprintMismatch { .. })
    ));
    let lr = TrainConfig {
        base_lr: 0.5,
        ..train_cfg()
    };
    assert!(matches!(
        Trainer::resume(ck.clone(), tiny(FfnKind::Dense), lr),
        Err(Error::FingerprintMismatch { .. })
    ));
    let longer = TrainConfig {
        epochs: 10,
        total_effective_epochs: Some(4),
        ..train_cfg()
    };
    assert!(Trainer::resume(ck, tiny(FfnKind::Dense), longer).is_ok());
}

#[test]
fn nan_parameters_abort_with_step() {
    let mut t = Trainer::new(tiny(FfnKind::Dense), train_cfg()).unwrap();
    let id = t.model.embed.bias;
    t.model.params_mut().get_mut(id).data_mut()[0] = f64::NAN;
    let err = t.run_epoch(&samples(2, 12), &[]).unwrap_err();
    assert!(matches!(err, Error::NonFinite { .. }));
    assert!(err.to_string().contains("step 1"), "{err}");
}

#[test]
fn config_errors_are_listed_together() {
    let cfg = TrainConfig {
        batch_size: 0,
        warmup_steps: 0,
        tf_epsilon: 0.0,
        ..TrainConfig::default()
    };
    match cfg.validate() {
        Err(Error::Config(errs)) => assert_eq!(errs.len(), 3),
        other => panic!("{other:?}"),
    }
}

#[test]
fn metrics_csv_layout() {
    let log = vec![
        EpochMetrics {
            epoch: 1,
            train_loss: 0.5,
            val_loss: Some(0.25),
            mae: [Some(0.1), Some(0.2), Some(0.3), Some(0.4)],
        },
        EpochMetrics {
            epoch: 2,
            train_loss: 0.125,
            val_loss: None,
            mae: [None; 4],
        },
    ];
    assert_eq!(
        metrics_csv(&log),
        "epoch,train_loss,val_loss,mae6,mae12,mae18,mae24\n1,0.5,0.25,0.1,0.2,0.3,0.4\n2,0.125,,,,,\n"
    );
}

#[test]
fn train_from_dataset_with_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SyntheticSpec {
        num_sequences: 10,
        length: 4 + 24 + 2,
        joints: 2,
        joint_dim: 3,
        window: 4,
        ..SyntheticSpec::default()
    };
    generate_synthetic(&spec, dir.path().join("data")).unwrap();
    let ckpt_dir = dir.path().join("ckpt");
    let cfg = TrainConfig {
        epochs: 1,
        batch_size: 8,
        horizon: 24,
        checkpoint_dir: Some(ckpt_dir.clone()),
        ..train_cfg()
    };
    let model = ModelConfig {
        dtype: DType::F32,
        ..tiny(FfnKind::Dense)
    };
    let out = train(dir.path().join("data"), model.clone(), cfg.clone(), true).unwrap();
    assert_eq!(out.resumed_from, None);
    assert_eq!(out.trainer.log().len(), 1);
    let csv = fs::read_to_string(ckpt_dir.join(METRICS_FILE)).unwrap();
    assert_eq!(csv.lines().count(), 2);
    let more = TrainConfig {
        epochs: 2,
        total_effective_epochs: Some(1),
        ..cfg.clone()
    };
    let cfg1 = TrainConfig {
        total_effective_epochs: Some(1),
        ..cfg
    };
    // Same trajectory settings as the first run, so the fingerprint matches.
    assert_eq!(fingerprint(&model, &cfg1), fingerprint(&model, &more));
    let out = train(dir.path().join("data"), model, more, true).unwrap();
    assert_eq!(out.resumed_from, Some(1));
    assert_eq!(out.trainer.log().len(), 2);
}

use super::*;
use crate::config::MoeSettings;
use crate::params::Grads;

fn tiny(ffn: FfnKind) -> ModelConfig {
    ModelConfig {
        window: 4,
        joints: 3,
        joint_dim: 3,
        embed_dim: 4,
        num_layers: 1,
        num_heads_temporal: 1,
        num_heads_spatial: 1,
        hidden_dim: 8,
        dropout: 0.0,
        ffn,
        dtype: DType::F64,
    }
}

fn moe() -> FfnKind {
    FfnKind::SoftMoe(MoeSettings {
        num_experts: 2,
        slots_per_expert: 1,
        expert_hidden: 5,
    })
}

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = Rng::seed_from(seed);
    Tensor::from_fn(shape, |_| rng.normal())
}

fn set(model: &mut StTransformer, id: ParamId, f: impl Fn(usize) -> f64) {
    let t = model.params_mut().get_mut(id);
    for (i, v) in t.data_mut().iter_mut().enumerate() {
        *v = f(i);
    }
}

fn zero_params(model: &mut StTransformer, prefix: &str) {
    let ids: Vec<ParamId> = model
        .params()
        .iter()
        .filter(|(_, name, _)| name.starts_with(prefix) && !name.contains("norm"))
        .map(|(id, _, _)| id)
        .collect();
    for id in ids {
        set(model, id, |_| 0.0);
    }
}

#[test]
fn embedding_of_zero_weights_is_zero() {
    let mut model = StTransformer::new(tiny(FfnKind::Dense), &mut Rng::seed_from(1)).unwrap();
    let (w, b) = (model.embed.weight, model.embed.bias);
    set(&mut model, w, |_| 0.0);
    set(&mut model, b, |_| 0.0);
    let mut g = model.graph();
    let x = g.constant(random(&[4, 3, 3], 2));
    let e = model.embed_joints(&mut g, x).unwrap();
    assert!(g.value(e).data().iter().all(|&v| v == 0.0));
}

#[test]
fn embedding_matches_per_position_oracle() {
    let model = StTransformer::new(tiny(FfnKind::Dense), &mut Rng::seed_from(3)).unwrap();
    let x = random(&[4, 3, 3], 4);
    let mut g = model.graph();
    let xv = g.constant(x.clone());
    let e = model.embed_joints(&mut g, xv).unwrap();
    let e = g.value(e);
    let w = model.params().get(model.embed.weight);
    let b = model.params().get(model.embed.bias);
    for t in 0..4 {
        for s in 0..3 {
            for k in 0..4 {
                let want = b.get(&[k]) + (0..3).map(|m| x.get(&[t, s, m]) * w.get(&[m, k])).sum::<f64>();
                assert!((e.get(&[t, s, k]) - want).abs() < 1e-14);
            }
        }
    }
}

#[test]
fn positional_encoding_values() {
    let pe = positional_encoding(50, 8);
    for c in 0..8 {
        assert_eq!(pe.get(&[0, c]), if c % 2 == 0 { 0.0 } else { 1.0 });
    }
    assert!((pe.get(&[1, 0]) - 0.841_470_984_807_896_5).abs() < 1e-15);
    assert!((pe.get(&[1, 1]) - 1f64.cos()).abs() < 1e-15);
    assert!((pe.get(&[7, 2]) - (7.0 / 10000f64.powf(0.25)).sin()).abs() < 1e-15);
    assert!(pe.data().iter().all(|v| v.abs() <= 1.0));
}

#[test]
fn temporal_path_is_causal() {
    let model = StTransformer::new(tiny(FfnKind::Dense), &mut Rng::seed_from(5)).unwrap();
    let block = &model.blocks[0].temporal;
    let base = random(&[4, 3, 4], 6);
    let run = |x: &Tensor| {
        let mut g = model.graph();
        let v = g.constant(x.clone());
        let out = block.forward(&mut g, v, &mut ForwardOptions::eval()).unwrap();
        g.value(out.out).clone()
    };
    let y0 = run(&base);
    for k in 1..4 {
        let mut x = base.clone();
        for s in 0..3 {
            x.set(&[k, s, 1], x.get(&[k, s, 1]) + 3.0);
        }
        let y = run(&x);
        let per_frame = 12;
        assert_eq!(&y.data()[..k * per_frame], &y0.data()[..k * per_frame]);
        assert_ne!(&y.data()[k * per_frame..], &y0.data()[k * per_frame..]);
    }
}

#[test]
fn single_frame_attends_to_itself() {
    let cfg = ModelConfig {
        window: 1,
        ..tiny(FfnKind::Dense)
    };
    let model = StTransformer::new(cfg, &mut Rng::seed_from(7)).unwrap();
    let (_, records, _) = model.forward_with_records(&random(&[1, 3, 3], 8)).unwrap();
    assert_eq!(records[0].temporal.data(), &[1.0]);
}

#[test]
fn spatial_path_is_permutation_equivariant() {
    let model = StTransformer::new(tiny(FfnKind::Dense), &mut Rng::seed_from(9)).unwrap();
    let block = &model.blocks[0].spatial;
    let x = random(&[4, 3, 4], 10);
    let perm = [2, 0, 1];
    let px = Tensor::from_fn(&[4, 3, 4], |i| {
        let (t, s, e) = (i / 12, i / 4 % 3, i % 4);
        x.get(&[t, perm[s], e])
    });
    let run = |x: &Tensor| {
        let mut g = model.graph();
        let v = g.constant(x.clone());
        let out = block.forward(&mut g, v, &mut ForwardOptions::eval()).unwrap();
        (g.value(out.out).clone(), g.value(out.weights).clone())
    };
    let (y, w) = run(&x);
    let (py, _) = run(&px);
    for t in 0..4 {
        for s in 0..3 {
            for e in 0..4 {
                assert!((py.get(&[t, s, e]) - y.get(&[t, perm[s], e])).abs() < 1e-12);
            }
        }
    }
    for row in w.data().chunks(3) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn spatial_path_with_one_joint() {
    let cfg = ModelConfig {
        joints: 1,
        ..tiny(FfnKind::Dense)
    };
    let model = StTransformer::new(cfg, &mut Rng::seed_from(11)).unwrap();
    let (_, records, _) = model.forward_with_records(&random(&[4, 1, 3], 12)).unwrap();
    assert_eq!(records[0].spatial.data(), &[1.0]);
}

#[test]
fn dense_ffn_zero_weights_give_zero() {
    let mut model = StTransformer::new(tiny(FfnKind::Dense), &mut Rng::seed_from(13)).unwrap();
    zero_params(&mut model, "layers.0.temporal.ffn");
    let FeedForward::Dense(ffn) = &model.blocks[0].temporal.ffn else {
        unreachable!()
    };
    let mut g = model.graph();
    let x = g.constant(random(&[4, 12], 14));
    let y = ffn.forward(&mut g, x).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn dense_ffn_matches_hand_computation() {
    let model = StTransformer::new(tiny(FfnKind::Dense), &mut Rng::seed_from(15)).unwrap();
    let FeedForward::Dense(ffn) = &model.blocks[0].spatial.ffn else {
        unreachable!()
    };
    let p = model.params();
    let (w1, b1) = (p.get(ffn.inner.weight), p.get(ffn.inner.bias));
    let (w2, b2) = (p.get(ffn.outer.weight), p.get(ffn.outer.bias));
    let x = random(&[3, 16], 16);
    let mut g = model.graph();
    let xv = g.constant(x.clone());
    let y = ffn.forward(&mut g, xv).unwrap();
    for n in 0..3 {
        let h: Vec<f64> = (0..8)
            .map(|j| (b1.get(&[j]) + (0..16).map(|i| x.get(&[n, i]) * w1.get(&[i, j])).sum::<f64>()).max(0.0))
            .collect();
        for o in 0..16 {
            let want = b2.get(&[o]) + (0..8).map(|j| h[j] * w2.get(&[j, o])).sum::<f64>();
            assert!((g.value(y).get(&[n, o]) - want).abs() < 1e-12);
        }
    }
}

fn layer_norm_ref(x: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    x.iter().map(|v| (v - mean) / (var + 1e-5).sqrt()).collect()
}

#[test]
fn block_hand_trace_with_zero_sublayers() {
    let cfg = ModelConfig {
        window: 1,
        joints: 1,
        joint_dim: 2,
        embed_dim: 2,
        ..tiny(FfnKind::Dense)
    };
    let mut model = StTransformer::new(cfg, &mut Rng::seed_from(17)).unwrap();
    zero_params(&mut model, "layers.0");
    let mut g = model.graph();
    let x = g.constant(Tensor::new(vec![1, 1, 2], vec![1.0, -1.0]).unwrap());
    let out = model.blocks[0].forward(&mut g, x, &mut ForwardOptions::eval()).unwrap();
    let once = layer_norm_ref(&[1.0, -1.0]);
    let twice = layer_norm_ref(&once);
    let got = g.value(out.out).data();
    for k in 0..2 {
        assert!((got[k] - 2.0 * twice[k]).abs() < 1e-15);
    }
}

#[test]
fn projection_selects_weighted_frame() {
    let cfg = ModelConfig {
        joint_dim: 4,
        ..tiny(FfnKind::Dense)
    };
    let mut model = StTransformer::new(cfg, &mut Rng::seed_from(19)).unwrap();
    let proj = model.project.clone();
    set(&mut model, proj.reduce.weight, |i| if i / 4 == i % 4 { 1.0 } else { 0.0 });
    set(&mut model, proj.reduce.bias, |_| 0.0);
    set(&mut model, proj.collapse_weight, |i| if i == 2 { 1.0 } else { 0.0 });
    set(&mut model, proj.collapse_bias, |_| 0.5);
    let h = random(&[4, 3, 4], 20);
    let mut g = model.graph();
    let hv = g.constant(h.clone());
    let y = proj.forward(&mut g, hv).unwrap();
    assert_eq!(g.shape(y), &[1, 3, 4]);
    for s in 0..3 {
        for m in 0..4 {
            assert_eq!(g.value(y).get(&[0, s, m]), h.get(&[2, s, m]) + 0.5);
        }
    }
    let loss = g.sum(y);
    g.backward(loss).unwrap();
    let grads = g.param_grads();
    for id in [proj.reduce.weight, proj.collapse_weight, proj.collapse_bias] {
        assert!(grads.get(id).unwrap().iter().any(|&v| v != 0.0));
    }
}

#[test]
fn same_seed_same_model_and_eval_is_deterministic() {
    let cfg = ModelConfig {
        dropout: 0.5,
        ..tiny(moe())
    };
    let a = StTransformer::new(cfg.clone(), &mut Rng::seed_from(21)).unwrap();
    let b = StTransformer::new(cfg, &mut Rng::seed_from(21)).unwrap();
    let x = random(&[4, 3, 3], 22);
    let ya = a.predict_next(&x).unwrap();
    assert_eq!(ya, b.predict_next(&x).unwrap());
    assert_eq!(ya, a.predict_next(&x).unwrap());

    let train = |seed| {
        let mut rng = Rng::seed_from(seed);
        let mut g = a.graph();
        let v = g.constant(x.clone());
        let out = a.forward(&mut g, v, &mut ForwardOptions::train(&mut rng)).unwrap();
        g.value(out.frame).clone()
    };
    assert_eq!(train(1), train(1));
    assert_ne!(train(1), train(2));
    assert_ne!(train(1), ya);
}

#[test]
fn forward_is_composition_of_parts() {
    let cfg = ModelConfig {
        num_layers: 2,
        ..tiny(FfnKind::Dense)
    };
    let model = StTransformer::new(cfg, &mut Rng::seed_from(23)).unwrap();
    let x = random(&[4, 3, 3], 24);
    let mut g = model.graph();
    let xv = g.constant(x.clone());
    let mut h = model.embed_joints(&mut g, xv).unwrap();
    let pe = g.constant(positional_encoding(4, 4).reshape(&[4, 1, 4]).unwrap());
    h = g.add(h, pe).unwrap();
    for block in &model.blocks {
        let t = block.temporal.forward(&mut g, h, &mut ForwardOptions::eval()).unwrap();
        let s = block.spatial.forward(&mut g, h, &mut ForwardOptions::eval()).unwrap();
        h = g.add(t.out, s.out).unwrap();
    }
    let y = model.project.forward(&mut g, h).unwrap();
    assert_eq!(g.value(y), &model.predict_next(&x).unwrap());
}

#[test]
fn param_count_matches_allocation() {
    for ffn in [FfnKind::Dense, moe()] {
        for layers in 1..=3 {
            let cfg = ModelConfig {
                num_layers: layers,
                ..tiny(ffn.clone())
            };
            let model = StTransformer::new(cfg.clone(), &mut Rng::seed_from(1)).unwrap();
            assert_eq!(model.param_count(), cfg.param_count());
        }
    }
}

#[test]
fn wrong_window_shape_is_rejected() {
    let model = StTransformer::new(tiny(FfnKind::Dense), &mut Rng::seed_from(1)).unwrap();
    assert!(matches!(model.predict_next(&Tensor::zeros(&[3, 3, 3])), Err(Error::Shape(_))));
}

#[test]
fn recording_captures_every_layer() {
    let cfg = ModelConfig {
        num_layers: 2,
        ..tiny(moe())
    };
    let model = StTransformer::new(cfg, &mut Rng::seed_from(25)).unwrap();
    let (frame, attn, routing) = model.forward_with_records(&random(&[4, 3, 3], 26)).unwrap();
    assert_eq!(frame, model.predict_next(&random(&[4, 3, 3], 26)).unwrap());
    assert_eq!(attn.len(), 2);
    assert_eq!(routing.len(), 4);
    assert_eq!(attn[1].temporal.shape(), &[1, 4, 4]);
    assert_eq!(attn[1].spatial.shape(), &[1, 3, 3]);
    assert_eq!(routing[0].dispatch.shape(), &[4, 2]);
    assert_eq!(routing[1].dispatch.shape(), &[3, 2]);
}

fn loss_of(model: &StTransformer, x: &Tensor, probe: &Tensor) -> (f64, Grads) {
    let mut g = model.graph();
    let xv = g.constant(x.clone());
    let out = model.forward(&mut g, xv, &mut ForwardOptions::eval()).unwrap();
    let p = g.constant(probe.clone());
    let weighted = g.mul(out.frame, p).unwrap();
    let loss = g.sum(weighted);
    let value = g.value(loss).data()[0];
    g.backward(loss).unwrap();
    (value, g.param_grads())
}

fn gradient_check(ffn: FfnKind) {
    let mut model = StTransformer::new(tiny(ffn), &mut Rng::seed_from(27)).unwrap();
    // Perturb the zero-initialised biases and unit gains so every term is exercised.
    let mut rng = Rng::seed_from(28);
    let ids: Vec<ParamId> = model.params().ids().collect();
    for &id in &ids {
        for v in model.params_mut().get_mut(id).data_mut() {
            *v += 0.1 * rng.normal();
        }
    }
    let x = random(&[4, 3, 3], 29);
    let probe = random(&[1, 3, 3], 30);
    let (_, grads) = loss_of(&model, &x, &probe);
    // Key biases have exactly zero gradient, so the denominator needs a floor
    // above finite-difference noise.
    let h = 1e-5;
    let mut worst = 0.0f64;
    for &id in &ids {
        let analytic = grads.get(id).unwrap().to_vec();
        for (i, &a) in analytic.iter().enumerate() {
            let orig = model.params().get(id).data()[i];
            model.params_mut().get_mut(id).data_mut()[i] = orig + h;
            let up = loss_of(&model, &x, &probe).0;
            model.params_mut().get_mut(id).data_mut()[i] = orig - h;
            let down = loss_of(&model, &x, &probe).0;
            model.params_mut().get_mut(id).data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-5);
            worst = worst.max(rel);
        }
    }
    assert!(worst < 1e-4, "worst relative error {worst}");
}

#[test]
fn dense_model_gradients_match_finite_differences() {
    gradient_check(FfnKind::Dense);
}

#[test]
fn moe_model_gradients_match_finite_differences() {
    gradient_check(moe());
}

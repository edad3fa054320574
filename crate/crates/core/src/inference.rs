//! Autoregressive prediction and the dense-vs-MoE inference benchmark.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::{FfnKind, ModelConfig, MoeSettings, DEFAULT_HORIZON};
use crate::error::{Error, Result};
use crate::model::StTransformer;
use crate::moe::moe_param_count;
use crate::rng::Rng;
use crate::tensor::{DType, Tensor};

/// Anything that maps a `[T, S, M]` window to the next `[1, S, M]` frame.
pub trait NextFrame {
    fn window_len(&self) -> usize;
    fn next_frame(&self, window: &Tensor) -> Result<Tensor>;
}

impl NextFrame for StTransformer {
    fn window_len(&self) -> usize {
        self.config().window
    }

    fn next_frame(&self, window: &Tensor) -> Result<Tensor> {
        self.predict_next(window)
    }
}

/// Predicts `horizon` frames after `seed: [T, S, M]`, sliding the window
/// forward by one frame per step. Returns `[horizon, S, M]`.
pub fn predict<M: NextFrame + ?Sized>(model: &M, seed: &Tensor, horizon: usize) -> Result<Tensor> {
    if horizon == 0 {
        return Err(Error::config("horizon must be at least 1"));
    }
    let shape = seed.shape().to_vec();
    if shape.len() != 3 || shape[0] != model.window_len() {
        return Err(Error::shape(format!(
            "seed window must have {} frames, got shape {shape:?}",
            model.window_len()
        )));
    }
    let frame_len = shape[1] * shape[2];
    let mut window = seed.clone();
    let mut out = Vec::with_capacity(horizon * frame_len);
    for step in 0..horizon {
        let frame = model.next_frame(&window)?;
        if frame.len() != frame_len {
            return Err(Error::shape(format!("model produced frame of shape {:?}", frame.shape())));
        }
        if !frame.is_finite() {
            return Err(Error::non_finite(format!("predicted frame at step {step}")));
        }
        out.extend_from_slice(frame.data());
        let mut next = window.data()[frame_len..].to_vec();
        next.extend_from_slice(frame.data());
        window = Tensor::with_dtype(shape.clone(), next, seed.dtype())?;
    }
    Tensor::with_dtype(vec![horizon, shape[1], shape[2]], out, seed.dtype())
}

/// Repeats the last observed frame.
#[derive(Clone, Copy, Debug)]
pub struct ZeroVelocity {
    pub window: usize,
}

impl NextFrame for ZeroVelocity {
    fn window_len(&self) -> usize {
        self.window
    }

    fn next_frame(&self, window: &Tensor) -> Result<Tensor> {
        let t = window.shape()[0];
        window.slice_leading(t - 1, t)
    }
}

/// Extrapolates the last frame-to-frame difference linearly.
#[derive(Clone, Copy, Debug)]
pub struct ConstantVelocity {
    pub window: usize,
}

impl NextFrame for ConstantVelocity {
    fn window_len(&self) -> usize {
        self.window
    }

    fn next_frame(&self, window: &Tensor) -> Result<Tensor> {
        let t = window.shape()[0];
        if t < 2 {
            return Err(Error::shape("constant velocity needs at least two frames"));
        }
        let last = window.slice_leading(t - 1, t)?;
        let prev = window.slice_leading(t - 2, t - 1)?;
        let data = last.data().iter().zip(prev.data()).map(|(a, b)| 2.0 * a - b).collect();
        Tensor::with_dtype(last.shape().to_vec(), data, window.dtype())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BenchSpec {
    /// Architecture shared by every swept model; its `ffn` and `hidden_dim` are overridden.
    pub base: ModelConfig,
    pub dense_hidden: Vec<usize>,
    pub moe_experts: Vec<usize>,
    pub expert_hidden: usize,
    /// Seed windows per timed pass.
    pub test_windows: usize,
    pub horizon: usize,
    pub reps: usize,
    pub warmup: usize,
    pub threads: usize,
    pub seed: u64,
}

impl Default for BenchSpec {
    fn default() -> Self {
        BenchSpec {
            base: ModelConfig {
                window: 16,
                joints: 8,
                embed_dim: 8,
                num_layers: 1,
                dropout: 0.0,
                ..ModelConfig::default()
            },
            dense_hidden: vec![64, 128, 256, 512, 1024, 2048],
            moe_experts: vec![2, 4, 6, 8, 16, 32],
            expert_hidden: 16,
            test_windows: 8,
            horizon: DEFAULT_HORIZON,
            reps: 5,
            warmup: 2,
            threads: 1,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BenchKind {
    Dense,
    Moe,
}

impl BenchKind {
    pub fn name(self) -> &'static str {
        match self {
            BenchKind::Dense => "dense",
            BenchKind::Moe => "moe",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub kind: BenchKind,
    /// Hidden size for dense rows, expert count for MoE rows.
    pub param: usize,
    pub total_params: usize,
    /// Parameters inside the feed-forward blocks only.
    pub ffn_params: usize,
    pub seconds: f64,
    pub preds_per_sec: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchMeta {
    pub hardware: String,
    pub dtype: DType,
    pub threads: usize,
    pub reps: usize,
    pub warmup: usize,
    pub test_windows: usize,
    pub horizon: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    pub meta: BenchMeta,
}

impl BenchReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("kind,param,total_params,seconds,preds_per_sec\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{}\n",
                r.kind.name(),
                r.param,
                r.total_params,
                r.seconds,
                r.preds_per_sec
            ));
        }
        s
    }

    pub fn rows_of(&self, kind: BenchKind) -> impl Iterator<Item = &BenchRow> {
        self.rows.iter().filter(move |r| r.kind == kind)
    }

    /// Time at the largest swept value over time at the smallest.
    pub fn time_ratio(&self, kind: BenchKind) -> Option<f64> {
        let lo = self.rows_of(kind).min_by_key(|r| r.param)?;
        let hi = self.rows_of(kind).max_by_key(|r| r.param)?;
        Some(hi.seconds / lo.seconds)
    }

    pub fn ffn_param_ratio(&self, kind: BenchKind) -> Option<f64> {
        let lo = self.rows_of(kind).min_by_key(|r| r.param)?;
        let hi = self.rows_of(kind).max_by_key(|r| r.param)?;
        Some(hi.ffn_params as f64 / lo.ffn_params as f64)
    }
}

fn hardware_label() -> String {
    std::fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|s| {
            s.lines()
                .find(|l| l.starts_with("model name"))
                .and_then(|l| l.split(':').nth(1))
                .map(|v| v.trim().to_string())
        })
        .unwrap_or_else(|| std::env::consts::ARCH.to_string())
}

/// Analytic count of parameters inside the feed-forward blocks.
pub fn ffn_param_count(cfg: &ModelConfig) -> usize {
    use crate::config::Path;
    let per_layer: usize = [Path::Temporal, Path::Spatial]
        .into_iter()
        .map(|p| match cfg.moe_config(p) {
            Some(mc) => moe_param_count(&mc),
            None => {
                let (w, h) = (cfg.width(p), cfg.hidden_dim);
                2 * w * h + h + w
            }
        })
        .sum();
    per_layer * cfg.num_layers
}

fn timed_pass(model: &StTransformer, seeds: &[Tensor], horizon: usize, threads: usize) -> Result<f64> {
    let start = Instant::now();
    if threads <= 1 {
        for s in seeds {
            predict(model, s, horizon)?;
        }
    } else {
        let chunk = seeds.len().div_ceil(threads);
        std::thread::scope(|scope| {
            let handles: Vec<_> = seeds
                .chunks(chunk)
                .map(|part| {
                    scope.spawn(move || -> Result<()> {
                        for s in part {
                            predict(model, s, horizon)?;
                        }
                        Ok(())
                    })
                })
                .collect();
            handles
                .into_iter()
                .try_for_each(|h| h.join().expect("benchmark worker panicked"))
        })?;
    }
    Ok(start.elapsed().as_secs_f64())
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Times one configuration: `warmup` untimed passes, then the median of `reps`.
pub fn bench_config(cfg: &ModelConfig, spec: &BenchSpec) -> Result<(usize, f64)> {
    let root = Rng::seed_from(spec.seed);
    let model = StTransformer::new(cfg.clone(), &mut root.split("weights"))?;
    let mut rng = root.split("inputs");
    let seeds: Vec<Tensor> = (0..spec.test_windows)
        .map(|_| {
            Tensor::from_fn(&[cfg.window, cfg.joints, cfg.joint_dim], |_| 0.3 * rng.normal()).to_dtype(cfg.dtype)
        })
        .collect();
    for _ in 0..spec.warmup {
        timed_pass(&model, &seeds, spec.horizon, spec.threads)?;
    }
    let times = (0..spec.reps.max(1))
        .map(|_| timed_pass(&model, &seeds, spec.horizon, spec.threads))
        .collect::<Result<Vec<f64>>>()?;
    Ok((model.param_count(), median(times)))
}

pub fn bench_inference(spec: &BenchSpec) -> Result<BenchReport> {
    let mut configs = Vec::new();
    for &h in &spec.dense_hidden {
        let cfg = ModelConfig {
            hidden_dim: h,
            ffn: FfnKind::Dense,
            ..spec.base.clone()
        };
        configs.push((BenchKind::Dense, h, cfg));
    }
    for &n in &spec.moe_experts {
        let cfg = ModelConfig {
            ffn: FfnKind::SoftMoe(MoeSettings {
                num_experts: n,
                slots_per_expert: 1,
                expert_hidden: spec.expert_hidden,
            }),
            ..spec.base.clone()
        };
        configs.push((BenchKind::Moe, n, cfg));
    }
    let preds = (spec.test_windows * spec.horizon) as f64;
    let mut rows = Vec::new();
    for (kind, param, cfg) in configs {
        let (total_params, seconds) = bench_config(&cfg, spec)?;
        log::info!("bench {} {param}: {seconds:.4}s", kind.name());
        rows.push(BenchRow {
            kind,
            param,
            total_params,
            ffn_params: ffn_param_count(&cfg),
            seconds,
            preds_per_sec: preds / seconds,
        });
    }
    Ok(BenchReport {
        rows,
        meta: BenchMeta {
            hardware: hardware_label(),
            dtype: spec.base.dtype,
            threads: spec.threads,
            reps: spec.reps,
            warmup: spec.warmup,
            test_windows: spec.test_windows,
            horizon: spec.horizon,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::cell::RefCell;

    struct Constant(Tensor);

    impl NextFrame for Constant {
        fn window_len(&self) -> usize {
            3
        }
        fn next_frame(&self, _: &Tensor) -> Result<Tensor> {
            Ok(self.0.clone())
        }
    }

    /// Predicts the mean of the window and remembers every window it saw.
    struct Probe(RefCell<Vec<Tensor>>);

    impl NextFrame for Probe {
        fn window_len(&self) -> usize {
            4
        }
        fn next_frame(&self, w: &Tensor) -> Result<Tensor> {
            self.0.borrow_mut().push(w.clone());
            let (t, rest) = (w.shape()[0], w.len() / w.shape()[0]);
            Tensor::new(
                vec![1, w.shape()[1], w.shape()[2]],
                (0..rest)
                    .map(|i| (0..t).map(|k| w.data()[k * rest + i]).sum::<f64>() / t as f64 + 1.0)
                    .collect(),
            )
        }
    }

    #[test]
    fn baselines_on_a_ramp() {
        // Frame k holds the value k in every channel.
        let seed = Tensor::from_fn(&[3, 2, 3], |i| (i / 6) as f64);
        let zv = predict(&ZeroVelocity { window: 3 }, &seed, 4).unwrap();
        assert!(zv.data().iter().all(|&v| v == 2.0));
        let cv = predict(&ConstantVelocity { window: 3 }, &seed, 4).unwrap();
        for (i, &v) in cv.data().iter().enumerate() {
            assert_eq!(v, (3 + i / 6) as f64);
        }
    }

    #[test]
    fn constant_model_repeats_its_output() {
        let c = Constant(Tensor::new(vec![1, 2, 1], vec![0.5, -2.0]).unwrap());
        let out = predict(&c, &Tensor::zeros(&[3, 2, 1]), 5).unwrap();
        assert_eq!(out.shape(), &[5, 2, 1]);
        for f in out.data().chunks(2) {
            assert_eq!(f, &[0.5, -2.0]);
        }
    }

    #[test]
    fn window_evolves_by_one_frame_per_step() {
        let p = Probe(RefCell::new(Vec::new()));
        let seed = Tensor::from_fn(&[4, 2, 3], |i| i as f64);
        let preds = predict(&p, &seed, 6).unwrap();
        let windows = p.0.borrow();
        assert_eq!(windows.len(), 6);
        let history = Tensor::cat_leading(&[&seed, &preds]).unwrap();
        for (k, w) in windows.iter().enumerate() {
            assert_eq!(w, &history.slice_leading(k, k + 4).unwrap());
        }
    }

    #[test]
    fn horizon_one_is_single_forward() {
        let cfg = ModelConfig {
            window: 3,
            joints: 2,
            embed_dim: 4,
            num_layers: 1,
            hidden_dim: 8,
            dtype: DType::F64,
            ..ModelConfig::default()
        };
        let model = StTransformer::new(cfg, &mut Rng::seed_from(1)).unwrap();
        let seed = Tensor::from_fn(&[3, 2, 3], |i| (i as f64).sin());
        let out = predict(&model, &seed, 1).unwrap();
        assert_eq!(out, model.predict_next(&seed).unwrap());
        assert_eq!(predict(&model, &seed, 7).unwrap(), predict(&model, &seed, 7).unwrap());
    }

    struct Exploding;

    impl NextFrame for Exploding {
        fn window_len(&self) -> usize {
            2
        }
        fn next_frame(&self, w: &Tensor) -> Result<Tensor> {
            let last = w.data()[w.len() - 1];
            Tensor::new(vec![1, 1, 1], vec![if last > 2.0 { f64::NAN } else { last + 1.0 }])
        }
    }

    #[test]
    fn nan_reports_step() {
        let err = predict(&Exploding, &Tensor::zeros(&[2, 1, 1]), 10).unwrap_err();
        assert!(err.to_string().contains("step 3"), "{err}");
    }

    #[test]
    fn bench_reports_analytic_counts() {
        let spec = BenchSpec {
            base: ModelConfig {
                window: 4,
                joints: 3,
                embed_dim: 4,
                num_layers: 1,
                ..ModelConfig::default()
            },
            dense_hidden: vec![8, 16],
            moe_experts: vec![2, 8],
            expert_hidden: 4,
            test_windows: 2,
            horizon: 2,
            reps: 1,
            warmup: 0,
            ..BenchSpec::default()
        };
        let report = bench_inference(&spec).unwrap();
        assert_eq!(report.rows.len(), 4);
        for r in &report.rows {
            let cfg = match r.kind {
                BenchKind::Dense => ModelConfig {
                    hidden_dim: r.param,
                    ..spec.base.clone()
                },
                BenchKind::Moe => ModelConfig {
                    ffn: FfnKind::SoftMoe(MoeSettings {
                        num_experts: r.param,
                        slots_per_expert: 1,
                        expert_hidden: 4,
                    }),
                    ..spec.base.clone()
                },
            };
            assert_eq!(r.total_params, cfg.param_count());
            assert!(r.seconds > 0.0);
        }
        assert_eq!(report.ffn_param_ratio(BenchKind::Moe), Some(4.0));
        let csv = report.to_csv();
        assert!(csv.starts_with("kind,param,total_params,seconds,preds_per_sec\n"));
        assert_eq!(csv.lines().count(), 5);
    }
}

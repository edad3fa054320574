//! Training: loss, optimizers, schedules, the unrolled training step and
//! checkpointed epoch loop.

mod checkpoint;
mod optim;
mod schedule;

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use checkpoint::{fingerprint, Checkpoint};
pub use optim::{Optimizer, OptimizerKind, OptimizerState};
pub use schedule::{noam_lr, teacher_forcing_ratio};

use crate::autodiff::{Graph, Var};
use crate::config::{ModelConfig, DEFAULT_HORIZON};
use crate::data::{load_split, resolve_manifest, windows_for, PoseSequence, Split, WindowedSample};
use crate::error::{Error, Result};
use crate::inference::{predict, NextFrame};
use crate::metrics::{euler_mae, EvalResult, MaeAccumulator, DEFAULT_STD_THRESHOLD, MAE_HORIZONS};
use crate::model::{ForwardOptions, StTransformer};
use crate::params::Grads;
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const CHECKPOINT_FILE: &str = "last.stmc";
pub const METRICS_FILE: &str = "metrics.csv";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    /// Learning rate for sgd and adam; noamopt follows its schedule.
    pub base_lr: f64,
    pub warmup_steps: u64,
    /// Model dimension in the noam schedule; the embedding size when unset.
    pub noam_dim: Option<usize>,
    pub epochs: usize,
    /// Epoch at which teacher forcing bottoms out; `epochs` when unset.
    pub total_effective_epochs: Option<usize>,
    pub tf_epsilon: f64,
    pub seed: u64,
    pub checkpoint_dir: Option<PathBuf>,
    pub save_every_n_epochs: usize,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_grad_norm: Option<f64>,
    pub horizon: usize,
    pub train_stride: usize,
    /// Stride between evaluation windows; the model window when unset.
    pub eval_stride: Option<usize>,
    pub std_threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            optimizer: OptimizerKind::NoamOpt,
            base_lr: 1e-3,
            warmup_steps: 4000,
            noam_dim: None,
            epochs: 20,
            total_effective_epochs: None,
            tf_epsilon: 1e-3,
            seed: 0,
            checkpoint_dir: None,
            save_every_n_epochs: 1,
            clip_grad_norm: Some(1.0),
            horizon: DEFAULT_HORIZON,
            train_stride: 1,
            eval_stride: None,
            std_threshold: DEFAULT_STD_THRESHOLD,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.batch_size == 0 {
            errs.push("batch_size must be at least 1".to_string());
        }
        if self.warmup_steps == 0 {
            errs.push("warmup_steps must be at least 1".into());
        }
        if self.noam_dim == Some(0) {
            errs.push("noam_dim must be at least 1".into());
        }
        if self.epochs == 0 {
            errs.push("epochs must be at least 1".into());
        }
        if self.total_effective_epochs == Some(0) {
            errs.push("total_effective_epochs must be at least 1".into());
        }
        if !(self.tf_epsilon > 0.0 && self.tf_epsilon <= 1.0) {
            errs.push(format!("tf_epsilon must be in (0, 1], got {}", self.tf_epsilon));
        }
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            errs.push(format!("base_lr must be finite and non-negative, got {}", self.base_lr));
        }
        if self.save_every_n_epochs == 0 {
            errs.push("save_every_n_epochs must be at least 1".into());
        }
        if let Some(c) = self.clip_grad_norm {
            if !(c > 0.0 && c.is_finite()) {
                errs.push(format!("clip_grad_norm must be positive, got {c}"));
            }
        }
        if self.horizon == 0 || self.train_stride == 0 || self.eval_stride == Some(0) {
            errs.push("horizon and strides must be at least 1".into());
        }
        if !(self.std_threshold >= 0.0) {
            errs.push("std_threshold must be non-negative".into());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    pub fn effective_epochs(&self) -> usize {
        self.total_effective_epochs.unwrap_or(self.epochs)
    }

    pub fn noam_dim_for(&self, model: &ModelConfig) -> usize {
        self.noam_dim.unwrap_or(model.embed_dim)
    }

    /// The settings that shape the optimisation trajectory, with defaults resolved.
    pub fn trajectory_view(&self, model: &ModelConfig) -> serde_json::Value {
        serde_json::json!({
            "batch_size": self.batch_size,
            "optimizer": self.optimizer,
            "base_lr": self.base_lr,
            "warmup_steps": self.warmup_steps,
            "noam_dim": self.noam_dim_for(model),
            "total_effective_epochs": self.effective_epochs(),
            "tf_epsilon": self.tf_epsilon,
            "seed": self.seed,
            "clip_grad_norm": self.clip_grad_norm,
            "horizon": self.horizon,
            "train_stride": self.train_stride,
        })
    }
}

/// `mean((pred - target)²)` on the tape.
pub fn mse_loss(g: &mut Graph<'_>, pred: Var, target: Var) -> Result<Var> {
    let d = g.sub(pred, target)?;
    let sq = g.mul(d, d)?;
    Ok(g.mean(sq))
}

pub fn mse(pred: &Tensor, target: &Tensor) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(Error::shape(format!(
            "mse of {:?} against {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    let sum: f64 = pred.data().iter().zip(target.data()).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(sum / pred.len() as f64)
}

/// Result of one optimiser update.
#[derive(Clone, Debug)]
pub struct StepOutcome {
    pub loss: f64,
    /// Per sample, whether the ground-truth frame was fed back after each of
    /// the first `horizon - 1` predictions.
    pub teacher_forced: Vec<Vec<bool>>,
    pub grad_norm: f64,
    pub lr: f64,
}

/// Unrolls `horizon` predictions for one sample on a fresh tape and returns
/// the mean squared error over all of them with its gradients.
pub fn unrolled_loss(
    model: &StTransformer,
    sample: &WindowedSample,
    tf_ratio: f64,
    rng: &mut Rng,
) -> Result<(f64, Grads, Vec<bool>)> {
    let t = model.config().window;
    let horizon = sample.target.shape()[0];
    let mut g = model.graph();
    let mut window = g.constant(sample.input.clone());
    let mut preds: Vec<Var> = Vec::with_capacity(horizon);
    let mut forced = Vec::with_capacity(horizon.saturating_sub(1));
    for k in 0..horizon {
        if k > 0 {
            let use_truth = rng.uniform() < tf_ratio;
            forced.push(use_truth);
            let next = if use_truth {
                g.constant(sample.target.slice_leading(k - 1, k)?)
            } else {
                preds[k - 1]
            };
            window = if t == 1 {
                next
            } else {
                let rest = g.slice(window, 0, 1, t)?;
                g.concat(&[rest, next], 0)?
            };
        }
        let out = model.forward(&mut g, window, &mut ForwardOptions::train(rng))?;
        preds.push(out.frame);
    }
    let all = g.concat(&preds, 0)?;
    let target = g.constant(sample.target.clone());
    let loss = mse_loss(&mut g, all, target)?;
    let value = g.value(loss).data()[0];
    if !value.is_finite() {
        return Err(Error::non_finite("training loss"));
    }
    g.backward(loss)?;
    Ok((value, g.param_grads(), forced))
}

/// One optimiser update on a batch: the mean of the per-sample unrolled losses.
pub fn train_step(
    model: &mut StTransformer,
    optimizer: &mut Optimizer,
    batch: &[&WindowedSample],
    tf_ratio: f64,
    rng: &mut Rng,
    clip: Option<f64>,
) -> Result<StepOutcome> {
    if batch.is_empty() {
        return Err(Error::Data("empty batch".into()));
    }
    let mut grads = Grads::zeros_like(model.params());
    let mut loss = 0.0;
    let mut teacher_forced = Vec::with_capacity(batch.len());
    for sample in batch {
        let (l, g, forced) = unrolled_loss(model, sample, tf_ratio, rng)
            .map_err(|e| annotate_step(e, optimizer.state().step + 1))?;
        loss += l;
        grads.accumulate(&g);
        teacher_forced.push(forced);
    }
    let inv = 1.0 / batch.len() as f64;
    grads.scale(inv);
    let grad_norm = match clip {
        Some(max) => grads.clip_global_norm(max),
        None => grads.global_norm(),
    };
    if !grad_norm.is_finite() {
        return Err(Error::non_finite(format!(
            "gradient at step {}",
            optimizer.state().step + 1
        )));
    }
    let lr = optimizer.step(model.params_mut(), &grads)?;
    Ok(StepOutcome {
        loss: loss * inv,
        teacher_forced,
        grad_norm,
        lr,
    })
}

fn annotate_step(e: Error, step: u64) -> Error {
    match e {
        Error::NonFinite { context } => Error::non_finite(format!("{context} at step {step}")),
        other => other,
    }
}

/// Fully autoregressive evaluation over `windows`.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub loss: f64,
    pub mae: EvalResult,
    pub windows: usize,
}

pub fn evaluate<M: NextFrame + ?Sized>(model: &M, windows: &[WindowedSample], std_threshold: f64) -> Result<Evaluation> {
    let mut acc = MaeAccumulator::default();
    let mut loss = 0.0;
    for w in windows {
        let pred = predict(model, &w.input, w.target.shape()[0])?;
        loss += mse(&pred, &w.target)?;
        acc.push(&euler_mae(&pred, &w.target, std_threshold)?);
    }
    Ok(Evaluation {
        loss: loss / windows.len().max(1) as f64,
        mae: acc.finish(),
        windows: windows.len(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    /// 1-based index of the completed epoch.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    /// MAE@6, 12, 18, 24 in radians; `None` past the evaluated horizon.
    pub mae: [Option<f64>; 4],
}

pub fn metrics_csv(log: &[EpochMetrics]) -> String {
    let mut s = String::from("epoch,train_loss,val_loss,mae6,mae12,mae18,mae24\n");
    let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
    for m in log {
        let mae = m.mae;
        s.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            m.epoch,
            m.train_loss,
            opt(m.val_loss),
            opt(mae[0]),
            opt(mae[1]),
            opt(mae[2]),
            opt(mae[3])
        ));
    }
    s
}

pub struct Trainer {
    model: StTransformer,
    config: TrainConfig,
    optimizer: Optimizer,
    rng: Rng,
    epoch: usize,
    log: Vec<EpochMetrics>,
}

impl Trainer {
    pub fn new(model_config: ModelConfig, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let root = Rng::seed_from(config.seed);
        let model = StTransformer::new(model_config, &mut root.split("init"))?;
        let optimizer = Optimizer::new(
            config.optimizer,
            config.base_lr,
            config.noam_dim_for(model.config()),
            config.warmup_steps,
            model.params(),
        );
        Ok(Trainer {
            model,
            optimizer,
            rng: root.split("train"),
            epoch: 0,
            log: Vec::new(),
            config,
        })
    }

    /// Continues from `ckpt`, which must have been written under the same
    /// model and training configuration (up to the epoch budget).
    pub fn resume(ckpt: Checkpoint, model_config: ModelConfig, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        ckpt.check_fingerprint(&model_config, &config)?;
        let mut t = Trainer::new(model_config, config)?;
        t.model.load_params(&ckpt.params)?;
        t.optimizer.set_state(ckpt.optimizer)?;
        t.rng = Rng::from_state(ckpt.rng);
        t.epoch = ckpt.epoch as usize;
        t.log = ckpt.log;
        Ok(t)
    }

    pub fn model(&self) -> &StTransformer {
        &self.model
    }

    pub fn into_model(self) -> StTransformer {
        self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn epochs_done(&self) -> usize {
        self.epoch
    }

    pub fn global_step(&self) -> u64 {
        self.optimizer.state().step
    }

    pub fn log(&self) -> &[EpochMetrics] {
        &self.log
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model_config: self.model.config().clone(),
            train_config: self.config.clone(),
            fingerprint: fingerprint(self.model.config(), &self.config),
            log: self.log.clone(),
            epoch: self.epoch as u64,
            global_step: self.optimizer.state().step,
            rng: self.rng.state(),
            params: self.model.params().clone(),
            optimizer: self.optimizer.state().clone(),
        }
    }

    pub fn teacher_forcing(&self) -> f64 {
        teacher_forcing_ratio(self.epoch, self.config.effective_epochs(), self.config.tf_epsilon)
    }

    /// One pass over `train` in a freshly shuffled order, then a fully
    /// autoregressive pass over `val` when it is non-empty.
    pub fn run_epoch(&mut self, train: &[WindowedSample], val: &[WindowedSample]) -> Result<EpochMetrics> {
        if train.is_empty() {
            return Err(Error::Data("no training windows".into()));
        }
        let tf = self.teacher_forcing();
        let mut order: Vec<usize> = (0..train.len()).collect();
        self.rng.shuffle(&mut order);
        let mut total = 0.0;
        for chunk in order.chunks(self.config.batch_size) {
            let batch: Vec<&WindowedSample> = chunk.iter().map(|&i| &train[i]).collect();
            let out = train_step(
                &mut self.model,
                &mut self.optimizer,
                &batch,
                tf,
                &mut self.rng,
                self.config.clip_grad_norm,
            )?;
            total += out.loss * batch.len() as f64;
        }
        self.epoch += 1;
        let (val_loss, mae) = if val.is_empty() {
            (None, [None; 4])
        } else {
            let ev = evaluate(&self.model, val, self.config.std_threshold)?;
            (Some(ev.loss), MAE_HORIZONS.map(|n| ev.mae.mae(n)))
        };
        let m = EpochMetrics {
            epoch: self.epoch,
            train_loss: total / train.len() as f64,
            val_loss,
            mae,
        };
        log::info!(
            "epoch {} train {:.6} val {:?} tf {:.3}",
            m.epoch,
            m.train_loss,
            m.val_loss,
            tf
        );
        self.log.push(m.clone());
        Ok(m)
    }

    /// Runs until `config.epochs` epochs are complete, checkpointing into
    /// `checkpoint_dir` when one is configured.
    pub fn fit(&mut self, train: &[WindowedSample], val: &[WindowedSample]) -> Result<()> {
        while self.epoch < self.config.epochs {
            self.run_epoch(train, val)?;
            if let Some(dir) = &self.config.checkpoint_dir {
                let last = self.epoch == self.config.epochs;
                if last || self.epoch % self.config.save_every_n_epochs == 0 {
                    self.save_to(dir)?;
                }
            }
        }
        Ok(())
    }

    pub fn save_to(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::from(e).in_file(dir))?;
        self.checkpoint().save(dir.join(CHECKPOINT_FILE))?;
        let csv = dir.join(METRICS_FILE);
        fs::write(&csv, metrics_csv(&self.log)).map_err(|e| Error::from(e).in_file(&csv))
    }
}

/// Train and validation windows for `model` from a dataset manifest.
pub fn load_windows(
    data: impl AsRef<Path>,
    model: &ModelConfig,
    train: &TrainConfig,
) -> Result<(Vec<WindowedSample>, Vec<WindowedSample>)> {
    let manifest = resolve_manifest(data);
    let check = |seqs: &[PoseSequence]| -> Result<()> {
        for s in seqs {
            if s.joints() != model.joints || s.joint_dim() != model.joint_dim {
                return Err(Error::Data(format!(
                    "dataset has {} joints × {} values, model expects {} × {}",
                    s.joints(),
                    s.joint_dim(),
                    model.joints,
                    model.joint_dim
                )));
            }
        }
        Ok(())
    };
    let tr = load_split(&manifest, Split::Train)?;
    let va = load_split(&manifest, Split::Validation)?;
    check(&tr)?;
    check(&va)?;
    let eval_stride = train.eval_stride.unwrap_or(model.window);
    Ok((
        windows_for(&tr, model.window, train.horizon, train.train_stride)?,
        windows_for(&va, model.window, train.horizon, eval_stride)?,
    ))
}

/// Outcome of [`train`]: whether a checkpoint was resumed and the trainer's final state.
pub struct TrainOutcome {
    pub resumed_from: Option<usize>,
    pub trainer: Trainer,
}

/// Full training run over a dataset. With `resume`, a valid checkpoint in
/// `checkpoint_dir` is continued; a missing one starts fresh.
pub fn train(data: impl AsRef<Path>, model: ModelConfig, config: TrainConfig, resume: bool) -> Result<TrainOutcome> {
    model.validate()?;
    config.validate()?;
    let (train_w, val_w) = load_windows(data, &model, &config)?;
    let existing = config
        .checkpoint_dir
        .as_ref()
        .map(|d| d.join(CHECKPOINT_FILE))
        .filter(|p| resume && p.exists());
    let (mut trainer, resumed_from) = match existing {
        Some(path) => {
            let ckpt = Checkpoint::load(&path)?;
            let t = Trainer::resume(ckpt, model, config)?;
            let at = t.epochs_done();
            (t, Some(at))
        }
        None => {
            if resume {
                log::warn!("no checkpoint to resume from; starting fresh");
            }
            (Trainer::new(model, config)?, None)
        }
    };
    trainer.fit(&train_w, &val_w)?;
    Ok(TrainOutcome { resumed_from, trainer })
}

#[cfg(test)]
mod tests;

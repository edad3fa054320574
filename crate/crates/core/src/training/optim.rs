use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Grads, ParamSet};
use crate::training::noam_lr;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
    NoamOpt,
}

impl OptimizerKind {
    pub fn name(self) -> &'static str {
        match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
            OptimizerKind::NoamOpt => "noamopt",
        }
    }
}

impl std::fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            "noamopt" => Ok(OptimizerKind::NoamOpt),
            other => Err(Error::config(format!(
                "unknown optimizer `{other}` (expected sgd, adam or noamopt)"
            ))),
        }
    }
}

/// Step counter and Adam moments; empty moments for SGD.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    base_lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    noam_dim: usize,
    warmup: u64,
    state: OptimizerState,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, base_lr: f64, noam_dim: usize, warmup: u64, params: &ParamSet) -> Self {
        let (beta1, beta2, eps) = match kind {
            OptimizerKind::NoamOpt => (0.9, 0.98, 1e-9),
            _ => (0.9, 0.999, 1e-8),
        };
        let moments = || -> Vec<Vec<f64>> {
            match kind {
                OptimizerKind::Sgd => Vec::new(),
                _ => params.iter().map(|(_, _, t)| vec![0.0; t.len()]).collect(),
            }
        };
        Optimizer {
            kind,
            base_lr,
            beta1,
            beta2,
            eps,
            noam_dim,
            warmup,
            state: OptimizerState {
                step: 0,
                m: moments(),
                v: moments(),
            },
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn state(&self) -> &OptimizerState {
        &self.state
    }

    pub fn set_state(&mut self, state: OptimizerState) -> Result<()> {
        if state.m.len() != self.state.m.len()
            || state.v.len() != self.state.v.len()
            || state.m.iter().zip(&self.state.m).any(|(a, b)| a.len() != b.len())
            || state.v.iter().zip(&self.state.v).any(|(a, b)| a.len() != b.len())
        {
            return Err(Error::Data("optimizer state does not match the model".into()));
        }
        self.state = state;
        Ok(())
    }

    /// Learning rate the next [`Optimizer::step`] will use.
    pub fn next_lr(&self) -> Result<f64> {
        match self.kind {
            OptimizerKind::NoamOpt => noam_lr(self.state.step + 1, self.noam_dim, self.warmup),
            _ => Ok(self.base_lr),
        }
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &Grads) -> Result<f64> {
        let lr = self.next_lr()?;
        self.step_with_lr(params, grads, lr)?;
        Ok(lr)
    }

    /// Parameters without a gradient are left untouched.
    pub fn step_with_lr(&mut self, params: &mut ParamSet, grads: &Grads, lr: f64) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::shape("gradient set does not match parameters"));
        }
        self.state.step += 1;
        let t = self.state.step as i32;
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            let Some(g) = grads.get(id) else { continue };
            let tensor = params.get_mut(id);
            let dtype = tensor.dtype();
            let p = tensor.data_mut();
            match self.kind {
                OptimizerKind::Sgd => {
                    for (p, g) in p.iter_mut().zip(g) {
                        *p = dtype.round(*p - lr * g);
                    }
                }
                OptimizerKind::Adam | OptimizerKind::NoamOpt => {
                    let (b1, b2) = (self.beta1, self.beta2);
                    let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
                    let m = &mut self.state.m[id.index()];
                    let v = &mut self.state.v[id.index()];
                    for i in 0..p.len() {
                        m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                        v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                        let update = (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
                        p[i] = dtype.round(p[i] - lr * update);
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamId;
    use crate::rng::Rng;
    use crate::tensor::{DType, Tensor};

    fn setup(dtype: DType) -> (ParamSet, Grads) {
        let mut rng = Rng::seed_from(1);
        let mut p = ParamSet::new();
        p.add("a", Tensor::from_fn(&[3, 2], |_| rng.normal()).to_dtype(dtype));
        p.add("b", Tensor::from_fn(&[4], |_| rng.normal()).to_dtype(dtype));
        let mut g = Grads::zeros_like(&p);
        let other = Grads::from_slots(vec![
            Some((0..6).map(|_| rng.normal()).collect()),
            Some((0..4).map(|_| rng.normal()).collect()),
        ]);
        g.accumulate(&other);
        (p, g)
    }

    #[test]
    fn names_parse() {
        for k in [OptimizerKind::Sgd, OptimizerKind::Adam, OptimizerKind::NoamOpt] {
            assert_eq!(k.name().parse::<OptimizerKind>().unwrap(), k);
        }
        assert!(matches!("rmsprop".parse::<OptimizerKind>(), Err(Error::Config(_))));
    }

    #[test]
    fn zero_lr_leaves_params_bit_identical() {
        for dtype in [DType::F32, DType::F64] {
            for kind in [OptimizerKind::Sgd, OptimizerKind::Adam, OptimizerKind::NoamOpt] {
                let (mut p, g) = setup(dtype);
                let before = p.clone();
                let mut opt = Optimizer::new(kind, 0.1, 8, 10, &p);
                opt.step_with_lr(&mut p, &g, 0.0).unwrap();
                assert_eq!(p, before);
            }
        }
    }

    #[test]
    fn sgd_step_is_lr_times_grad() {
        let (mut p, g) = setup(DType::F64);
        let before = p.clone();
        let mut opt = Optimizer::new(OptimizerKind::Sgd, 0.5, 8, 10, &p);
        assert_eq!(opt.step(&mut p, &g).unwrap(), 0.5);
        let id = ParamId(0);
        for i in 0..6 {
            assert_eq!(p.get(id).data()[i], before.get(id).data()[i] - 0.5 * g.get(id).unwrap()[i]);
        }
    }

    #[test]
    fn first_adam_step_moves_by_lr() {
        // Bias-corrected first step is lr · g / (|g| + eps) ≈ lr · sign(g).
        let (mut p, g) = setup(DType::F64);
        let before = p.clone();
        let mut opt = Optimizer::new(OptimizerKind::Adam, 0.01, 8, 10, &p);
        opt.step(&mut p, &g).unwrap();
        for id in p.ids() {
            for (i, (a, b)) in p.get(id).data().iter().zip(before.get(id).data()).enumerate() {
                let gi = g.get(id).unwrap()[i];
                assert!((b - a - 0.01 * gi.signum()).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn noam_uses_schedule() {
        let (mut p, g) = setup(DType::F64);
        let mut opt = Optimizer::new(OptimizerKind::NoamOpt, 123.0, 16, 4, &p);
        for step in 1..=6u64 {
            let lr = opt.step(&mut p, &g).unwrap();
            assert_eq!(lr, noam_lr(step, 16, 4).unwrap());
        }
        assert_eq!(opt.state().step, 6);
    }
}

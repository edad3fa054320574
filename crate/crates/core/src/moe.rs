//! Soft mixture-of-experts feed-forward block.
//!
//! Tokens are softly dispatched into `num_experts × slots_per_expert` slots:
//! each slot is a convex combination of all tokens (softmax of the routing
//! logits over the token axis). Every expert, a `Linear → ReLU → Linear`
//! MLP, processes its own slots, and every token's output is a convex
//! combination of all slot outputs (softmax of the same logits over the slot
//! axis). The routing logits are `tokens · Φ` with a learned slot-embedding
//! matrix `Φ ∈ R^{d × slots}`. Expert compute therefore depends on the slot
//! count, not on the number of tokens.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::config::Path;
use crate::error::{Error, Result};
use crate::params::{xavier_uniform, zeros, ParamId, ParamSet};
use crate::rng::Rng;
use crate::tensor::{DType, Tensor};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SoftMoeConfig {
    /// Token width d.
    pub width: usize,
    pub num_experts: usize,
    pub slots_per_expert: usize,
    pub expert_hidden: usize,
}

impl SoftMoeConfig {
    pub fn total_slots(&self) -> usize {
        self.num_experts * self.slots_per_expert
    }

    pub fn param_count(&self) -> usize {
        moe_param_count(self)
    }
}

/// Slot embeddings plus `num_experts` two-layer MLPs.
pub fn moe_param_count(cfg: &SoftMoeConfig) -> usize {
    let (d, h) = (cfg.width, cfg.expert_hidden);
    d * cfg.total_slots() + cfg.num_experts * (d * h + h + h * d + d)
}

/// Dispatch and combine weights captured from one forward pass, both laid
/// out `[num_tokens, total_slots]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RoutingRecord {
    pub layer_index: usize,
    pub path: Path,
    pub dispatch: Tensor,
    pub combine: Tensor,
}

impl RoutingRecord {
    /// CSV with header `token,slot,dispatch_weight,combine_weight`.
    pub fn to_csv(&self) -> String {
        let shape = self.dispatch.shape();
        let (n, s) = (shape[0], shape[1]);
        let mut out = String::from("token,slot,dispatch_weight,combine_weight\n");
        for t in 0..n {
            for k in 0..s {
                out.push_str(&format!(
                    "{t},{k},{},{}\n",
                    self.dispatch.get(&[t, k]),
                    self.combine.get(&[t, k])
                ));
            }
        }
        out
    }
}

/// Parameter handles of one Soft-MoE block.
#[derive(Clone, Debug)]
pub struct SoftMoe {
    cfg: SoftMoeConfig,
    /// `[d, slots]`
    pub phi: ParamId,
    /// `[n, d, h]`
    pub w1: ParamId,
    /// `[n, 1, h]`
    pub b1: ParamId,
    /// `[n, h, d]`
    pub w2: ParamId,
    /// `[n, 1, d]`
    pub b2: ParamId,
}

/// Graph handles to the routing weights of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct MoeTrace {
    pub dispatch: Var,
    pub combine: Var,
}

impl SoftMoe {
    pub fn init(
        params: &mut ParamSet,
        prefix: &str,
        cfg: SoftMoeConfig,
        dtype: DType,
        rng: &mut Rng,
    ) -> Self {
        let (d, h, n, s) = (cfg.width, cfg.expert_hidden, cfg.num_experts, cfg.total_slots());
        let phi = params.add(format!("{prefix}.phi"), xavier_uniform(&[d, s], d, s, dtype, rng));
        let w1 = params.add(format!("{prefix}.w1"), xavier_uniform(&[n, d, h], d, h, dtype, rng));
        let b1 = params.add(format!("{prefix}.b1"), zeros(&[n, 1, h], dtype));
        let w2 = params.add(format!("{prefix}.w2"), xavier_uniform(&[n, h, d], h, d, dtype, rng));
        let b2 = params.add(format!("{prefix}.b2"), zeros(&[n, 1, d], dtype));
        SoftMoe {
            cfg,
            phi,
            w1,
            b1,
            w2,
            b2,
        }
    }

    pub fn config(&self) -> &SoftMoeConfig {
        &self.cfg
    }

    /// `tokens: [num_tokens, d]` → `[num_tokens, d]`.
    pub fn forward(&self, g: &mut Graph<'_>, tokens: Var) -> Result<(Var, MoeTrace)> {
        let shape = g.shape(tokens).to_vec();
        if shape.len() != 2 || shape[1] != self.cfg.width {
            return Err(Error::shape(format!(
                "soft-moe expects [tokens, {}], got {shape:?}",
                self.cfg.width
            )));
        }
        let (n, p, d) = (self.cfg.num_experts, self.cfg.slots_per_expert, self.cfg.width);
        let phi = g.param(self.phi);
        let logits = g.matmul(tokens, phi)?;
        let dispatch = g.softmax(logits, 0)?;
        let combine = g.softmax(logits, 1)?;

        let dispatch_t = g.transpose(dispatch)?;
        let slots_in = g.matmul(dispatch_t, tokens)?;
        let slots_in = g.reshape(slots_in, &[n, p, d])?;

        let (w1, b1, w2, b2) = (
            g.param(self.w1),
            g.param(self.b1),
            g.param(self.w2),
            g.param(self.b2),
        );
        let hidden = g.matmul(slots_in, w1)?;
        let hidden = g.add(hidden, b1)?;
        let hidden = g.relu(hidden);
        let slots_out = g.matmul(hidden, w2)?;
        let slots_out = g.add(slots_out, b2)?;
        let slots_out = g.reshape(slots_out, &[n * p, d])?;

        let out = g.matmul(combine, slots_out)?;
        Ok((out, MoeTrace { dispatch, combine }))
    }
}

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{xavier_uniform, zeros, ParamId, ParamSet};
use crate::rng::Rng;
use crate::tensor::DType;

/// Multi-head scaled dot-product self-attention over `[tokens, width]`.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub width: usize,
    pub heads: usize,
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
}

/// Strict upper triangle: entry `(t, t')` is masked when `t' > t`.
pub fn causal_mask(n: usize) -> Vec<bool> {
    (0..n * n).map(|i| i % n > i / n).collect()
}

impl MultiHeadAttention {
    pub fn init(
        params: &mut ParamSet,
        prefix: &str,
        width: usize,
        heads: usize,
        dtype: DType,
        rng: &mut Rng,
    ) -> Self {
        let mut lin = |name: &str, rng: &mut Rng| {
            let w = params.add(
                format!("{prefix}.w{name}"),
                xavier_uniform(&[width, width], width, width, dtype, rng),
            );
            let b = params.add(format!("{prefix}.b{name}"), zeros(&[width], dtype));
            (w, b)
        };
        let (wq, bq) = lin("q", rng);
        let (wk, bk) = lin("k", rng);
        let (wv, bv) = lin("v", rng);
        let (wo, bo) = lin("o", rng);
        MultiHeadAttention {
            width,
            heads,
            wq,
            bq,
            wk,
            bk,
            wv,
            bv,
            wo,
            bo,
        }
    }

    fn project(&self, g: &mut Graph<'_>, x: Var, w: ParamId, b: ParamId) -> Result<Var> {
        let (w, b) = (g.param(w), g.param(b));
        let y = g.matmul(x, w)?;
        g.add(y, b)
    }

    /// Returns the attended tokens `[n, width]` and the attention weights
    /// `[heads, n, n]`.
    pub fn forward(&self, g: &mut Graph<'_>, x: Var, causal: bool) -> Result<(Var, Var)> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 2 || shape[1] != self.width {
            return Err(Error::shape(format!(
                "attention expects [tokens, {}], got {shape:?}",
                self.width
            )));
        }
        if self.width % self.heads != 0 {
            return Err(Error::shape(format!(
                "width {} does not split across {} heads",
                self.width, self.heads
            )));
        }
        let n = shape[0];
        let (h, dh) = (self.heads, self.width / self.heads);

        let q = self.project(g, x, self.wq, self.bq)?;
        let k = self.project(g, x, self.wk, self.bk)?;
        let v = self.project(g, x, self.wv, self.bv)?;

        let q = g.reshape(q, &[n, h, dh])?;
        let q = g.permute(q, &[1, 0, 2])?;
        let k = g.reshape(k, &[n, h, dh])?;
        let k_t = g.permute(k, &[1, 2, 0])?;
        let v = g.reshape(v, &[n, h, dh])?;
        let v = g.permute(v, &[1, 0, 2])?;

        let scores = g.matmul(q, k_t)?;
        let scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
        let scores = if causal && n > 1 {
            g.masked_fill(scores, &causal_mask(n), &[n, n], f64::NEG_INFINITY)?
        } else {
            scores
        };
        let weights = g.softmax(scores, 2)?;

        let ctx = g.matmul(weights, v)?;
        let ctx = g.permute(ctx, &[1, 0, 2])?;
        let ctx = g.reshape(ctx, &[n, self.width])?;
        let out = self.project(g, ctx, self.wo, self.bo)?;
        Ok((out, weights))
    }
}

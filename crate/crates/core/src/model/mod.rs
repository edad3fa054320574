//! The spatio-temporal transformer.
//!
//! A window `[T, S, M]` of axis-angle poses is embedded per joint into
//! `[T, S, E]`, a sinusoidal encoding of the frame index is added, and the
//! result passes through `num_layers` blocks. Each block runs two paths on
//! the same input:
//!
//! * temporal: frames become tokens of width `S·E`, causal attention over time;
//! * spatial: joints become tokens of width `T·E`, unmasked attention over joints.
//!
//! Each path is `attention → dropout → residual → norm → feed-forward →
//! dropout → residual → norm`, and the two path outputs are summed. The
//! feed-forward is either a dense MLP or a Soft-MoE block acting on the
//! path's tokens. Finally `project_1` maps `E → M` per position and
//! `project_2` collapses the `T` axis with learned weights, giving one frame.

mod attention;

pub use attention::{causal_mask, MultiHeadAttention};

use crate::autodiff::{Graph, Var};
use crate::config::{FfnKind, ModelConfig, Path};
use crate::error::{Error, Result};
use crate::moe::{RoutingRecord, SoftMoe};
use crate::params::{ones, xavier_uniform, zeros, ParamId, ParamSet};
use crate::rng::Rng;
use crate::tensor::{DType, Tensor};

/// Each path applies its own feed-forward and norm before the two paths are
/// added together.
pub const FFN_BEFORE_PATH_SUM: bool = true;

/// `PE(pos, 2i) = sin(pos / 10000^(2i/width))`, `PE(pos, 2i+1) = cos(…)`.
pub fn positional_encoding(len: usize, width: usize) -> Tensor {
    Tensor::from_fn(&[len, width], |idx| {
        let (pos, c) = (idx / width, idx % width);
        let pair = (c / 2 * 2) as f64;
        let angle = pos as f64 / 10000f64.powf(pair / width as f64);
        if c % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

/// Attention weights captured from one block.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionRecord {
    pub layer_index: usize,
    /// `[heads_temporal, T, T]`, zero above the diagonal.
    pub temporal: Tensor,
    /// `[heads_spatial, S, S]`
    pub spatial: Tensor,
}

impl AttentionRecord {
    pub fn weights(&self, path: Path) -> &Tensor {
        match path {
            Path::Temporal => &self.temporal,
            Path::Spatial => &self.spatial,
        }
    }

    /// Head-averaged weights as CSV with header `row,col,weight`.
    pub fn to_csv(&self, path: Path) -> String {
        let w = self.weights(path);
        let (h, n) = (w.shape()[0], w.shape()[1]);
        let mut out = String::from("row,col,weight\n");
        for r in 0..n {
            for c in 0..n {
                let v = (0..h).map(|k| w.get(&[k, r, c])).sum::<f64>() / h as f64;
                out.push_str(&format!("{r},{c},{v}\n"));
            }
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    fn init(params: &mut ParamSet, prefix: &str, inp: usize, out: usize, dtype: DType, rng: &mut Rng) -> Self {
        Linear {
            weight: params.add(
                format!("{prefix}.weight"),
                xavier_uniform(&[inp, out], inp, out, dtype, rng),
            ),
            bias: params.add(format!("{prefix}.bias"), zeros(&[out], dtype)),
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let (w, b) = (g.param(self.weight), g.param(self.bias));
        let y = g.matmul(x, w)?;
        g.add(y, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    fn init(params: &mut ParamSet, prefix: &str, width: usize, dtype: DType) -> Self {
        LayerNorm {
            gamma: params.add(format!("{prefix}.gamma"), ones(&[width], dtype)),
            beta: params.add(format!("{prefix}.beta"), zeros(&[width], dtype)),
        }
    }

    /// Normalises `[tokens, k·E]` over each contiguous group of `embed` values.
    fn forward_grouped(&self, g: &mut Graph<'_>, x: Var, embed: usize) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        let (n, w) = (shape[0], shape[1]);
        let grouped = g.reshape(x, &[n, w / embed, embed])?;
        let (gamma, beta) = (g.param(self.gamma), g.param(self.beta));
        let y = g.layer_norm(grouped, gamma, beta, 2)?;
        g.reshape(y, &[n, w])
    }
}

/// Token-wise `Linear → ReLU → Linear`.
#[derive(Clone, Debug)]
pub struct DenseFfn {
    pub inner: Linear,
    pub outer: Linear,
}

impl DenseFfn {
    fn init(params: &mut ParamSet, prefix: &str, width: usize, hidden: usize, dtype: DType, rng: &mut Rng) -> Self {
        DenseFfn {
            inner: Linear::init(params, &format!("{prefix}.fc1"), width, hidden, dtype, rng),
            outer: Linear::init(params, &format!("{prefix}.fc2"), hidden, width, dtype, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let h = self.inner.forward(g, x)?;
        let h = g.relu(h);
        self.outer.forward(g, h)
    }
}

#[derive(Clone, Debug)]
pub enum FeedForward {
    Dense(DenseFfn),
    SoftMoe(SoftMoe),
}

/// Evaluation mode is `rng: None`; with an RNG, dropout is active.
#[derive(Default)]
pub struct ForwardOptions<'r> {
    pub rng: Option<&'r mut Rng>,
    pub record: bool,
}

impl<'r> ForwardOptions<'r> {
    pub fn eval() -> Self {
        ForwardOptions::default()
    }

    pub fn train(rng: &'r mut Rng) -> Self {
        ForwardOptions {
            rng: Some(rng),
            record: false,
        }
    }

    pub fn recording() -> Self {
        ForwardOptions {
            rng: None,
            record: true,
        }
    }
}

/// Output of one path: new `[T, S, E]` activations, attention weights and,
/// for MoE models, routing weights.
pub struct PathOutput {
    pub out: Var,
    pub weights: Var,
    pub routing: Option<(Var, Var)>,
}

#[derive(Clone, Debug)]
pub struct PathBlock {
    pub path: Path,
    pub attention: MultiHeadAttention,
    pub norm1: LayerNorm,
    pub ffn: FeedForward,
    pub norm2: LayerNorm,
    window: usize,
    joints: usize,
    embed: usize,
    dropout: f64,
}

impl PathBlock {
    fn init(params: &mut ParamSet, prefix: &str, path: Path, cfg: &ModelConfig, rng: &mut Rng) -> Self {
        let width = cfg.width(path);
        let dtype = cfg.dtype;
        let attention = MultiHeadAttention::init(
            params,
            &format!("{prefix}.attn"),
            width,
            cfg.heads(path),
            dtype,
            rng,
        );
        let norm1 = LayerNorm::init(params, &format!("{prefix}.norm1"), cfg.embed_dim, dtype);
        let ffn = match cfg.moe_config(path) {
            None => FeedForward::Dense(DenseFfn::init(
                params,
                &format!("{prefix}.ffn"),
                width,
                cfg.hidden_dim,
                dtype,
                rng,
            )),
            Some(mc) => FeedForward::SoftMoe(SoftMoe::init(params, &format!("{prefix}.moe"), mc, dtype, rng)),
        };
        let norm2 = LayerNorm::init(params, &format!("{prefix}.norm2"), cfg.embed_dim, dtype);
        PathBlock {
            path,
            attention,
            norm1,
            ffn,
            norm2,
            window: cfg.window,
            joints: cfg.joints,
            embed: cfg.embed_dim,
            dropout: cfg.dropout,
        }
    }

    /// `[T, S, E]` → path tokens.
    pub fn to_tokens(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let (t, s, e) = (self.window, self.joints, self.embed);
        match self.path {
            Path::Temporal => g.reshape(x, &[t, s * e]),
            Path::Spatial => {
                let p = g.permute(x, &[1, 0, 2])?;
                g.reshape(p, &[s, t * e])
            }
        }
    }

    /// Path tokens → `[T, S, E]`.
    pub fn from_tokens(&self, g: &mut Graph<'_>, tokens: Var) -> Result<Var> {
        let (t, s, e) = (self.window, self.joints, self.embed);
        match self.path {
            Path::Temporal => g.reshape(tokens, &[t, s, e]),
            Path::Spatial => {
                let r = g.reshape(tokens, &[s, t, e])?;
                g.permute(r, &[1, 0, 2])
            }
        }
    }

    /// The attention sub-layer alone: `[T, S, E]` in and out, plus weights.
    pub fn attend(&self, g: &mut Graph<'_>, x: Var) -> Result<(Var, Var)> {
        let tokens = self.to_tokens(g, x)?;
        let (a, w) = self.attention.forward(g, tokens, self.path == Path::Temporal)?;
        Ok((self.from_tokens(g, a)?, w))
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var, opts: &mut ForwardOptions<'_>) -> Result<PathOutput> {
        let tokens = self.to_tokens(g, x)?;
        let (a, weights) = self.attention.forward(g, tokens, self.path == Path::Temporal)?;
        let a = g.dropout(a, self.dropout, opts.rng.as_deref_mut())?;
        let y = g.add(tokens, a)?;
        let y = self.norm1.forward_grouped(g, y, self.embed)?;
        let (f, routing) = match &self.ffn {
            FeedForward::Dense(ffn) => (ffn.forward(g, y)?, None),
            FeedForward::SoftMoe(moe) => {
                let (f, trace) = moe.forward(g, y)?;
                (f, Some((trace.dispatch, trace.combine)))
            }
        };
        let f = g.dropout(f, self.dropout, opts.rng.as_deref_mut())?;
        let z = g.add(y, f)?;
        let z = self.norm2.forward_grouped(g, z, self.embed)?;
        Ok(PathOutput {
            out: self.from_tokens(g, z)?,
            weights,
            routing,
        })
    }
}

#[derive(Clone, Debug)]
pub struct StBlock {
    pub temporal: PathBlock,
    pub spatial: PathBlock,
}

pub struct BlockOutput {
    pub out: Var,
    pub temporal: PathOutput,
    pub spatial: PathOutput,
}

impl StBlock {
    pub fn forward(&self, g: &mut Graph<'_>, x: Var, opts: &mut ForwardOptions<'_>) -> Result<BlockOutput> {
        let temporal = self.temporal.forward(g, x, opts)?;
        let spatial = self.spatial.forward(g, x, opts)?;
        let out = g.add(temporal.out, spatial.out)?;
        Ok(BlockOutput { out, temporal, spatial })
    }
}

#[derive(Clone, Debug)]
pub struct Projection {
    /// `project_1`: `E → M` at every position.
    pub reduce: Linear,
    /// `project_2` weight `[T, 1]`, collapsing the frame axis.
    pub collapse_weight: ParamId,
    pub collapse_bias: ParamId,
}

impl Projection {
    /// `h: [T, S, E]` → `[1, S, M]`.
    pub fn forward(&self, g: &mut Graph<'_>, h: Var) -> Result<Var> {
        let shape = g.shape(h).to_vec();
        let bias = g.param(self.reduce.bias);
        let (s, m) = (shape[1], g.shape(bias)[0]);
        let p1 = self.reduce.forward(g, h)?;
        let p1 = g.permute(p1, &[1, 2, 0])?;
        let (w, b) = (g.param(self.collapse_weight), g.param(self.collapse_bias));
        let p2 = g.matmul(p1, w)?;
        let p2 = g.add(p2, b)?;
        g.reshape(p2, &[1, s, m])
    }
}

pub struct ForwardOutput {
    /// Predicted next frame `[1, S, M]`.
    pub frame: Var,
    pub attention: Vec<AttentionRecord>,
    pub routing: Vec<RoutingRecord>,
}

#[derive(Clone, Debug)]
pub struct StTransformer {
    config: ModelConfig,
    params: ParamSet,
    pub embed: Linear,
    pub blocks: Vec<StBlock>,
    pub project: Projection,
    pe: Tensor,
}

impl StTransformer {
    pub fn new(config: ModelConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let dtype = config.dtype;
        let mut params = ParamSet::new();
        let embed = Linear::init(&mut params, "embed", config.joint_dim, config.embed_dim, dtype, rng);
        let blocks = (0..config.num_layers)
            .map(|l| StBlock {
                temporal: PathBlock::init(&mut params, &format!("layers.{l}.temporal"), Path::Temporal, &config, rng),
                spatial: PathBlock::init(&mut params, &format!("layers.{l}.spatial"), Path::Spatial, &config, rng),
            })
            .collect();
        let reduce = Linear::init(&mut params, "project1", config.embed_dim, config.joint_dim, dtype, rng);
        let collapse_weight = params.add(
            "project2.weight",
            xavier_uniform(&[config.window, 1], config.window, 1, dtype, rng),
        );
        let collapse_bias = params.add("project2.bias", zeros(&[1], dtype));
        let pe = positional_encoding(config.window, config.embed_dim)
            .reshape(&[config.window, 1, config.embed_dim])?
            .to_dtype(dtype);
        debug_assert_eq!(params.numel(), config.param_count());
        Ok(StTransformer {
            config,
            params,
            embed,
            blocks,
            project: Projection {
                reduce,
                collapse_weight,
                collapse_bias,
            },
            pe,
        })
    }

    /// Builds the architecture for `config` and installs `params`, which must
    /// match the architecture's names and shapes exactly.
    pub fn with_params(config: ModelConfig, params: ParamSet) -> Result<Self> {
        let mut model = StTransformer::new(config, &mut Rng::seed_from(0))?;
        model.load_params(&params)?;
        Ok(model)
    }

    pub fn load_params(&mut self, other: &ParamSet) -> Result<()> {
        if other.len() != self.params.len() {
            return Err(Error::shape(format!(
                "expected {} parameter tensors, got {}",
                self.params.len(),
                other.len()
            )));
        }
        for (id, name, t) in other.iter() {
            if self.params.name(id) != name {
                return Err(Error::shape(format!(
                    "parameter {} is {name:?}, expected {:?}",
                    id.index(),
                    self.params.name(id)
                )));
            }
            self.params.replace(id, t.clone())?;
        }
        Ok(())
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.numel()
    }

    pub fn graph(&self) -> Graph<'_> {
        Graph::with_params(&self.params, self.config.dtype)
    }

    pub fn check_window(&self, shape: &[usize]) -> Result<()> {
        let c = &self.config;
        if shape != [c.window, c.joints, c.joint_dim] {
            return Err(Error::shape(format!(
                "window must be [{}, {}, {}], got {shape:?}",
                c.window, c.joints, c.joint_dim
            )));
        }
        Ok(())
    }

    /// Per-joint linear map `M → E`: `[T, S, M]` → `[T, S, E]`.
    pub fn embed_joints(&self, g: &mut Graph<'_>, window: Var) -> Result<Var> {
        self.check_window(g.shape(window))?;
        self.embed.forward(g, window)
    }

    pub fn forward(&self, g: &mut Graph<'_>, window: Var, opts: &mut ForwardOptions<'_>) -> Result<ForwardOutput> {
        let x = self.embed_joints(g, window)?;
        let pe = g.constant(self.pe.clone());
        let mut h = g.add(x, pe)?;
        let mut attention = Vec::new();
        let mut routing = Vec::new();
        for (layer_index, block) in self.blocks.iter().enumerate() {
            let out = block.forward(g, h, opts)?;
            if opts.record {
                attention.push(AttentionRecord {
                    layer_index,
                    temporal: g.value(out.temporal.weights).clone(),
                    spatial: g.value(out.spatial.weights).clone(),
                });
                for (path, po) in [(Path::Temporal, &out.temporal), (Path::Spatial, &out.spatial)] {
                    if let Some((d, c)) = po.routing {
                        routing.push(RoutingRecord {
                            layer_index,
                            path,
                            dispatch: g.value(d).clone(),
                            combine: g.value(c).clone(),
                        });
                    }
                }
            }
            h = out.out;
        }
        let frame = self.project.forward(g, h)?;
        Ok(ForwardOutput {
            frame,
            attention,
            routing,
        })
    }

    /// Evaluation-mode prediction of the frame following `window`.
    pub fn predict_next(&self, window: &Tensor) -> Result<Tensor> {
        self.check_window(window.shape())?;
        let mut g = self.graph();
        let w = g.constant(window.clone());
        let out = self.forward(&mut g, w, &mut ForwardOptions::eval())?;
        let frame = g.value(out.frame).clone();
        if !frame.is_finite() {
            return Err(Error::non_finite("predicted frame"));
        }
        Ok(frame)
    }

    /// Evaluation-mode forward that also returns attention and routing weights.
    pub fn forward_with_records(&self, window: &Tensor) -> Result<(Tensor, Vec<AttentionRecord>, Vec<RoutingRecord>)> {
        self.check_window(window.shape())?;
        let mut g = self.graph();
        let w = g.constant(window.clone());
        let out = self.forward(&mut g, w, &mut ForwardOptions::recording())?;
        Ok((g.value(out.frame).clone(), out.attention, out.routing))
    }

    pub fn is_moe(&self) -> bool {
        matches!(self.config.ffn, FfnKind::SoftMoe(_))
    }
}

#[cfg(test)]
mod tests;

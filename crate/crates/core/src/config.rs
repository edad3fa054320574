//! Model architecture configuration.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::moe::SoftMoeConfig;
use crate::tensor::DType;

/// Frames per second of every pose sequence handled by the crate.
pub const FRAME_RATE_HZ: f64 = 60.0;

/// Default prediction horizon: 24 frames, 400 ms at 60 Hz.
pub const DEFAULT_HORIZON: usize = 24;

/// Soft-MoE settings shared by every MoE block in the model. The token width
/// of each block is determined by the path it sits in.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MoeSettings {
    pub num_experts: usize,
    pub slots_per_expert: usize,
    pub expert_hidden: usize,
}

impl Default for MoeSettings {
    fn default() -> Self {
        MoeSettings {
            num_experts: 4,
            slots_per_expert: 1,
            expert_hidden: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FfnKind {
    Dense,
    SoftMoe(MoeSettings),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Input window length T (frames).
    pub window: usize,
    /// Joint count S.
    pub joints: usize,
    /// Per-joint representation size M (3 for axis-angle).
    pub joint_dim: usize,
    /// Joint embedding size E.
    pub embed_dim: usize,
    pub num_layers: usize,
    pub num_heads_temporal: usize,
    pub num_heads_spatial: usize,
    /// Hidden width of the dense feed-forward layers.
    pub hidden_dim: usize,
    pub dropout: f64,
    pub ffn: FfnKind,
    pub dtype: DType,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            window: 120,
            joints: 24,
            joint_dim: 3,
            embed_dim: 128,
            num_layers: 2,
            num_heads_temporal: 1,
            num_heads_spatial: 1,
            hidden_dim: 512,
            dropout: 0.1,
            ffn: FfnKind::Dense,
            dtype: DType::F32,
        }
    }
}

/// Which attention path a block component belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Path {
    Temporal,
    Spatial,
}

impl Path {
    pub fn name(self) -> &'static str {
        match self {
            Path::Temporal => "temporal",
            Path::Spatial => "spatial",
        }
    }
}

impl ModelConfig {
    /// Token width inside the temporal path: one token per frame, S·E wide.
    pub fn temporal_width(&self) -> usize {
        self.joints * self.embed_dim
    }

    /// Token width inside the spatial path: one token per joint, T·E wide.
    pub fn spatial_width(&self) -> usize {
        self.window * self.embed_dim
    }

    pub fn width(&self, path: Path) -> usize {
        match path {
            Path::Temporal => self.temporal_width(),
            Path::Spatial => self.spatial_width(),
        }
    }

    pub fn heads(&self, path: Path) -> usize {
        match path {
            Path::Temporal => self.num_heads_temporal,
            Path::Spatial => self.num_heads_spatial,
        }
    }

    /// Token count inside a path.
    pub fn tokens(&self, path: Path) -> usize {
        match path {
            Path::Temporal => self.window,
            Path::Spatial => self.joints,
        }
    }

    pub fn moe_config(&self, path: Path) -> Option<SoftMoeConfig> {
        match &self.ffn {
            FfnKind::Dense => None,
            FfnKind::SoftMoe(m) => Some(SoftMoeConfig {
                width: self.width(path),
                num_experts: m.num_experts,
                slots_per_expert: m.slots_per_expert,
                expert_hidden: m.expert_hidden,
            }),
        }
    }

    /// Checks every constraint and reports all violations at once.
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        for (name, v) in [
            ("window", self.window),
            ("joints", self.joints),
            ("joint_dim", self.joint_dim),
            ("embed_dim", self.embed_dim),
            ("num_layers", self.num_layers),
            ("hidden_dim", self.hidden_dim),
            ("num_heads_temporal", self.num_heads_temporal),
            ("num_heads_spatial", self.num_heads_spatial),
        ] {
            if v == 0 {
                errs.push(format!("{name} must be >= 1"));
            }
        }
        if self.embed_dim % 2 != 0 {
            errs.push(format!(
                "embed_dim must be even for sinusoidal positional encoding, got {}",
                self.embed_dim
            ));
        }
        for path in [Path::Temporal, Path::Spatial] {
            let (w, h) = (self.width(path), self.heads(path));
            if h > 0 && w % h != 0 {
                errs.push(format!(
                    "{} attention width {w} is not divisible by {h} heads",
                    path.name()
                ));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            errs.push(format!("dropout must be in [0, 1), got {}", self.dropout));
        }
        if let FfnKind::SoftMoe(m) = &self.ffn {
            if m.num_experts == 0 {
                errs.push("num_experts must be >= 1".into());
            }
            if m.slots_per_expert == 0 {
                errs.push("slots_per_expert must be >= 1".into());
            }
            if m.expert_hidden == 0 {
                errs.push("expert_hidden must be >= 1".into());
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    /// Exact number of trainable scalars, computed without building the model.
    pub fn param_count(&self) -> usize {
        let (e, m, t) = (self.embed_dim, self.joint_dim, self.window);
        let embed = m * e + e;
        let mut per_layer = 0;
        for path in [Path::Temporal, Path::Spatial] {
            let w = self.width(path);
            let attention = 4 * (w * w + w);
            let norms = 2 * (2 * e);
            let ffn = match self.moe_config(path) {
                None => 2 * w * self.hidden_dim + self.hidden_dim + w,
                Some(cfg) => cfg.param_count(),
            };
            per_layer += attention + norms + ffn;
        }
        let project = (e * m + m) + (t + 1);
        embed + self.num_layers * per_layer + project
    }
}

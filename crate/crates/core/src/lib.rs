//! Spatio-temporal transformer for 3D human motion prediction, with a Soft
//! mixture-of-experts variant, built on a small reverse-mode autodiff core.

pub mod autodiff;
pub mod config;
pub mod data;
pub mod error;
pub mod inference;
pub mod metrics;
pub mod model;
pub mod moe;
pub mod params;
pub mod rng;
pub mod tensor;
pub mod training;

pub use autodiff::{Graph, Var};
pub use config::{FfnKind, ModelConfig, MoeSettings, Path, DEFAULT_HORIZON, FRAME_RATE_HZ};
pub use data::{PoseSequence, SplitManifest, WindowedSample};
pub use inference::{bench_inference, predict, BenchReport, BenchSpec, ConstantVelocity, NextFrame, ZeroVelocity};
pub use error::{Error, ErrorKind, FormatError, Result};
pub use metrics::{euler_mae, EvalResult};
pub use model::{AttentionRecord, ForwardOptions, StTransformer};
pub use moe::{moe_param_count, RoutingRecord, SoftMoe, SoftMoeConfig};
pub use params::{Grads, ParamId, ParamSet};
pub use rng::{Rng, RngState};
pub use tensor::{DType, Tensor};
pub use training::{Checkpoint, OptimizerKind, TrainConfig, Trainer};

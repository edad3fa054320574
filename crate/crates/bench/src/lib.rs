//! Shared fixtures for the criterion benchmarks.

use stmotion_core::{FfnKind, ModelConfig, MoeSettings, Rng, StTransformer, Tensor};

/// Small model in the shape used by the inference sweep.
pub fn model(ffn: FfnKind, hidden: usize) -> StTransformer {
    let cfg = ModelConfig {
        window: 16,
        joints: 8,
        embed_dim: 8,
        num_layers: 1,
        hidden_dim: hidden,
        dropout: 0.0,
        ffn,
        ..ModelConfig::default()
    };
    StTransformer::new(cfg, &mut Rng::seed_from(0)).expect("valid bench config")
}

pub fn moe(experts: usize) -> FfnKind {
    FfnKind::SoftMoe(MoeSettings {
        num_experts: experts,
        slots_per_expert: 1,
        expert_hidden: 16,
    })
}

pub fn window(model: &StTransformer) -> Tensor {
    let c = model.config();
    let mut rng = Rng::seed_from(1);
    Tensor::from_fn(&[c.window, c.joints, c.joint_dim], |_| 0.3 * rng.normal())
}

//! Shared fixtures for the benchmarks.

use depthgrow_core::data::{gen_synthetic, SyntheticTaskSpec, TaskKind};
use depthgrow_core::{DepthGrowModel, GrowOptions, ModelConfig, Pair, Precision};

/// Desk-scale configuration used by the end-to-end experiment.
pub fn desk_config() -> ModelConfig {
    ModelConfig {
        d_model: 64,
        d_ff: 256,
        n_heads: 4,
        n_bottom_blocks: 2,
        n_top_blocks: 1,
        vocab_size: 32,
        dropout: 0.1,
        max_len: 64,
        precision: Precision::F32,
    }
}

pub fn grown_model() -> DepthGrowModel<f32> {
    DepthGrowModel::new_shallow(&desk_config(), 1)
        .and_then(|m| m.grow(1, 2, GrowOptions::default()))
        .expect("desk config is valid")
}

pub fn noisy_copy(n: usize) -> Vec<Pair> {
    let spec = SyntheticTaskSpec {
        kind: TaskKind::NoisyCopy,
        vocab_size: 32,
        ..Default::default()
    };
    gen_synthetic(&spec, n).expect("valid spec")
}

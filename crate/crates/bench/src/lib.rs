//! Shared fixtures for the benchmarks.

use hdistill_core::vit::{DecoderKind, TaskHead, ViTConfig};

/// The desk-scale encoder: 32x32 grayscale images, 64 tokens, 6 layers.
pub fn desk_model() -> ViTConfig {
    ViTConfig {
        image_size: 32,
        patch_size: 4,
        channels: 1,
        depth: 6,
        heads: 4,
        dim: 96,
        mlp_ratio: 2,
        decoder: DecoderKind::None,
        task_head: TaskHead::None,
    }
}

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Extra layers appended to a student only during distillation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderKind {
    #[default]
    None,
    /// One affine map `d -> d`.
    Linear,
    /// `k` transformer blocks of the encoder's width and head count.
    Attn(usize),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskHead {
    #[default]
    None,
    /// Mean-pooled features -> layer norm -> linear logits.
    Classify(usize),
    /// Per-token layer norm -> linear pixel prediction, plus a learned mask
    /// embedding substituted at masked input positions.
    Reconstruct,
}

/// Architecture of one transformer. Teachers and students share this shape.
///
/// There is no class token: every token is a patch, tokens are laid out
/// row-major over the patch grid.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViTConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub depth: usize,
    pub heads: usize,
    pub dim: usize,
    pub mlp_ratio: usize,
    #[serde(default)]
    pub decoder: DecoderKind,
    #[serde(default)]
    pub task_head: TaskHead,
}

pub const LAYER_NORM_EPS: f64 = 1e-6;

impl ViTConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("image_size", self.image_size),
            ("patch_size", self.patch_size),
            ("channels", self.channels),
            ("depth", self.depth),
            ("heads", self.heads),
            ("dim", self.dim),
            ("mlp_ratio", self.mlp_ratio),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::contract(format!("{name} must be positive")));
            }
        }
        if !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::contract(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if !self.dim.is_multiple_of(self.heads) {
            return Err(Error::contract(format!(
                "dim {} not divisible by heads {}",
                self.dim, self.heads
            )));
        }
        if let TaskHead::Classify(0) = self.task_head {
            return Err(Error::contract("classify head needs at least one class"));
        }
        if let DecoderKind::Attn(0) = self.decoder {
            return Err(Error::contract("attn decoder needs at least one block"));
        }
        Ok(())
    }

    /// Patches per side.
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    /// Flattened pixels per patch.
    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    pub fn hidden_dim(&self) -> usize {
        self.dim * self.mlp_ratio
    }

    /// Same encoder geometry (ignores heads and decoders).
    pub fn same_encoder(&self, other: &ViTConfig) -> bool {
        self.image_size == other.image_size
            && self.patch_size == other.patch_size
            && self.channels == other.channels
            && self.depth == other.depth
            && self.heads == other.heads
            && self.dim == other.dim
            && self.mlp_ratio == other.mlp_ratio
    }

    pub fn with_head(&self, task_head: TaskHead) -> Self {
        ViTConfig {
            task_head,
            ..self.clone()
        }
    }

    pub fn with_decoder(&self, decoder: DecoderKind) -> Self {
        ViTConfig {
            decoder,
            ..self.clone()
        }
    }
}

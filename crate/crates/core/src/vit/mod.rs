//! A small configurable Vision Transformer with per-layer attention traces.

pub mod checkpoint;
mod config;
mod forward;
mod params;

pub use config::{DecoderKind, TaskHead, ViTConfig, LAYER_NORM_EPS};
pub use forward::{
    block_forward, decoder_forward, forward, patch_embed, patchify, ForwardOptions, ForwardVars,
    Inference, LayerTrace, LayerVars,
};
pub use params::{
    BlockParams, Bound, BoundBlock, BoundDecoder, BoundHead, DecoderParams, HeadParams, ViTParams,
    INIT_STD,
};

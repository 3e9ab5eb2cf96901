//! Hybrid distillation of small vision transformers.
//!
//! A student ViT learns final-layer features from a classification teacher
//! and pre-final-layer token relations from a masked-reconstruction teacher,
//! on the token subset left by progressive redundant-token masking. The crate
//! also carries the attention diagnostics (average head distance, normalized
//! mutual information) used to compare students and teachers.

pub mod data;
pub mod diagnostics;
pub mod distill;
pub mod error;
pub mod masking;
pub mod optim;
pub mod tensor;
pub mod vit;

pub use error::{Error, Result};
pub use tensor::{Element, Grads, RowSelect, Tape, Tensor, Var};

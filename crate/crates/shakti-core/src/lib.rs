//! Building blocks for a small vision-language model family.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: dense tensors with tape-based reverse-mode autodiff,
//!   generic over `f32` (training) and `f64` (gradient checking).
//! - [`params`]: named, identifiable parameters grouped by model component.
//! - [`nn`]: normalisation layers, activations, rotary embeddings and the
//!   learned positional bias table.
//! - [`blocks`]: attention, transformer blocks with a hybrid normalisation
//!   schedule, encoder/decoder stacks and model presets.
//! - [`vision`]: dynamic patch planning, image resizing, patch extraction
//!   and PPM I/O.
//! - [`fusion`]: the visual projector and the fused multimodal sequence.
//! - [`model`]: the assembled vision-language model.
//! - [`data`]: deterministic synthetic corpora (Markov text, glyph images)
//!   and evaluation metrics.
//! - [`train`]: stage configuration, AdamW, LR schedules, freezing,
//!   checkpoints and the training loop.

pub mod blocks;
pub mod data;
pub mod error;
pub mod fusion;
pub mod model;
pub mod nn;
pub mod params;
pub mod rng;
pub mod suite;
pub mod tensor;
pub mod train;
pub mod vision;

pub use error::{Error, Result};

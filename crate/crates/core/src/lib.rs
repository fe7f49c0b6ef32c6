//! Cross-modal noisy supervision at desk scale.
//!
//! Synthetic multi-view rooms are projected into dense pixel-point pairs,
//! mock foundation-model oracles produce noisy class scores, instance masks
//! and frozen instance features, and small 2D/3D encoders are co-trained on
//! mask-refined, randomly switched pseudo-labels with a frozen latent anchor.

pub mod bundle;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod nncore;
pub mod pseudolabel;
pub mod scenesynth;
pub mod seed;
pub mod training;

pub use error::{Error, Result};

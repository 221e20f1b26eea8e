//! Three-stage multimodal emotion recognition on pooled feature vectors.
//!
//! 1. [`adapter`]: bottleneck adapters and learnable layer fusion over a stack
//!    of acoustic layer features, trained with a masked-reconstruction plus
//!    classification objective.
//! 2. [`align`]: a vision MLP mapped into the acoustic embedding space with a
//!    symmetric temperature-scaled contrastive loss.
//! 3. [`fusion`]: per-modality projections fused by softmax modality attention
//!    and a six-way classifier.
//!
//! All gradients are closed-form and checked against [`numcore::finite_diff_check`].

pub mod adapter;
pub mod align;
pub mod data_io;
mod error;
pub mod fusion;
mod label;
pub mod numcore;
pub mod probe;
pub mod train;

pub use error::{Error, Result};
pub use label::{EmotionLabel, NUM_CLASSES};

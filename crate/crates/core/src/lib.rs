//! Dual-encoder video model built around a frozen image transformer.
//!
//! A frozen spatial encoder reads a few sparse frames, a narrow trainable
//! temporal encoder reads many dense frames, and an integration branch fuses
//! the two layer by layer. Only the temporal encoder, the integration branch
//! and the head are trained; no graph is ever built through the spatial
//! encoder, so its features can be cached.

pub mod analysis;
pub mod config;
pub mod data;
mod error;
pub mod head;
pub mod integration;
pub mod model;
pub mod nn;
pub mod spatial;
pub mod temporal;
pub mod train;

pub use config::{Ablation, DistConfig, FeatureTap, PhiUp, Pooling, PsiDown, TBlockKind};
pub use error::{CoreError, Result};
pub use model::{ClipInput, DistModel, DistOutput};

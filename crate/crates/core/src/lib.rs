//! Distills a convolutional "performer" into an additive explainer over
//! concept scores, ŷ ≈ Σ αᵢyᵢ + b, with prior weights derived from the
//! performer's gradients guiding early training.

pub mod distill;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod models;
pub mod prior;

pub use error::{ExplainError, Result};

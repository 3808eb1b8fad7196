//! Latent-semantic agent attention for cross-modal token refinement.
//!
//! The pipeline per visual layer: an entropic transport plan between text
//! rows and the layer's key matrix refines a text/visual affinity; the
//! top category channels pick agent tokens out of the value matrix; the
//! agents pool visual and textual context through sign masks; and a
//! two-stage differential attention (agents→text, visual→agents) produces a
//! residual update of the visual tokens.

pub mod attention;
pub mod error;
pub mod numerics;
pub mod pooling;
pub mod selection;
pub mod training;
pub mod transport;

pub use error::{Error, Result};
pub use numerics::{IndexList, Matrix, Rng};

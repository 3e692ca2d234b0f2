//! Uncertainty controls for cross-sectional ranking strategies: per-asset
//! error prediction, a strategy-level regime gate, tail-risk capping,
//! normalized conformal intervals and a walk-forward harness around them.

pub mod conformal;
pub mod deup;
pub mod error;
pub mod gate;
pub mod gbt;
pub mod panel;
pub mod pipeline;
pub mod policy;
pub mod portfolio;
pub mod stats;
pub mod synth;

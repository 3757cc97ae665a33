//! Micro anchor-free dense detector.
//!
//! Four stride-progressive 3x3 convolutions reach stride 8, one more
//! reaches stride 16, and a tower shared by both levels predicts
//! quality-aware class scores and ltrb distances per anchor point.

pub mod assign;
pub mod grid;
pub mod loss;
pub mod network;
pub mod params;
pub mod real;

pub use assign::{assign_targets, decode_anchor, decode_boxes, positive_fraction};
pub use grid::{ClassTargetKind, DenseOutput, DenseTarget, GridSpec, LevelSpec, OutputGrad};
pub use loss::{supervised_loss, LossParts};
pub use network::{backward, forward, predict, ActivationCache, Weights};
pub use params::{ArchConfig, ModelParams, TensorInfo};
pub use real::Real;

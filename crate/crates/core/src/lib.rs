//! Desk-scale laboratory for semi-supervised object detection with dense
//! pseudo-labels.
//!
//! * [`geometry`]: boxes, IoU, NMS, matching, AP.
//! * [`synthdata`]: procedural scenes, splits, weak/strong views.
//! * [`detector`]: micro anchor-free detector with an analytic backward pass.
//! * [`pseudolabel`]: dense pseudo-labels with top-k% region selection and
//!   the pseudo-box baseline.
//! * [`trainer`]: burn-in, EMA teacher, combined loss, checkpoints.
//! * [`harness`]: sweeps, ablations and diagnostic analyses.

pub mod detector;
pub mod error;
pub mod geometry;
pub mod harness;
pub mod pseudolabel;
pub mod rng;
pub mod synthdata;
pub mod trainer;

pub use error::{Error, Result};

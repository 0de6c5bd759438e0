//! Fine-grained, caption-controlled audio generation at desk scale.
//!
//! - [`tensor`]: f64 tensors with tape-based reverse-mode differentiation.
//! - [`flow`]: interpolation schedules, flow-matching loss and Euler sampling.
//! - [`model`]: the caption-conditioned velocity transformer and its training step.
//! - [`mixer`]: event clips, annotated mixtures, captions and feature datasets.
//! - [`metrics`]: event and segment F1, category accuracy, contour error and a rule-based detector.

pub mod flow;
pub mod metrics;
pub mod mixer;
pub mod model;
pub mod tensor;

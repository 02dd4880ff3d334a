//! Verification engine for facial Action Unit classifiers.
//!
//! The engine loads a convolutional network from a portable JSON format,
//! explains each detected Action Unit with layer-wise relevance propagation,
//! and scores every explanation by how much of its positive relevance falls
//! inside a landmark-derived bounding box for that Action Unit.
//!
//! * [`tensor`]: dense tensors and forward kernels
//! * [`model`]: model format, validation, forward pass, classification
//! * [`lrp`]: relevance propagation rules and end-to-end explanations
//! * [`geometry`]: landmarks to per-AU boxes and masks
//! * [`metrics`]: localization ratio, aggregation, F1
//! * [`heatmap`]: normalization and PNG rendering
//! * [`pipeline`]: manifest ingestion, batch verification, reports

pub mod au;
pub mod error;
pub mod geometry;
pub mod heatmap;
pub mod lrp;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod tensor;

pub use au::{ActionUnit, PAIN_AUS};
pub use error::{Error, Result};

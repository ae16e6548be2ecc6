//! Clustering and epistemic-uncertainty statistics for repeated
//! MC-Dropout instance-segmentation samples.
//!
//! The pipeline: [`ingest`] reads per-image sample files and drops
//! background-dominated detections, [`clustering`] groups the samples into
//! instances, [`report`] derives box/class/mask statistics per instance,
//! [`calibration`] fits and measures temperature scaling and
//! [`evaluation`] scores cluster detections with mAP at IoU 0.5. [`synth`]
//! generates scenes with known ground truth.

pub mod calibration;
pub mod clustering;
pub mod error;
pub mod evaluation;
pub mod ingest;
pub mod kde;
pub mod metrics;
pub mod model;
pub mod report;
pub mod seed;
pub mod synth;

pub use error::{Error, Result};

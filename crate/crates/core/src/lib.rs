//! Two-stage apple-leaf disease pipeline: background removal as a
//! training-set augmentation, then transfer-learning classification.
//!
//! The crate is organized along the pipeline stages:
//!
//! - [`corpus`]: ingest the one-hot label table, balance classes by seeded
//!   downsampling, produce the stratified 6:2:2 split.
//! - [`synthetic`]: hermetic leaf-image generator for offline runs and tests.
//! - [`segmenter`]: binary foreground masks (salient-model or color-index
//!   baseline backend), background suppression, and the quality gate.
//! - [`augmenter`]: the two training manifests — raw only, and raw plus
//!   gated background-removed copies.
//! - [`classifier`]: MobileNetV2-style backbone plus the custom head
//!   (GAP, batch norm, two dense layers, dropout, softmax over 3 classes).
//! - [`trainer`]: the four-cell experiment matrix with Adam and RMSProp.
//! - [`evaluator`]: confusion matrices, accuracy/precision/recall/F1, and
//!   the comparison report.

pub mod augmenter;
pub mod classifier;
pub mod corpus;
pub mod error;
pub mod evaluator;
pub mod nn;
pub mod optim;
pub mod seeding;
pub mod segmenter;
pub mod synthetic;
pub mod trainer;

pub use error::{Error, Result};

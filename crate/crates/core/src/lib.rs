//! Mean average precision after non-maximum suppression, treated as a
//! trainable loss.
//!
//! The crate covers the whole path from scored proposal windows to a
//! gradient-like signal on those scores:
//!
//! * [`geometry`] and [`dataset`]: boxes, IoU, datasets and score tables.
//! * [`nms`]: greedy non-maximum suppression with suppression bookkeeping.
//! * [`eval`]: ground-truth matching, precision/recall curves, VOC 2007
//!   11-point and VOC 2012 area AP, and mAP.
//! * [`pseudograd`]: pseudo partial derivatives of piecewise-constant
//!   functions (symmetric difference and mean envelope estimators).
//! * [`loss`]: step finding over ranked detections, NMS-aware step
//!   propagation, and the log-space mAP loss with its pseudogradient.
//! * [`oracle`]: brute-force reference implementations for testing.
//! * [`synth`]: seeded synthetic detection problems.
//! * [`trainer`]: SGD with momentum over a free score table.

pub mod dataset;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod io;
pub mod loss;
pub mod nms;
pub mod oracle;
pub mod pseudograd;
pub mod synth;
pub mod trainer;

pub use dataset::{Dataset, GroundTruthObject, Image, ProposalWindow, ScoreTable, Violation};
pub use error::{Error, Result};
pub use eval::{ApVariant, DetectionKind, DetectionLabel, EvalConfig, MapResult, PrCurve};
pub use geometry::{iou, BoundingBox};
pub use loss::{GradientField, LossConfig, LossOutput, ScoreStep, WindowSteps};
pub use nms::{NmsConfig, NmsOutcome};
pub use pseudograd::{EstimatorConfig, EstimatorKind, Step, StepProfile};
pub use synth::SynthConfig;
pub use trainer::{TrainConfig, TrainHistory};

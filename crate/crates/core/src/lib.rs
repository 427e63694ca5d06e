//! Cascade-corner object detection on a desk-scale f64 tensor engine.
//!
//! The pipeline mines class-agnostic top-left corners on an FPN heatmap,
//! regresses a square RoI per corner, then localizes the instance-specific
//! bottom-right corner and class inside that RoI. No corner matching exists
//! anywhere in the decode path.

pub mod boxes;
pub mod corner;
pub mod error;
pub mod config;
pub mod data;
pub mod losses;
pub mod model;
pub mod rng;
pub mod tape;
pub mod targets;
pub mod tensor;

pub use error::{Error, Result};
pub use tape::{grad_check, Tape, Var};
pub use tensor::Tensor;

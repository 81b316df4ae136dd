//! Salient-object detection with output-guided attention.
//!
//! The crate is self-contained: [`tensor`] provides dense tensors and a
//! reverse-mode tape, on top of which sit the attention modules, the
//! multi-output encoder-decoder, its losses, the two-stage training
//! pipeline, evaluation metrics and the file-level harness used by the
//! `ognet` binary.

pub mod attention;
pub mod error;
pub mod evaluation;
pub mod harness;
pub mod layers;
pub mod losses;
pub mod network;
pub mod params;
pub mod pipeline;
pub mod tensor;

pub use error::{Error, Result};

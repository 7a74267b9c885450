//! Entropy-steered multimodal sensor fusion for single-shot object detection,
//! with a synthetic clear-weather training corpus and simulated fog, night,
//! and snow/rain test distortions.
//!
//! The crate is organized around the processing pipeline:
//!
//! - [`tensor`]: dense f32 tensors with reverse-mode gradients
//! - [`encode`]: raw sensor measurements -> pixel-aligned planes
//! - [`entropy`]: local measurement entropy maps that steer fusion
//! - [`sim`]: synthetic scenes plus weather degradation models
//! - [`net`]: the four-branch fusion detector and its ablation variants
//! - [`ssd`]: anchors, matching, detection losses, decoding, NMS
//! - [`eval`]: weather- and difficulty-stratified average precision
//! - [`data`]: dataset persistence and reproducible splits
//! - [`config`] / [`pipeline`] / [`cli`]: the operator surface

pub mod cli;
pub mod config;
pub mod data;
pub mod encode;
pub mod entropy;
pub mod error;
pub mod eval;
pub mod net;
pub mod pipeline;
pub mod sim;
pub mod ssd;
pub mod tensor;

pub use error::{Error, Result};

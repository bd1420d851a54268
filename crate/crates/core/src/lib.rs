//! Neuron-aware selective fine-tuning of a tiny multimodal transformer.
//!
//! The pipeline trains a small vision-encoder + language-decoder model on
//! synthetic image-translation tasks, scores every feed-forward unit with a
//! first-order Taylor saliency, splits units into language-agnostic and
//! language-specific groups, and fine-tunes only the chosen units through
//! gradient masks.

pub mod autodiff;
pub mod checkpoint;
pub mod maskedft;
pub mod error;
pub mod evalreport;
pub mod model;
pub mod neuronscore;
pub mod partition;
pub mod pipeline;
pub mod synthtask;
pub mod tensor;
pub mod vocab;

pub use error::{Error, Result};
pub use tensor::Tensor;

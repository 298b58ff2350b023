//! A desk-scale text-video-to-audio generator built on a multimodal
//! flow-matching diffusion transformer, with the data-curation pipeline and
//! evaluation metrics that surround it.

pub mod attention;
pub mod blocks;
pub mod cli;
pub mod curation;
pub mod error;
pub mod flow;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod stubs;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;

//! Model inversion for frozen vision-language and vision-only models.
//!
//! An image buffer is optimized by gradient descent against a composite
//! objective: a sequence cross-entropy on the language model output (or a
//! class cross-entropy for classifiers), layer-statistics matching against
//! real-image references, and a set of image regularizers. The crate also
//! ships the evaluation metrics used to score the synthesized images.

pub mod engine;
pub mod error;
pub mod floatjson;
pub mod gradcheck;
pub mod metrics;
pub mod modelzoo;
pub mod objective;
pub mod ops;
pub mod statcapture;

pub use error::{Error, Result};

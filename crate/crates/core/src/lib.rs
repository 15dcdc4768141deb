//! Zero-shot evaluation harness for "imagination"-augmented multimodal inference.
//!
//! Input text is turned into a generated image by a text-to-image backend, the
//! text and image are handed to a multimodal language model, and the raw
//! output is post-processed, mapped onto a label set (emotion recognition) or
//! kept as an answer span (conversational QA) and scored.
//!
//! Every model sits behind a small JSON-over-HTTP contract (see [`backends`]);
//! deterministic mock implementations of all five routes make the whole
//! experiment matrix runnable on a laptop in seconds.

pub mod backends;
pub mod cli;
pub mod datamodel;
pub mod datasets;
pub mod error;
pub mod hashing;
pub mod imaging;
pub mod mapping;
pub mod metrics;
pub mod par;
pub mod prompting;
pub mod runner;
pub mod segmentation;

pub use error::{Error, Result};

//! Joint word/object embeddings from co-location counts.
//!
//! The pipeline reads a multimodal corpus (images with detected objects and
//! tokenized captions), counts object–object, word–object and word–word
//! co-locations, turns the counts into shifted PPMI values with context
//! distribution smoothing, factors them with a truncated SVD and eigenvalue
//! weighting, maps averaged object features into word space with an
//! orthogonal transform, and merges everything into one embedding where words
//! and objects are directly comparable.

pub mod align;
pub mod assoc;
pub mod cooc;
pub mod corpus;
pub mod embedding;
pub mod error;
pub mod factor;
pub mod pipeline;
pub mod query;
mod util;

pub use error::{Error, Result};
pub use util::{fmt_f64, sha256_file};

//! Long-sequence recommender transformer.
//!
//! The pipeline: synthetic behavior data ([`inputs`]), token merge
//! ([`merge`]), cross-causal then self-causal attention ([`attention`]),
//! the end-to-end model and trainer ([`model`]), two-stage KV-cache scoring
//! ([`serving`]) and the analytic cost model, metrics and scaling-law fitter
//! ([`analysis`]).

pub mod analysis;
pub mod attention;
pub mod error;
pub mod inputs;
pub mod merge;
pub mod model;
pub mod rng;
pub mod serving;
pub mod tensors;

pub use error::{Error, Result};

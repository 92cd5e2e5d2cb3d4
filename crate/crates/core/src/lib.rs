//! Uncertainty quantification for tool-calling and retrieval-augmented
//! language-model pipelines.

// negated float comparisons double as NaN rejection
#![allow(clippy::neg_cmp_op_on_partial_ord)]
// tests keep frozen literal oracle values and index-based finite differences
#![cfg_attr(test, allow(clippy::approx_constant, clippy::needless_range_loop, clippy::type_complexity))]

pub mod config;
pub mod datagen;
pub mod error;
pub mod eval;
pub mod generators;
pub(crate) mod http;
pub mod io;
pub mod metrics;
pub mod pipeline;
pub mod posteriors;
pub mod prob;
pub mod semantics;
pub mod tools;

#[cfg(test)]
mod testutil;

pub use error::{Error, Result};

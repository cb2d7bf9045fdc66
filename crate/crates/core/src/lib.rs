//! Workbench for designing latency-aware hybrid small language models.
//!
//! The crate bundles the numerical substrate (tensors, tape autodiff, fused
//! sequence-mixing kernels), reference token mixers with parallel and
//! recurrent forms, a three-stage hybrid architecture genome, a toy-scale
//! trainer with weight normalization and meta tokens, a depth/width scaling
//! law, a host latency lookup table, and an aging-evolution search.

// `!(x > 0.0)` is written that way so NaN fails the check.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
#![allow(clippy::needless_range_loop)]

pub mod corpus;
pub mod error;
pub mod exec;
pub mod genome;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod latency;
pub mod model;
pub mod operators;
pub mod scaling;
pub mod search;
pub mod stats;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use exec::Execution;
pub use graph::{Graph, Var};
pub use tensor::{DType, Tensor};

//! Capacity planning for disaggregated mixture-of-experts decoding.
//!
//! Attention and expert FFNs run on separate GPU fleets and exchange tokens
//! every layer. The crate models the per-stage costs ([`perf_model`]), runs
//! the ping-pong micro-batch pipeline ([`pipeline`]), searches deployment
//! plans for throughput per unit cost ([`planner`]), places experts and
//! requests ([`balance`]) and drives one-variable studies ([`sweep`]).

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod balance;
pub mod catalog;
pub mod cli;
pub mod error;
pub mod perf_model;
pub mod pipeline;
pub mod planner;
pub mod sweep;

pub use error::{Error, Result};

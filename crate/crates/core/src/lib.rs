//! Adaptive recoding for batched network coding on a two-hop relay with
//! overhearing: expected-rank tables, per-rank recoding budgets, relay idle
//! time, time-efficiency optimization and a packet-level simulator.

// `!(x >= 0.0)` is how NaN gets rejected along with negatives.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod channel;
pub mod error;
pub mod idle;
pub mod optimizer;
pub mod recoding;
pub mod sim;

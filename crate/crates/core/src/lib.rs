//! Grounded preference-based language-action alignment on a synthetic
//! block-pushing world: data generation, the action-conditioned grounding
//! model, the hierarchical policy, SimPO alignment and evaluation metrics.

// Config validation is written as `!(x > 0.0)` so that NaN is rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod evalkit;
pub mod gpla;
pub mod grounding;
pub mod nets;
pub mod policy;
pub mod rng;
pub mod synthenv;
pub mod text;

pub use error::{CoreError, Result};

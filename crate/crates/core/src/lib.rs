//! Activation monitoring toolkit: linear and SAE-based probes, LAT scans,
//! prompted baselines and stacked classifiers, evaluated by AUROC.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod actstore;
pub mod error;
pub mod eval;
pub mod probe;
pub mod prompt;
pub mod rng;
pub mod sae;
pub mod synth;

pub use error::{Error, Result};

/// Upper bound on few-shot examples in a prompt.
pub const MAX_FEW_SHOT: usize = 32;

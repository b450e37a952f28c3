//! Vision transformers conditioned on per-group context tokens.
//!
//! A batch is partitioned by group membership; each group contributes one
//! context token, inferred from its members (or looked up, for the oracle
//! variant), which is placed in a dedicated slot of every member's token
//! sequence. Everything runs on a small f64 reverse-mode autodiff core.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
#![allow(clippy::too_many_arguments)]

pub mod check;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod context;
pub mod data;
pub mod error;
pub mod eval;
pub mod numerics;
pub mod params;
pub mod train;
pub mod vit;

pub use error::{Error, Result};

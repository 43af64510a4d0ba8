// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod controller;
pub mod error;
pub mod experiment;
pub mod features;
pub mod fo_gpr;
pub mod gp_core;
pub mod model;
pub mod sim;
pub mod task;

pub use error::{Error, Result};

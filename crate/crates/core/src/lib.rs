//! Supervised contrastive feature learning for small grayscale texture patches.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod augment;
pub mod cli;
pub mod corpus;
pub mod error;
pub mod evaluate;
pub mod gradcheck;
pub mod model;
pub mod nn;
pub mod objective;
pub mod optim;
pub mod seed;
pub mod trainer;

pub use error::{Error, Result};

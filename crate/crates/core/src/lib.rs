#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod diagnostics;
pub mod error;
pub mod grad;
pub mod hamiltonian;
pub mod problems;
pub mod rollout;
pub mod tape;
pub mod trainer;
pub mod valuenet;

pub use error::{Error, Result};

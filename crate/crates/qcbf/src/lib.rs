//! File formats, configuration and the command-line driver for
//! [`qcbf_core`].

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod cli;
pub mod config;
mod error;
pub mod exec;
pub mod field_io;

pub use error::{AppError, AppResult};

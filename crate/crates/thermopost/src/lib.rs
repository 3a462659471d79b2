//! File formats, configuration and the command pipeline around
//! [`thermopost_core`].

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub use thermopost_core as core;

pub mod commands;
pub mod config;
pub mod error;
pub mod export;
pub mod mtx;
pub mod pipeline;
pub mod report;
pub mod system_io;

pub use error::{Error, Result};

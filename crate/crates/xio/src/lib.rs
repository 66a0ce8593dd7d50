//! File formats, configuration and task runner behind the `advland` CLI.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod idx;
pub mod report;
pub mod run;

pub use config::{RunConfig, Task};
pub use error::{Result, XioError};

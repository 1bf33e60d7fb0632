//! File formats, experiment harness and command-line front end for the
//! prompt-based continued pre-training lab in [`pcp_core`].

pub mod cli;
pub mod config;
pub mod error;
pub mod harness;
pub mod io;
pub mod report;
pub mod synthetic;

pub use error::{Error, Result};
pub use pcp_core;

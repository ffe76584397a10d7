//! File formats, data pipeline and command-line front end around
//! `dtdy-core`.

pub mod audio;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod pipeline;
pub mod synth;

pub use error::{Error, Result};

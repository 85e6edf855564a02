//! Language-guided tracking-by-detection.

pub mod bbox;
pub mod cli;
pub mod config;
mod error;
pub mod eval;
pub mod experiment;
pub mod gpgnet;
pub mod image;
pub mod language;
pub mod oracles;
pub mod numerics;
pub mod proposals;
pub mod relgraph;
pub mod salnet;
pub mod synth;
pub mod tracker;

pub use error::{Error, Result};

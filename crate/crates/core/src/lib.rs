//! Simulation and analysis of energy-time Bell tests in the Franson and
//! hug interferometer geometries.

pub mod config;
pub mod error;
pub mod estimate;
pub mod exec;
pub mod experiment;
pub mod lhv;
pub mod lockbox;
pub mod oracle;
pub mod photonics;
pub mod qmodel;
pub mod report;
pub mod rng;
pub mod tagger;
pub mod topology;

pub use error::{Error, Result};
pub use exec::Execution;

pub mod error;
pub mod geometry;
pub mod cascade;
pub mod chaos;
pub mod config;
pub mod gff;
pub mod harness;
pub mod quad;
pub mod renewal;
pub mod report;
pub mod rng;
pub mod spine;
pub mod stats;

pub use error::{Error, Result};

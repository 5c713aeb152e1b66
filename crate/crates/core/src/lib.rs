pub mod bench;
pub mod cli;
pub mod dataset;
pub mod distill;
pub mod error;
pub mod exec;
pub mod hybrid;
pub mod net;
pub mod rng;
pub mod schedule;
pub mod switchtime;
pub mod teacher;

pub use error::{Error, Result};

pub mod ars;
pub mod cli;
pub mod error;
pub mod harness;
pub mod io;
pub mod metrics;
pub mod model;
pub mod par;
pub mod rve;

pub use error::{Error, Result};

//! Power allocation and parameter estimation for OFDM dual-function
//! radar-communication with a bistatic receive array.

pub mod baseline;
pub mod cpd;
pub mod error;
pub mod fisher;
pub mod harness;
pub mod model;
pub mod parallel;
pub mod power;

pub use error::{Error, Result};

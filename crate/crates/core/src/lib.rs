pub mod boundaries;
pub mod combine;
pub mod engine;
pub mod error;
pub mod futility;
pub mod harness;
pub mod multiplicity;
pub mod numerics;
pub mod presets;
pub mod simdata;

pub use error::{Error, Result};

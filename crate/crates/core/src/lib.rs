pub mod cli;
pub mod data;
pub mod error;
pub mod model;
pub mod numerics;
pub mod sequencing;
pub mod simulation;
pub mod selecting;
pub mod staging;
pub mod structuring;
pub mod util;

pub use error::{Error, Result};

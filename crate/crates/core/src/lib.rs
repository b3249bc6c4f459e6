pub mod error;
pub mod neighbors;
pub mod disturbances;
pub mod duality;
pub mod grids;
pub mod model;
pub mod pwlc;
pub mod solver;

pub use error::{Error, Result};

pub mod corpus;
pub mod error;
pub mod eval;
pub mod losses;
pub mod model;
pub mod numerics;
pub mod protocol;
pub mod rng;

pub use error::{Error, Result};

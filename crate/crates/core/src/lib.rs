pub mod analysis;
pub mod checkpoint;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod model;
pub mod tasks;
pub mod tensor;
pub mod training;
pub mod vocab;

pub use error::{Error, Result};

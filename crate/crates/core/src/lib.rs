pub mod autodiff;
pub mod codec;
pub mod config;
pub mod corpus;
pub mod encoding;
pub mod eval;
pub mod experiment;
pub mod error;
pub mod loss;
pub mod model;
pub mod objectives;
pub mod report;
pub mod rng;
pub mod serve;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};

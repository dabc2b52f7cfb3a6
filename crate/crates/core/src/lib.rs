//! Desk-scale federated blind super-resolution benchmark: clients each
//! holding one degradation type train a shared SR model by synchronous
//! weight averaging, and the global model is scored against every
//! degradation combination.

pub mod data;
pub mod degrade;
pub mod error;
pub mod evaluation;
pub mod federation;
pub mod model;
pub mod partition;
pub mod rng;
pub mod tensor;
pub mod weights;

pub use error::{Error, Result};

//! Penalized variable selection for discrete-time survival models with
//! left truncation, right censoring and Gaussian frailties.

pub mod error;
pub mod linalg;
pub mod optimizer;
pub mod pipeline;
pub mod preprocess;
pub mod rng;
pub mod simulation;
pub mod survival;
pub mod tuning;

pub use error::{Error, Result};

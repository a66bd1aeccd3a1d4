//! Edge-disentangling graph neural network for semi-supervised node
//! classification.

pub mod autodiff;
pub mod data;
pub mod disentangle;
mod error;
pub mod eval;
pub mod graph;
pub mod model;
pub mod rng;
pub mod ssl;

pub use error::{Error, Result};

//! One-way prototypical few-shot classification.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod embed;
pub mod episodes;
pub mod error;
pub mod eval;
pub mod heads;
pub mod model;
pub mod optim;
pub mod tensor;
pub mod train;

pub use config::RunConfig;
pub use error::{Error, Result};
pub use model::Model;
pub use tensor::{Graph, ParamSet, Tensor, Var};

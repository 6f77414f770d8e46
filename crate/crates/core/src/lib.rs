//! Differentiable search over relational graph operations.

pub mod cell;
pub mod cli;
pub mod engine;
mod error;
pub mod graphops;
pub mod io;
pub mod model;
pub mod search;
pub mod synthdata;
pub mod trainer;

pub use error::{Error, Result};

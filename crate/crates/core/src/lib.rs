//! Age-structured population density with spatial transport: model
//! ingestion, discretization, age evolution, reproduction operators,
//! bifurcation-branch continuation and fixed-point search.

pub mod cli;
pub mod continuation;
pub mod discretize;
pub mod error;
pub mod evolution;
pub mod expr;
pub mod fixedpoint;
pub mod linearized;
pub mod model;
pub mod reproduction;

pub use error::{Error, Result};
pub use evolution::{AgeGrid, DensityField, EvolutionOperator};
pub use model::{parse_model, ModelSpec};

//! Convolutional full-field solvers for the parametric Poisson equation,
//! trained with a variational finite-element energy on a multigrid schedule
//! of grid resolutions and a deterministic data-parallel engine.

pub mod error;
pub mod fem;
pub mod io;
pub mod mgtrain;
pub mod network;
pub mod parallel;
pub mod problem;
pub mod tensor;
pub mod validate;

pub use error::{Error, Result};

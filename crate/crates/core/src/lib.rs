pub mod cli;
pub mod error;
pub mod geometry;
pub mod linsolve;
pub mod nonlinear;
pub mod operator;
pub mod quadrature;
pub mod verify;

pub use error::{Error, Result};

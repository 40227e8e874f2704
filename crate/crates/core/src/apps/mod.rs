//! Reference applications built on the runtime.

pub mod cholesky;
pub mod kernels;
pub mod rk4;

pub use cholesky::{CholeskyConfig, CholeskyProgram};
pub use rk4::{CrsMatrix, Rk4Config, Rk4Program};

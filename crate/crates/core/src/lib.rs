//! Regression-discontinuity estimation with local composite quantile regression.

pub mod are;
pub mod bandwidth;
pub mod error;
pub mod fuzzy;
pub mod io;
pub mod kernels;
pub mod laws;
pub mod lcqr;
pub mod linalg;
pub mod llr;
pub mod montecarlo;
pub mod nuisance;
pub mod quadrature;
pub mod sample;
pub mod sandwich;
pub mod sharp;
pub mod util;

pub use error::{RdError, Result};
pub use kernels::{KernelFamily, KernelMoments, KernelSpec, Side};
pub use lcqr::{LcqrFit, SolverOptions};
pub use sample::{RdSample, SideData};

//! Sparse coding laboratory: classic proximal solvers for the LASSO, the
//! factorized (A, S) proximal splitting with its convergence bound evaluators,
//! unrolled trainable networks (LISTA, LFISTA, FacNet) and Monte-Carlo checks
//! of the generic-dictionary gap results.

pub mod error;
pub mod experiments;
pub mod factorized;
pub mod generic_gap;
pub mod io;
pub mod lasso;
pub mod linalg;
pub mod nets;
pub mod rng;
pub mod solvers;

pub use error::{Error, Result};
pub use linalg::{Mat, Vector};

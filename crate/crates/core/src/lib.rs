//! Speaker verification with a GMM-UBM / i-vector / PLDA cascade and a
//! neural end-to-end system initialized to mimic it.

pub mod config;
pub mod corpus;
pub mod dplda;
pub mod e2e;
pub mod error;
pub mod eval;
pub mod f2s;
pub mod frontend;
pub mod gmm;
pub mod io;
pub mod ivector;
pub mod lbfgs;
pub mod linalg;
pub mod netcore;
pub mod persist;
pub mod pipeline;
pub mod plda;
pub mod s2i;
pub mod stages;

pub use error::{Error, Result};

pub mod admm;
pub mod cli;
pub mod config;
pub mod error;
pub mod experiments;
pub mod io;
pub mod linalg;
pub mod mask;
pub mod pgd;
pub mod weights;

pub use error::{Error, Result};
pub use linalg::DenseMatrix;
pub use mask::{Mask, MaskedMatrix};

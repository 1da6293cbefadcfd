pub mod data;
pub mod diff;
pub mod error;
pub mod eval;
pub mod io;
pub mod knn;
pub mod models;
pub mod oversample;
pub mod pca;
pub mod rng;
pub mod train;

pub use error::{Error, Result};

//! Continuous-discrete neural state space models.
pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod dynamics;
pub mod error;
pub mod eval;
pub mod filter;
pub mod integrate;
pub mod linalg;
pub mod model;
pub mod nn;
pub mod params;
pub mod reference;
pub mod smoother;

pub use error::{Error, Result};
pub use linalg::Matrix;

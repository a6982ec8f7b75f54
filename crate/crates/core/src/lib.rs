pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod gp_layer;
pub mod kernels;
pub mod metrics;
pub mod models;
pub mod objectives;
pub mod quadrature;
pub mod training;

pub use error::{Error, Result};

pub mod attention;
pub mod autodiff;
pub mod checkpoint;
pub mod commands;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod random;
pub mod spd;
pub mod train;

pub use error::{Error, Result};

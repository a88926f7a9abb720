pub mod adapter;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod fusion;
pub mod local;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod params;
pub mod train;

pub use candle_core;
pub use candle_core::{DType, Device};
pub use error::{DfaError, Result};

//! Agent-aware socio-temporal transformer for multi-agent trajectory
//! forecasting, with a CVAE, a diversity sampler, data tooling and metrics.

pub mod attention;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod cvae;
pub mod data;
pub mod error;
pub mod metrics;
pub mod optim;
pub mod params;
pub mod sampler;
pub mod seq;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};

//! Hierarchical differentiable architecture search for multivariate forecasting.

pub mod arch;
pub mod cells;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod genotype;
pub mod network;
pub mod nn;
pub mod ops;
pub mod pipeline;
pub mod prune;
pub mod search;
pub mod train;

pub use config::{MacroMode, NetworkConfig, SizeClass};
pub use error::{CoreError, Result};
pub use genotype::Genotype;
pub use network::{Batch, Forecast, Network, Plan};

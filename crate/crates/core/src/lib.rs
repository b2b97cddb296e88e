//! Traffic forecasting with decoupled traffic patterns, per-cluster dynamic graphs and
//! subgraph information extraction.

pub mod cli;
pub mod clusterer;
pub mod config;
pub mod data;
pub mod decoupling;
pub mod dstgg;
pub mod error;
pub mod model;
pub mod sie;
pub mod train_eval;

pub use error::{Error, Result};

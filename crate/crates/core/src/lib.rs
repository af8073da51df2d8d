//! Contextual anomaly detection for radio-access-network cell KPIs.
//!
//! Each cell's PRB utilization is predicted from its spatial neighborhood by
//! an attention model whose readout is a linear combination of rescaled
//! neighbor series. Hours where the cell deviates from what its neighbors
//! explain, relative to the neighbors' own spread, are flagged.
//!
//! Modules:
//! - [`graph_data`]: ingestion, imputation, neighborhoods, regional splits.
//! - [`synth`]: labelled synthetic deployments and telemetry.
//! - [`predictor`]: the contextual predictor forward pass and model files.
//! - [`trainer`]: Gaussian NLL training with exact gradients and Adam.
//! - [`detector`]: pre-filter, scoring, consolidation and period reports.
//! - [`pipeline`]: the end-to-end commands behind the `ranctx` binary.

pub mod config;
pub mod detector;
pub mod error;
pub mod graph_data;
pub mod nn;
pub mod pipeline;
pub mod predictor;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};

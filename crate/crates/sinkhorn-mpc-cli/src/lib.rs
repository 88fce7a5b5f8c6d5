//! Command-line front end for the transport-control library: config file
//! ingestion, experiment presets, trajectory/benchmark export, and static
//! plot emission. The binary in `main.rs` is a thin dispatcher over these
//! modules.

pub mod bench;
pub mod config;
pub mod export;
pub mod plot;
pub mod presets;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Control(#[from] sinkhorn_mpc::controller::ControlError),
    #[error(transparent)]
    Mpc(#[from] sinkhorn_mpc::linear_mpc::MpcError),
    #[error(transparent)]
    Analysis(#[from] sinkhorn_mpc::analysis::AnalysisError),
    #[error(transparent)]
    Transport(#[from] sinkhorn_mpc::transport::TransportError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

//! Pure computations over flow results and packet traces.

mod bias;
pub mod capture;
mod connectivity;
mod summary;
mod trace;

use thiserror::Error;

pub use bias::{rtt_bias, tp_bias, BiasSample};
pub use connectivity::{classify_blocked, conn_bias, ConnAttempt};
pub use summary::{
    aggregate_matrix, cdf_quantile, export_cdf, median, split_summary, CdfPoint, Dimension, GroupedSummary,
    MatrixMetric, PathMatrix, PathSummary, Side, DEFAULT_RTT_THRESHOLD_MS, DEFAULT_TP_THRESHOLD_KBPS,
};
pub use trace::{initial_rtt, loss_pct, CaptureDirection, PacketRecord, TcpFlags};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("{name} must be a positive finite number, got {value}")]
    NonPositive { name: &'static str, value: f64 },
    #[error("empty trace")]
    EmptyTrace,
    #[error("incomplete handshake: {0}")]
    NoHandshake(&'static str),
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
}

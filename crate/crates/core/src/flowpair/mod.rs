//! Paired native/tunneled flows: specs and results, the pair and campaign
//! runners, the data server, the live client and the transport racer.

mod campaign;
#[cfg(target_os = "linux")]
pub mod live;
pub mod race;
pub mod server;
mod types;

use thiserror::Error;

pub use campaign::{run_campaign, run_pair, CampaignSummary, JsonlSink, PairDriver, PairOutcome, ResultSink};
pub use race::{
    decide, race_connect, race_with_cache, Clock, Handshake, HandshakeRacer, RaceCache, RaceError, Transport,
    DEFAULT_HEAD_START,
};
pub use server::{DataServer, ServeConfig, ServerStats};
pub(crate) use types::duration_ms;
pub use types::{
    flow_size_bytes, CampaignConfig, FailureReason, FlowResult, FlowSpec, PairResult, PairTimestamps,
    DEFAULT_IW_SEGMENTS, DEFAULT_MSS, DEFAULT_PORTS, DEFAULT_SCHEDULE, DEFAULT_SIZES_IW,
};

#[derive(Debug, Error)]
pub enum FlowPairError {
    #[error("invalid flow specification: {0}")]
    InvalidSpec(String),
    #[error("setup failed for {target}: {reason}")]
    Setup { target: String, reason: String },
    #[error("cannot listen on {addr}: {source}")]
    Bind {
        addr: std::net::SocketAddr,
        #[source]
        source: std::io::Error,
    },
    #[error("result output failed: {0}")]
    Output(#[source] std::io::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

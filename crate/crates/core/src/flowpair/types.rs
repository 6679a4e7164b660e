use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::FlowPairError;
use crate::metrics;

/// Flow sizes in multiples of the initial window.
pub const DEFAULT_SIZES_IW: [u32; 5] = [1, 3, 30, 300, 1500];
/// Destination ports of the default campaign.
pub const DEFAULT_PORTS: [u16; 7] = [53, 443, 8008, 12345, 33435, 34567, 54321];
/// Initial window in segments (modern kernel default).
pub const DEFAULT_IW_SEGMENTS: u32 = 10;
/// MSS of a tunneled flow on a 1500-byte path.
pub const DEFAULT_MSS: u16 = 1432;
/// Pairs per size: 20 for the small sizes, 10 for the large ones.
pub const DEFAULT_SCHEDULE: [(u32, u32); 5] = [(1, 20), (3, 20), (30, 20), (300, 10), (1500, 10)];

/// Payload size of a flow: `size_iw` initial windows of `iw_segments`
/// segments of `mss` bytes.
pub fn flow_size_bytes(size_iw: u32, iw_segments: u32, mss: u16) -> Result<u64, FlowPairError> {
    if size_iw == 0 || iw_segments == 0 || mss == 0 {
        return Err(FlowPairError::InvalidSpec(format!(
            "flow size inputs must be positive (size_iw={size_iw}, iw_segments={iw_segments}, mss={mss})"
        )));
    }
    Ok(u64::from(size_iw) * u64::from(iw_segments) * u64::from(mss))
}

/// One unidirectional server-to-client transfer to be run as a pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlowSpec {
    pub destination: String,
    pub port: u16,
    pub size_iw: u32,
    pub iw_segments: u32,
    pub mss: u16,
}

impl FlowSpec {
    pub fn new(destination: impl Into<String>, port: u16, size_iw: u32) -> Self {
        Self { destination: destination.into(), port, size_iw, iw_segments: DEFAULT_IW_SEGMENTS, mss: DEFAULT_MSS }
    }

    pub fn payload_bytes(&self) -> Result<u64, FlowPairError> {
        flow_size_bytes(self.size_iw, self.iw_segments, self.mss)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FailureReason {
    None,
    ConnectTimeout,
    Reset,
    Stall,
}

/// Measured outcome of one flow.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowResult {
    pub success: bool,
    #[serde(rename = "bytes")]
    pub bytes_transferred: u64,
    pub duration_s: f64,
    #[serde(rename = "throughput_kBps")]
    pub throughput_kbps: f64,
    pub initial_rtt_ms: Option<f64>,
    pub loss_pct: Option<f64>,
    pub failure_reason: FailureReason,
}

impl FlowResult {
    pub fn succeeded(bytes: u64, duration_s: f64, initial_rtt_ms: f64, loss_pct: Option<f64>) -> Self {
        Self {
            success: true,
            bytes_transferred: bytes,
            duration_s,
            throughput_kbps: bytes as f64 / 1000.0 / duration_s,
            initial_rtt_ms: Some(initial_rtt_ms),
            loss_pct,
            failure_reason: FailureReason::None,
        }
    }

    pub fn failed(reason: FailureReason, bytes: u64, duration_s: f64, initial_rtt_ms: Option<f64>) -> Self {
        Self {
            success: false,
            bytes_transferred: bytes,
            duration_s,
            throughput_kbps: 0.0,
            initial_rtt_ms,
            loss_pct: None,
            failure_reason: reason,
        }
    }
}

/// Start and end of both flows, in seconds. Live runs use the Unix epoch,
/// emulated runs the emulator clock.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PairTimestamps {
    pub tcp_start: f64,
    pub tcp_end: f64,
    pub udp_start: f64,
    pub udp_end: f64,
}

impl PairTimestamps {
    pub fn start_skew_s(&self) -> f64 {
        (self.tcp_start - self.udp_start).abs()
    }
}

/// A native TCP flow and its UDP-encapsulated twin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairResult {
    pub pair_id: String,
    /// Vantage point that ran the client side.
    pub src: String,
    #[serde(flatten)]
    pub spec: FlowSpec,
    pub tcp: FlowResult,
    pub udp: FlowResult,
    pub tp_bias: Option<f64>,
    pub rtt_bias: Option<f64>,
    pub timestamps: PairTimestamps,
}

impl PairResult {
    /// Builds the record and fills in the biases when both flows succeeded.
    pub fn new(
        pair_id: impl Into<String>,
        src: impl Into<String>,
        spec: FlowSpec,
        tcp: FlowResult,
        udp: FlowResult,
        timestamps: PairTimestamps,
    ) -> Self {
        let (tp_bias, rtt_bias) = if tcp.success && udp.success {
            let tp = metrics::tp_bias(udp.throughput_kbps, tcp.throughput_kbps).ok();
            let rtt = match (tcp.initial_rtt_ms, udp.initial_rtt_ms) {
                (Some(t), Some(u)) => metrics::rtt_bias(t, u).ok(),
                _ => None,
            };
            (tp, rtt)
        } else {
            (None, None)
        };
        Self { pair_id: pair_id.into(), src: src.into(), spec, tcp, udp, tp_bias, rtt_bias, timestamps }
    }

    pub fn attempt(&self) -> metrics::ConnAttempt {
        metrics::ConnAttempt { tcp_ok: self.tcp.success, udp_ok: self.udp.success }
    }
}

/// What a campaign runs, per destination and port.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignConfig {
    pub source: String,
    pub destinations: Vec<String>,
    pub ports: Vec<u16>,
    /// `(size_iw, pairs)` in execution order.
    pub schedule: Vec<(u32, u32)>,
    pub iw_segments: u32,
    pub mss: u16,
    #[serde(with = "duration_ms")]
    pub inter_pair_delay: Duration,
    #[serde(with = "duration_ms")]
    pub connect_timeout: Duration,
    #[serde(with = "duration_ms")]
    pub stall_timeout: Duration,
    /// Consecutive pairs with both flows failing before a (destination, port)
    /// is skipped.
    pub attempts_before_skip: u32,
}

impl Default for CampaignConfig {
    fn default() -> Self {
        Self {
            source: "local".into(),
            destinations: Vec::new(),
            ports: DEFAULT_PORTS.to_vec(),
            schedule: DEFAULT_SCHEDULE.to_vec(),
            iw_segments: DEFAULT_IW_SEGMENTS,
            mss: DEFAULT_MSS,
            inter_pair_delay: Duration::from_millis(100),
            connect_timeout: Duration::from_secs(10),
            stall_timeout: Duration::from_secs(30),
            attempts_before_skip: 3,
        }
    }
}

impl CampaignConfig {
    pub fn validate(&self) -> Result<(), FlowPairError> {
        if let Some(p) = self.ports.iter().find(|&&p| p == 0) {
            return Err(FlowPairError::InvalidSpec(format!("invalid port {p}")));
        }
        if let Some((s, c)) = self.schedule.iter().find(|(s, c)| *s == 0 || *c == 0) {
            return Err(FlowPairError::InvalidSpec(format!("schedule entry ({s} IW x {c} pairs) must be positive")));
        }
        if self.attempts_before_skip == 0 {
            return Err(FlowPairError::InvalidSpec("attempts_before_skip must be >= 1".into()));
        }
        flow_size_bytes(1, self.iw_segments, self.mss)?;
        Ok(())
    }

    pub fn pairs_per_target(&self) -> u64 {
        self.schedule.iter().map(|&(_, c)| u64::from(c)).sum()
    }

    /// Specs for one (destination, port), in execution order.
    pub fn specs_for(&self, destination: &str, port: u16) -> Vec<FlowSpec> {
        self.schedule
            .iter()
            .flat_map(|&(size_iw, count)| {
                (0..count).map(move |_| FlowSpec {
                    destination: destination.to_string(),
                    port,
                    size_iw,
                    iw_segments: self.iw_segments,
                    mss: self.mss,
                })
            })
            .collect()
    }
}

pub(crate) mod duration_ms {
    use std::time::Duration;

    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(d.as_millis() as u64)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        Ok(Duration::from_millis(u64::deserialize(d)?))
    }
}

//! Desk-scale ground truth: an impairment profile, the per-packet transit
//! decision, a discrete-event flow emulator and scenario runners.

pub mod harness;
pub mod probe_path;
pub mod profile;
pub mod sim;
pub mod transit;

use thiserror::Error;

pub use harness::{bundled, bundled_scenario, run_scenario, HarnessReport, Scenario, Workload};

pub use profile::{ImpairmentProfile, Scope};
pub use transit::{transit, Decision, Direction, DropReason, PacketMeta, PathState, Protocol};

/// Unix time the emulated clocks start from.
pub const LAB_EPOCH_S: f64 = 1_700_000_000.0;

#[derive(Debug, Error)]
pub enum PathLabError {
    #[error("invalid impairment profile: {0}")]
    Profile(String),
    #[error("timestamp went backwards ({now_us} us after {last_us} us)")]
    TimeWentBackwards { last_us: u64, now_us: u64 },
    #[error("emulation failed: {0}")]
    Emulation(String),
    #[error("scenario setup failed: {0}")]
    Setup(String),
}

//! Detects and quantifies differential network treatment of identical
//! congestion-controlled traffic carried under TCP versus UDP headers.
//!
//! - [`tunnel`]: userspace TCP-over-UDP tunnel endpoint.
//! - [`flowpair`]: paired native/tunneled flows, campaigns, the data server
//!   and the transport racer.
//! - [`metrics`]: bias formulas, loss and initial-RTT extraction, path
//!   matrices, grouped medians and CDFs.
//! - [`prober`]: traceroute-style UDP/TCP/ICMP reachability probes.
//! - [`pathlab`]: deterministic path-impairment emulator and scenarios.
//! - [`cli`]: command implementations and result files.

pub mod cli;
pub mod flowpair;
pub mod metrics;
pub mod pathlab;
pub mod prober;
pub mod tunnel;

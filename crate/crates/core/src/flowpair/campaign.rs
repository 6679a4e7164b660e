use std::io::{self, Write};
use std::sync::atomic::{AtomicBool, Ordering};
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{CampaignConfig, FlowPairError, FlowResult, FlowSpec, PairResult, PairTimestamps};

/// Raw outcome of one pair before biases are derived.
#[derive(Debug, Clone, PartialEq)]
pub struct PairOutcome {
    pub tcp: FlowResult,
    pub udp: FlowResult,
    pub timestamps: PairTimestamps,
}

/// Something that can run the two flows of a pair, live or emulated.
pub trait PairDriver {
    /// Prepares everything needed to reach `destination`.
    fn begin_destination(&mut self, _destination: &str) -> Result<(), FlowPairError> {
        Ok(())
    }

    /// Starts both flows together and returns once both have ended.
    fn run_flows(&mut self, spec: &FlowSpec) -> PairOutcome;

    fn pause(&mut self, delay: Duration) {
        thread::sleep(delay);
    }

    fn end_destination(&mut self, _destination: &str) {}
}

pub fn run_pair(driver: &mut dyn PairDriver, spec: &FlowSpec, src: &str, pair_id: impl Into<String>) -> PairResult {
    let PairOutcome { tcp, udp, timestamps } = driver.run_flows(spec);
    PairResult::new(pair_id, src, spec.clone(), tcp, udp, timestamps)
}

pub trait ResultSink {
    fn append(&mut self, result: &PairResult) -> io::Result<()>;
}

impl ResultSink for Vec<PairResult> {
    fn append(&mut self, result: &PairResult) -> io::Result<()> {
        self.push(result.clone());
        Ok(())
    }
}

/// Writes one JSON object per line and flushes after each, so an
/// interrupted run leaves a parseable prefix.
pub struct JsonlSink<W: Write> {
    out: W,
    pub written: u64,
}

impl<W: Write> JsonlSink<W> {
    pub fn new(out: W) -> Self {
        Self { out, written: 0 }
    }

    pub fn write_value<T: Serialize>(&mut self, value: &T) -> io::Result<()> {
        let mut line = serde_json::to_vec(value)?;
        line.push(b'\n');
        self.out.write_all(&line)?;
        self.out.flush()?;
        self.written += 1;
        Ok(())
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

impl<W: Write> ResultSink for JsonlSink<W> {
    fn append(&mut self, result: &PairResult) -> io::Result<()> {
        self.write_value(result)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CampaignSummary {
    pub pairs_run: u64,
    pub pairs_skipped: u64,
    pub both_ok: u64,
    pub tcp_only: u64,
    pub udp_only: u64,
    pub both_failed: u64,
    /// (destination, port) targets abandoned after repeated failures.
    pub skipped_targets: Vec<(String, u16)>,
    pub interrupted: bool,
}

/// Runs every (destination, port, size) of `config` one pair at a time and
/// appends each result to `sink` as soon as it is known.
///
/// After `attempts_before_skip` consecutive pairs where both flows failed,
/// the remaining pairs of that (destination, port) are skipped. The failed
/// pairs stay in the output as connectivity evidence. Setting `stop` ends
/// the campaign before the next pair.
pub fn run_campaign(
    config: &CampaignConfig,
    driver: &mut dyn PairDriver,
    sink: &mut dyn ResultSink,
    stop: Option<&AtomicBool>,
) -> Result<CampaignSummary, FlowPairError> {
    config.validate()?;
    let mut summary = CampaignSummary::default();
    let stopped = || stop.is_some_and(|s| s.load(Ordering::Relaxed));
    for destination in &config.destinations {
        driver.begin_destination(destination)?;
        for &port in &config.ports {
            let specs = config.specs_for(destination, port);
            let mut consecutive_failures = 0;
            for (k, spec) in specs.iter().enumerate() {
                if stopped() {
                    summary.interrupted = true;
                    driver.end_destination(destination);
                    return Ok(summary);
                }
                if consecutive_failures >= config.attempts_before_skip {
                    summary.pairs_skipped += (specs.len() - k) as u64;
                    summary.skipped_targets.push((destination.clone(), port));
                    log::warn!("skipping {destination}:{port} after {consecutive_failures} failed pairs");
                    break;
                }
                if summary.pairs_run > 0 && !config.inter_pair_delay.is_zero() {
                    driver.pause(config.inter_pair_delay);
                }
                let id = format!("{}/{}:{}/{}iw/{}", config.source, destination, port, spec.size_iw, k);
                let result = run_pair(driver, spec, &config.source, id);
                match (result.tcp.success, result.udp.success) {
                    (true, true) => summary.both_ok += 1,
                    (true, false) => summary.tcp_only += 1,
                    (false, true) => summary.udp_only += 1,
                    (false, false) => summary.both_failed += 1,
                }
                if result.tcp.success || result.udp.success {
                    consecutive_failures = 0;
                } else {
                    consecutive_failures += 1;
                }
                summary.pairs_run += 1;
                sink.append(&result).map_err(FlowPairError::Output)?;
            }
        }
        driver.end_destination(destination);
    }
    Ok(summary)
}

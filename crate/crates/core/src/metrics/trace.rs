//! Normalized per-packet records and the two quantities extracted from
//! them: payload loss (sender side) and handshake RTT (client side).

use serde::{Deserialize, Serialize};

use super::MetricsError;

/// Direction relative to the host that captured the packet.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CaptureDirection {
    Sent,
    Received,
}

/// TCP flag bits as they appear in the header.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TcpFlags(pub u8);

impl TcpFlags {
    pub const FIN: u8 = 0x01;
    pub const SYN: u8 = 0x02;
    pub const RST: u8 = 0x04;
    pub const PSH: u8 = 0x08;
    pub const ACK: u8 = 0x10;

    pub fn has(self, bit: u8) -> bool {
        self.0 & bit != 0
    }

    pub fn is_syn(self) -> bool {
        self.has(Self::SYN) && !self.has(Self::ACK)
    }

    pub fn is_syn_ack(self) -> bool {
        self.has(Self::SYN) && self.has(Self::ACK)
    }
}

/// One TCP segment as seen by a capture point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PacketRecord {
    pub ts_us: u64,
    pub direction: CaptureDirection,
    pub seq: u32,
    pub payload_len: u32,
    pub flags: TcpFlags,
}

/// Percentage of flow payload that had to be sent again.
///
/// Every byte range sent more than once counts once per re-send; the
/// denominator is the number of distinct payload bytes. Only `Sent` records
/// are considered.
pub fn loss_pct(trace: &[PacketRecord]) -> Result<f64, MetricsError> {
    if trace.is_empty() {
        return Err(MetricsError::EmptyTrace);
    }
    let mut coverage = Coverage::default();
    let mut retransmitted = 0u64;
    let mut unwrap = SeqUnwrapper::default();
    for r in trace.iter().filter(|r| r.direction == CaptureDirection::Sent && r.payload_len > 0) {
        // SYN consumes one sequence number before the payload.
        let start = unwrap.unwrap(r.seq) + u64::from(r.flags.has(TcpFlags::SYN));
        let end = start + u64::from(r.payload_len);
        retransmitted += coverage.insert(start, end);
    }
    let distinct = coverage.len();
    if distinct == 0 {
        return Ok(0.0);
    }
    Ok(retransmitted as f64 * 100.0 / distinct as f64)
}

/// Time between the first SYN sent and the first SYN+ACK received, in ms.
/// A retransmitted SYN does not reset the start time.
pub fn initial_rtt(trace: &[PacketRecord]) -> Result<f64, MetricsError> {
    let syn = trace
        .iter()
        .find(|r| r.direction == CaptureDirection::Sent && r.flags.is_syn())
        .ok_or(MetricsError::NoHandshake("no SYN sent"))?;
    let syn_ack = trace
        .iter()
        .find(|r| r.direction == CaptureDirection::Received && r.flags.is_syn_ack() && r.ts_us >= syn.ts_us)
        .ok_or(MetricsError::NoHandshake("no SYN+ACK received"))?;
    Ok((syn_ack.ts_us - syn.ts_us) as f64 / 1000.0)
}

/// Maps 32-bit sequence numbers onto a monotone 64-bit space anchored at the
/// first value seen.
#[derive(Debug, Default)]
struct SeqUnwrapper {
    last: Option<(u32, u64)>,
}

impl SeqUnwrapper {
    fn unwrap(&mut self, seq: u32) -> u64 {
        let value = match self.last {
            None => 1u64 << 32,
            Some((raw, unwrapped)) => {
                let delta = seq.wrapping_sub(raw) as i32;
                (unwrapped as i64 + i64::from(delta)) as u64
            }
        };
        self.last = Some((seq, value));
        value
    }
}

/// Sorted, disjoint half-open intervals.
#[derive(Debug, Default)]
struct Coverage {
    ranges: Vec<(u64, u64)>,
}

impl Coverage {
    /// Adds `[start, end)` and returns how many of its bytes were already
    /// covered.
    fn insert(&mut self, start: u64, end: u64) -> u64 {
        let mut overlap = 0;
        let mut new_start = start;
        let mut new_end = end;
        let mut kept = Vec::with_capacity(self.ranges.len() + 1);
        for &(s, e) in &self.ranges {
            if e < start || s > end {
                kept.push((s, e));
                continue;
            }
            overlap += e.min(end).saturating_sub(s.max(start));
            new_start = new_start.min(s);
            new_end = new_end.max(e);
        }
        let pos = kept.partition_point(|&(s, _)| s < new_start);
        kept.insert(pos, (new_start, new_end));
        self.ranges = kept;
        overlap
    }

    fn len(&self) -> u64 {
        self.ranges.iter().map(|(s, e)| e - s).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::HashMap;

    fn data(ts_us: u64, seq: u32, len: u32) -> PacketRecord {
        PacketRecord { ts_us, direction: CaptureDirection::Sent, seq, payload_len: len, flags: TcpFlags(TcpFlags::ACK) }
    }

    fn ctl(ts_us: u64, direction: CaptureDirection, flags: u8) -> PacketRecord {
        PacketRecord { ts_us, direction, seq: 0, payload_len: 0, flags: TcpFlags(flags) }
    }

    /// Independent byte-by-byte count: every byte beyond its first send is a
    /// loss.
    fn brute_force_loss(trace: &[PacketRecord]) -> f64 {
        let mut seen: HashMap<u64, u32> = HashMap::new();
        for r in trace.iter().filter(|r| r.direction == CaptureDirection::Sent) {
            for b in 0..u64::from(r.payload_len) {
                *seen.entry(u64::from(r.seq) + b).or_default() += 1;
            }
        }
        if seen.is_empty() {
            return 0.0;
        }
        let resent: u32 = seen.values().map(|c| c - 1).sum();
        f64::from(resent) / seen.len() as f64 * 100.0
    }

    #[test]
    fn lossless_flow() {
        let trace: Vec<_> = (0..30).map(|i| data(i, 1000 + i as u32 * 1000, 1000)).collect();
        assert_eq!(loss_pct(&trace).unwrap(), 0.0);
    }

    #[test]
    fn three_of_thirty_resent_is_ten_percent() {
        let mut trace: Vec<_> = (0..30).map(|i| data(i, i as u32 * 1432, 1432)).collect();
        for k in [4u32, 11, 27] {
            trace.push(data(100 + u64::from(k), k * 1432, 1432));
        }
        assert_eq!(brute_force_loss(&trace), 10.0);
        assert_eq!(loss_pct(&trace).unwrap(), 10.0);
    }

    #[test]
    fn ten_percent_of_payload_resent_once() {
        // 10_000 payload bytes, the first 1_000 sent twice.
        let mut trace = vec![data(0, 0, 5_000), data(1, 5_000, 5_000)];
        trace.push(data(2, 0, 1_000));
        assert_eq!(loss_pct(&trace).unwrap(), 10.0);
    }

    #[test]
    fn empty_and_payloadless_traces() {
        assert!(matches!(loss_pct(&[]), Err(MetricsError::EmptyTrace)));
        let only_ctl = [ctl(0, CaptureDirection::Sent, TcpFlags::SYN)];
        assert_eq!(loss_pct(&only_ctl).unwrap(), 0.0);
    }

    #[test]
    fn sequence_wraparound() {
        let start = u32::MAX - 1500;
        let trace = vec![
            data(0, start, 1000),
            data(1, start.wrapping_add(1000), 1000),
            data(2, start.wrapping_add(1000), 1000),
        ];
        assert_eq!(loss_pct(&trace).unwrap(), 50.0);
    }

    #[test]
    fn handshake_rtt_examples() {
        let t = [
            ctl(0, CaptureDirection::Sent, TcpFlags::SYN),
            ctl(12_000, CaptureDirection::Received, TcpFlags::SYN | TcpFlags::ACK),
        ];
        assert_eq!(initial_rtt(&t).unwrap(), 12.0);
        let t = [
            ctl(0, CaptureDirection::Sent, TcpFlags::SYN),
            ctl(1_000_000, CaptureDirection::Sent, TcpFlags::SYN),
            ctl(1_012_000, CaptureDirection::Received, TcpFlags::SYN | TcpFlags::ACK),
        ];
        assert_eq!(initial_rtt(&t).unwrap(), 1012.0);
        let t = [ctl(0, CaptureDirection::Sent, TcpFlags::SYN)];
        assert!(matches!(initial_rtt(&t), Err(MetricsError::NoHandshake(_))));
    }

    proptest! {
        #[test]
        fn matches_byte_count_oracle(
            segs in proptest::collection::vec((0u32..40, 1u32..5), 1..60)
        ) {
            let trace: Vec<_> = segs
                .iter()
                .enumerate()
                .map(|(i, &(slot, n))| data(i as u64, slot * 100, n * 100))
                .collect();
            let got = loss_pct(&trace).unwrap();
            let want = brute_force_loss(&trace);
            prop_assert!((got - want).abs() < 1e-9, "got {got} want {want}");
            prop_assert!(got >= 0.0);
        }

        #[test]
        fn zero_iff_no_repeats(perm in Just((0u32..20).collect::<Vec<_>>()).prop_shuffle()) {
            let trace: Vec<_> = perm.iter().map(|&k| data(u64::from(k), k * 10, 10)).collect();
            prop_assert_eq!(loss_pct(&trace).unwrap(), 0.0);
        }
    }
}

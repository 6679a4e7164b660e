//! Per-packet middlebox decision: block, size limits, NAT state, loss,
//! shaping and added latency.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::profile::{ImpairmentProfile, Scope};
use super::PathLabError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    Tcp,
    Udp,
    Icmp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    /// From the measuring client outward; creates NAT mappings.
    Forward,
    Reverse,
}

impl Direction {
    fn index(self) -> usize {
        match self {
            Direction::Forward => 0,
            Direction::Reverse => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PacketMeta {
    pub protocol: Protocol,
    /// IP packet size in bytes.
    pub size: usize,
    pub direction: Direction,
    pub ts_us: u64,
    /// Identifies the connection for NAT bookkeeping.
    pub flow: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DropReason {
    Blocked,
    LargeIcmp,
    Mtu,
    NatExpired,
    NoMapping,
    Loss,
    RateLimited,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    DeliverAt(u64),
    Drop(DropReason),
}

/// Token bucket whose level may go negative: a deficit is the queue the
/// packet waits behind.
#[derive(Debug, Clone)]
struct Shaper {
    rate_bytes_per_us: f64,
    depth: f64,
    level: f64,
    last_us: u64,
}

impl Shaper {
    fn new(rate_kbps: f64) -> Self {
        let rate = rate_kbps * 1000.0 / 1e6;
        // One second worth of tokens, full at start.
        let depth = rate_kbps * 1000.0;
        Self { rate_bytes_per_us: rate, depth, level: depth, last_us: 0 }
    }

    /// Returns the queueing delay, or `None` when it would exceed `max_wait_us`.
    fn admit(&mut self, now: u64, size: usize, max_wait_us: f64) -> Option<u64> {
        let elapsed = now.saturating_sub(self.last_us) as f64;
        self.level = (self.level + elapsed * self.rate_bytes_per_us).min(self.depth);
        self.last_us = now;
        let after = self.level - size as f64;
        let wait = if after >= 0.0 { 0.0 } else { -after / self.rate_bytes_per_us };
        if wait > max_wait_us {
            return None;
        }
        self.level = after;
        Some(wait.ceil() as u64)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransitStats {
    pub delivered: u64,
    pub dropped: HashMap<DropReason, u64>,
}

/// Mutable state of one emulated path.
#[derive(Debug, Clone)]
pub struct PathState {
    shapers: HashMap<(Protocol, usize), Shaper>,
    nat: HashMap<(Protocol, u64), u64>,
    rng: ChaCha8Rng,
    last_ts: [Option<u64>; 2],
    pub stats: TransitStats,
}

impl PathState {
    pub fn new(seed: u64) -> Self {
        Self {
            shapers: HashMap::new(),
            nat: HashMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            last_ts: [None; 2],
            stats: TransitStats::default(),
        }
    }
}

fn in_scope(scope: Scope, d: Direction) -> bool {
    match scope {
        Scope::Both => true,
        Scope::Forward => d == Direction::Forward,
        Scope::Reverse => d == Direction::Reverse,
    }
}

/// Decides the fate of one packet. Timestamps must not decrease within a
/// direction.
pub fn transit(meta: PacketMeta, profile: &ImpairmentProfile, state: &mut PathState) -> Result<Decision, PathLabError> {
    let di = meta.direction.index();
    if let Some(last) = state.last_ts[di] {
        if meta.ts_us < last {
            return Err(PathLabError::TimeWentBackwards { last_us: last, now_us: meta.ts_us });
        }
    }
    state.last_ts[di] = Some(meta.ts_us);
    let decision = decide(meta, profile, state);
    match decision {
        Decision::DeliverAt(_) => state.stats.delivered += 1,
        Decision::Drop(r) => *state.stats.dropped.entry(r).or_default() += 1,
    }
    Ok(decision)
}

fn decide(meta: PacketMeta, p: &ImpairmentProfile, state: &mut PathState) -> Decision {
    use Protocol::*;
    let blocked = match meta.protocol {
        Udp => p.udp_block,
        Tcp => p.tcp_block,
        Icmp => false,
    };
    if blocked {
        return Decision::Drop(DropReason::Blocked);
    }
    if meta.protocol == Icmp && p.large_icmp_block_threshold.is_some_and(|t| meta.size > t) {
        return Decision::Drop(DropReason::LargeIcmp);
    }
    if p.path_mtu.is_some_and(|m| meta.size > m) {
        return Decision::Drop(DropReason::Mtu);
    }

    let nat_timeout = match meta.protocol {
        Udp => p.nat_udp_idle_timeout,
        Tcp => p.nat_tcp_idle_timeout,
        Icmp => None,
    };
    if let Some(timeout_s) = nat_timeout {
        let key = (meta.protocol, meta.flow);
        match (meta.direction, state.nat.get(&key).copied()) {
            (Direction::Forward, _) => {
                state.nat.insert(key, meta.ts_us);
            }
            (Direction::Reverse, None) => return Decision::Drop(DropReason::NoMapping),
            (Direction::Reverse, Some(last)) => {
                if (meta.ts_us - last) as f64 > timeout_s * 1e6 {
                    state.nat.remove(&key);
                    return Decision::Drop(DropReason::NatExpired);
                }
                state.nat.insert(key, meta.ts_us);
            }
        }
    }

    let scoped = in_scope(p.scope, meta.direction);
    let (loss, rate, latency_ms) = match meta.protocol {
        Udp => (p.loss_rate_udp, p.udp_rate_limit, p.extra_latency_udp),
        Tcp => (p.loss_rate_tcp, p.tcp_rate_limit, p.extra_latency_tcp),
        Icmp => (0.0, None, 0.0),
    };
    if !scoped {
        return Decision::DeliverAt(meta.ts_us);
    }
    if loss > 0.0 && state.rng.random::<f64>() < loss {
        return Decision::Drop(DropReason::Loss);
    }
    let mut at = meta.ts_us;
    if let Some(rate) = rate {
        let shaper = state.shapers.entry((meta.protocol, meta.direction.index())).or_insert_with(|| Shaper::new(rate));
        match shaper.admit(meta.ts_us, meta.size, p.shaper_queue_ms * 1000.0) {
            Some(wait) => at += wait,
            None => return Decision::Drop(DropReason::RateLimited),
        }
    }
    Decision::DeliverAt(at + (latency_ms * 1000.0).round() as u64)
}

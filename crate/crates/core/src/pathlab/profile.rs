//! Ground-truth path behavior, read from a flat `key = value` file.

use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::PathLabError;

/// Which directions the latency, loss and rate-limit impairments apply to.
/// Forward is from the measuring client toward the server.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scope {
    #[default]
    Both,
    Forward,
    Reverse,
}

impl FromStr for Scope {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "both" => Ok(Self::Both),
            "forward" => Ok(Self::Forward),
            "reverse" => Ok(Self::Reverse),
            other => Err(format!("unknown scope {other:?} (expected both, forward or reverse)")),
        }
    }
}

/// Default bound on shaper queueing delay before a packet is dropped.
pub const DEFAULT_SHAPER_QUEUE_MS: f64 = 200.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ImpairmentProfile {
    pub udp_block: bool,
    pub tcp_block: bool,
    /// kB/s (1 kB = 1000 bytes), measured on the wire.
    pub udp_rate_limit: Option<f64>,
    pub tcp_rate_limit: Option<f64>,
    /// Milliseconds added per traversal.
    pub extra_latency_udp: f64,
    pub extra_latency_tcp: f64,
    pub loss_rate_udp: f64,
    pub loss_rate_tcp: f64,
    /// Largest IP packet forwarded, in bytes.
    pub path_mtu: Option<usize>,
    /// Seconds.
    pub nat_udp_idle_timeout: Option<f64>,
    pub nat_tcp_idle_timeout: Option<f64>,
    /// ICMP packets larger than this many bytes are dropped.
    pub large_icmp_block_threshold: Option<usize>,
    pub scope: Scope,
    pub shaper_queue_ms: f64,
}

impl Default for ImpairmentProfile {
    fn default() -> Self {
        Self {
            udp_block: false,
            tcp_block: false,
            udp_rate_limit: None,
            tcp_rate_limit: None,
            extra_latency_udp: 0.0,
            extra_latency_tcp: 0.0,
            loss_rate_udp: 0.0,
            loss_rate_tcp: 0.0,
            path_mtu: None,
            nat_udp_idle_timeout: None,
            nat_tcp_idle_timeout: None,
            large_icmp_block_threshold: None,
            scope: Scope::Both,
            shaper_queue_ms: DEFAULT_SHAPER_QUEUE_MS,
        }
    }
}

fn parse_opt<T: FromStr>(v: &str) -> Result<Option<T>, String> {
    if v.eq_ignore_ascii_case("none") {
        return Ok(None);
    }
    v.parse().map(Some).map_err(|_| format!("invalid value {v:?}"))
}

fn parse_val<T: FromStr>(v: &str) -> Result<T, String> {
    v.parse().map_err(|_| format!("invalid value {v:?}"))
}

fn show<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map_or_else(|| "none".into(), T::to_string)
}

impl ImpairmentProfile {
    /// The all-none profile: no drops, no delay.
    pub fn neutral() -> Self {
        Self::default()
    }

    pub fn is_neutral(&self) -> bool {
        let mut p = self.clone();
        p.scope = Scope::Both;
        p.shaper_queue_ms = DEFAULT_SHAPER_QUEUE_MS;
        p == Self::default()
    }

    pub fn validate(&self) -> Result<(), PathLabError> {
        let bad = |m: String| Err(PathLabError::Profile(m));
        for (name, p) in [("loss_rate_udp", self.loss_rate_udp), ("loss_rate_tcp", self.loss_rate_tcp)] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} must be within [0, 1], got {p}"));
            }
        }
        for (name, v) in [
            ("udp_rate_limit", self.udp_rate_limit),
            ("tcp_rate_limit", self.tcp_rate_limit),
            ("nat_udp_idle_timeout", self.nat_udp_idle_timeout),
            ("nat_tcp_idle_timeout", self.nat_tcp_idle_timeout),
        ] {
            if let Some(v) = v {
                if !(v > 0.0 && v.is_finite()) {
                    return bad(format!("{name} must be positive, got {v}"));
                }
            }
        }
        for (name, v) in [("extra_latency_udp", self.extra_latency_udp), ("extra_latency_tcp", self.extra_latency_tcp)]
        {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be non-negative, got {v}"));
            }
        }
        if self.path_mtu == Some(0) {
            return bad("path_mtu must be positive".into());
        }
        if !(self.shaper_queue_ms > 0.0) {
            return bad("shaper_queue_ms must be positive".into());
        }
        Ok(())
    }

    /// Parses `key = value` lines; `#` starts a comment, unknown keys are
    /// errors, optional values accept `none`.
    pub fn parse(text: &str) -> Result<Self, PathLabError> {
        let mut p = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| PathLabError::Profile(format!("line {}: expected key = value", n + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            let r: Result<(), String> = (|| {
                match key {
                    "udp_block" => p.udp_block = parse_val(value)?,
                    "tcp_block" => p.tcp_block = parse_val(value)?,
                    "udp_rate_limit" => p.udp_rate_limit = parse_opt(value)?,
                    "tcp_rate_limit" => p.tcp_rate_limit = parse_opt(value)?,
                    "extra_latency_udp" => p.extra_latency_udp = parse_val(value)?,
                    "extra_latency_tcp" => p.extra_latency_tcp = parse_val(value)?,
                    "loss_rate_udp" => p.loss_rate_udp = parse_val(value)?,
                    "loss_rate_tcp" => p.loss_rate_tcp = parse_val(value)?,
                    "path_mtu" => p.path_mtu = parse_opt(value)?,
                    "nat_udp_idle_timeout" => p.nat_udp_idle_timeout = parse_opt(value)?,
                    "nat_tcp_idle_timeout" => p.nat_tcp_idle_timeout = parse_opt(value)?,
                    "large_icmp_block_threshold" => p.large_icmp_block_threshold = parse_opt(value)?,
                    "scope" => p.scope = value.parse()?,
                    "shaper_queue_ms" => p.shaper_queue_ms = parse_val(value)?,
                    _ => return Err(format!("unknown key {key:?}")),
                }
                Ok(())
            })();
            r.map_err(|m| PathLabError::Profile(format!("line {}: {m}", n + 1)))?;
        }
        p.validate()?;
        Ok(p)
    }

    /// Inverse of [`parse`](Self::parse).
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let scope = match self.scope {
            Scope::Both => "both",
            Scope::Forward => "forward",
            Scope::Reverse => "reverse",
        };
        let _ = writeln!(s, "udp_block = {}", self.udp_block);
        let _ = writeln!(s, "tcp_block = {}", self.tcp_block);
        let _ = writeln!(s, "udp_rate_limit = {}", show(&self.udp_rate_limit));
        let _ = writeln!(s, "tcp_rate_limit = {}", show(&self.tcp_rate_limit));
        let _ = writeln!(s, "extra_latency_udp = {}", self.extra_latency_udp);
        let _ = writeln!(s, "extra_latency_tcp = {}", self.extra_latency_tcp);
        let _ = writeln!(s, "loss_rate_udp = {}", self.loss_rate_udp);
        let _ = writeln!(s, "loss_rate_tcp = {}", self.loss_rate_tcp);
        let _ = writeln!(s, "path_mtu = {}", show(&self.path_mtu));
        let _ = writeln!(s, "nat_udp_idle_timeout = {}", show(&self.nat_udp_idle_timeout));
        let _ = writeln!(s, "nat_tcp_idle_timeout = {}", show(&self.nat_tcp_idle_timeout));
        let _ = writeln!(s, "large_icmp_block_threshold = {}", show(&self.large_icmp_block_threshold));
        let _ = writeln!(s, "scope = {scope}");
        let _ = writeln!(s, "shaper_queue_ms = {}", self.shaper_queue_ms);
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_roundtrip() {
        let text = "
            # UDP shaped, NAT medians
            udp_rate_limit = 250
            nat_udp_idle_timeout = 180   # seconds
            nat_tcp_idle_timeout = 3600
            extra_latency_udp = 20
            scope = forward
            path_mtu = none
        ";
        let p = ImpairmentProfile::parse(text).unwrap();
        assert_eq!(p.udp_rate_limit, Some(250.0));
        assert_eq!(p.nat_udp_idle_timeout, Some(180.0));
        assert_eq!(p.scope, Scope::Forward);
        assert_eq!(p.path_mtu, None);
        assert_eq!(ImpairmentProfile::parse(&p.to_kv()).unwrap(), p);
        assert!(ImpairmentProfile::parse("").unwrap().is_neutral());
    }

    #[test]
    fn rejects_bad_values() {
        for text in [
            "loss_rate_udp = 1.5",
            "udp_rate_limit = 0",
            "nat_udp_idle_timeout = -1",
            "bogus = 1",
            "udp_block",
            "scope = sideways",
        ] {
            assert!(ImpairmentProfile::parse(text).is_err(), "{text}");
        }
    }
}

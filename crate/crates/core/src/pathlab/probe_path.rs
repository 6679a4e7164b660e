//! Emulated multi-hop path for the prober. Routers answer expired TTLs,
//! the target answers like a host with no UDP listeners, and the impairment
//! middlebox sits at the access border just past the first hop.

use std::collections::{BTreeMap, HashSet};
use std::io;
use std::net::Ipv4Addr;
use std::time::Duration;

use etherparse::{Ipv4Header, SlicedPacket, TransportSlice};

use super::profile::ImpairmentProfile;
use super::transit::{transit, Decision, Direction, DropReason, PacketMeta, PathState, Protocol};
use crate::prober::packet::{
    build_echo_reply, build_icmp_error, build_tcp_answer, CODE_FRAG_NEEDED, CODE_PORT_UNREACHABLE,
    ICMP_DEST_UNREACHABLE, ICMP_TIME_EXCEEDED,
};
use crate::prober::ProbeTransport;

pub struct EmulatedProbePath {
    pub profile: ImpairmentProfile,
    pub target: Ipv4Addr,
    /// Routers in path order; the target is one hop past the last.
    pub routers: Vec<Ipv4Addr>,
    pub hop_delay_us: u64,
    pub tcp_listening: HashSet<u16>,
    pub drops: BTreeMap<String, u64>,
    state: PathState,
    clock_us: u64,
    last_send_us: u64,
    last_reverse_us: u64,
    inbox: Vec<(u64, Vec<u8>)>,
}

fn protocol_of(number: u8) -> Option<Protocol> {
    match number {
        6 => Some(Protocol::Tcp),
        17 => Some(Protocol::Udp),
        1 => Some(Protocol::Icmp),
        _ => None,
    }
}

/// NAT flow key: the transport ports, or the ICMP identifier.
fn flow_key(packet: &[u8]) -> u64 {
    match SlicedPacket::from_ip(packet).ok().and_then(|s| s.transport) {
        Some(TransportSlice::Udp(u)) => u64::from(u.source_port()) << 16 | u64::from(u.destination_port()),
        Some(TransportSlice::Tcp(t)) => u64::from(t.source_port()) << 16 | u64::from(t.destination_port()),
        Some(TransportSlice::Icmpv4(i)) => u64::from(u16::from_be_bytes([i.bytes5to8()[0], i.bytes5to8()[1]])),
        _ => 0,
    }
}

impl EmulatedProbePath {
    /// `hops` counts routers plus the target, so it is at least 1.
    pub fn new(profile: ImpairmentProfile, target: Ipv4Addr, hops: u8, hop_delay_ms: f64, seed: u64) -> Self {
        let routers = (1..hops.max(1)).map(|i| Ipv4Addr::new(100, 64, 0, i)).collect();
        Self {
            profile,
            target,
            routers,
            hop_delay_us: (hop_delay_ms * 1000.0).round() as u64,
            tcp_listening: HashSet::new(),
            drops: BTreeMap::new(),
            state: PathState::new(seed),
            clock_us: 0,
            last_send_us: 0,
            last_reverse_us: 0,
            inbox: Vec::new(),
        }
    }

    pub fn hop_count(&self) -> usize {
        self.routers.len() + 1
    }

    fn count_drop(&mut self, label: String) {
        *self.drops.entry(label).or_default() += 1;
    }

    /// Passes one packet through the middlebox; `Err` carries the drop
    /// reason, if the middlebox gave one.
    fn cross(
        &mut self,
        packet: &[u8],
        protocol: Protocol,
        direction: Direction,
        at: u64,
    ) -> Result<u64, Option<DropReason>> {
        let ts = match direction {
            Direction::Forward => at,
            Direction::Reverse => {
                self.last_reverse_us = self.last_reverse_us.max(at);
                self.last_reverse_us
            }
        };
        let meta = PacketMeta { protocol, size: packet.len(), direction, ts_us: ts, flow: flow_key(packet) };
        match transit(meta, &self.profile, &mut self.state) {
            Ok(Decision::DeliverAt(t)) => Ok(t),
            Ok(Decision::Drop(reason)) => {
                let label =
                    serde_json::to_value(reason).ok().and_then(|v| v.as_str().map(str::to_string)).unwrap_or_default();
                self.count_drop(label);
                Err(Some(reason))
            }
            Err(e) => {
                log::warn!("emulated probe path: {e}");
                Err(None)
            }
        }
    }

    /// Sends `reply`, generated at `at` by the hop `hops_back` hops away,
    /// back toward the prober.
    fn answer(&mut self, reply: Vec<u8>, at: u64, hops_back: u64, crosses_middlebox: bool) {
        let protocol =
            Ipv4Header::from_slice(&reply).ok().and_then(|(h, _)| protocol_of(h.protocol.0)).unwrap_or(Protocol::Icmp);
        let mut t = at + (hops_back.saturating_sub(1)) * self.hop_delay_us;
        if crosses_middlebox {
            match self.cross(&reply, protocol, Direction::Reverse, t) {
                Ok(out) => t = out,
                Err(_) => return,
            }
        }
        t += self.hop_delay_us;
        self.inbox.push((t, reply));
    }
}

impl ProbeTransport for EmulatedProbePath {
    fn send(&mut self, packet: &[u8]) -> io::Result<()> {
        let now = self.clock_us;
        self.last_send_us = now;
        let (h, _) =
            Ipv4Header::from_slice(packet).map_err(|e| io::Error::new(io::ErrorKind::InvalidInput, e.to_string()))?;
        if Ipv4Addr::from(h.destination) != self.target {
            return Ok(());
        }
        let Some(protocol) = protocol_of(h.protocol.0) else {
            return Ok(());
        };
        let ttl = usize::from(h.time_to_live);
        // First hop: the access router, in front of the middlebox.
        let mut t = now + self.hop_delay_us;
        if ttl == 1 && !self.routers.is_empty() {
            if let Some(err) = build_icmp_error(self.routers[0], packet, ICMP_TIME_EXCEEDED, 0, 0) {
                self.answer(err, t, 1, false);
            }
            return Ok(());
        }
        match self.cross(packet, protocol, Direction::Forward, t) {
            Ok(out) => t = out,
            Err(reason) => {
                if reason == Some(DropReason::Mtu) && h.dont_fragment {
                    let from = self.routers.first().copied().unwrap_or(self.target);
                    let mtu = self.profile.path_mtu.unwrap_or(0).min(usize::from(u16::MAX)) as u16;
                    if let Some(err) = build_icmp_error(from, packet, ICMP_DEST_UNREACHABLE, CODE_FRAG_NEEDED, mtu) {
                        self.answer(err, t, 1, false);
                    }
                }
                return Ok(());
            }
        }
        if ttl <= self.routers.len() {
            t += (ttl as u64 - 1) * self.hop_delay_us;
            if let Some(err) = build_icmp_error(self.routers[ttl - 1], packet, ICMP_TIME_EXCEEDED, 0, 0) {
                self.answer(err, t, ttl as u64, true);
            }
            return Ok(());
        }
        let hops = self.hop_count() as u64;
        t += (hops - 1) * self.hop_delay_us;
        let reply = match protocol {
            Protocol::Udp => build_icmp_error(self.target, packet, ICMP_DEST_UNREACHABLE, CODE_PORT_UNREACHABLE, 0),
            Protocol::Icmp => build_echo_reply(packet),
            Protocol::Tcp => {
                let port = match SlicedPacket::from_ip(packet).ok().and_then(|s| s.transport) {
                    Some(TransportSlice::Tcp(tcp)) => tcp.destination_port(),
                    _ => 0,
                };
                build_tcp_answer(packet, self.tcp_listening.contains(&port))
            }
        };
        if let Some(reply) = reply {
            self.answer(reply, t, hops, true);
        }
        Ok(())
    }

    fn recv(&mut self, wait: Duration) -> io::Result<Option<(Vec<u8>, Duration)>> {
        let deadline = self.last_send_us + wait.as_micros() as u64;
        let earliest = self
            .inbox
            .iter()
            .enumerate()
            .filter(|(_, (t, _))| *t <= deadline)
            .min_by_key(|(_, (t, _))| *t)
            .map(|(i, _)| i);
        match earliest {
            Some(i) => {
                let (t, bytes) = self.inbox.remove(i);
                self.clock_us = self.clock_us.max(t);
                Ok(Some((bytes, Duration::from_micros(t - self.last_send_us))))
            }
            None => {
                self.clock_us = self.clock_us.max(deadline);
                self.inbox.retain(|(t, _)| *t > deadline);
                Ok(None)
            }
        }
    }

    fn pause(&mut self, d: Duration) {
        self.clock_us += d.as_micros() as u64;
    }

    fn unix_now(&self) -> f64 {
        super::LAB_EPOCH_S + self.clock_us as f64 / 1e6
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prober::{ProbeOutcome, ProbeProtocol, ProbeSpec, Prober, SWEEP_SIZES};

    const SRC: Ipv4Addr = Ipv4Addr::new(192, 0, 2, 10);
    const DST: Ipv4Addr = Ipv4Addr::new(198, 51, 100, 20);

    fn prober(profile: ImpairmentProfile, hops: u8) -> Prober<EmulatedProbePath> {
        Prober::new(EmulatedProbePath::new(profile, DST, hops, 5.0, 3), SRC)
    }

    #[test]
    fn all_protocols_reach_target_on_clean_path() {
        let mut p = prober(ImpairmentProfile::neutral(), 8);
        for proto in [ProbeProtocol::Udp, ProbeProtocol::Tcp, ProbeProtocol::Icmp] {
            for r in p.probe(&ProbeSpec::new(DST.into(), proto)).unwrap() {
                assert_eq!(r.outcome, ProbeOutcome::TargetResponse, "{proto:?}");
                assert_eq!(r.responder, Some(DST.into()));
                assert!((r.rtt_ms.unwrap() - 80.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn ttl_expiry_names_the_hop() {
        let mut p = prober(ImpairmentProfile::neutral(), 8);
        for ttl in 1..=7u8 {
            let spec = ProbeSpec { initial_ttl: ttl, attempts: 1, ..ProbeSpec::new(DST.into(), ProbeProtocol::Udp) };
            let r = &p.probe(&spec).unwrap()[0];
            assert_eq!(r.outcome, ProbeOutcome::PathTtlExceeded);
            assert_eq!(r.responder, Some(Ipv4Addr::new(100, 64, 0, ttl).into()));
        }
    }

    #[test]
    fn blocked_udp_times_out_but_ttl_one_still_answers() {
        let profile = ImpairmentProfile { udp_block: true, ..Default::default() };
        let mut p = prober(profile, 8);
        let r = p.probe(&ProbeSpec::new(DST.into(), ProbeProtocol::Udp)).unwrap();
        assert!(r.iter().all(|x| x.outcome == ProbeOutcome::Timeout));
        let spec = ProbeSpec { initial_ttl: 1, ..ProbeSpec::new(DST.into(), ProbeProtocol::Udp) };
        assert!(p.probe(&spec).unwrap().iter().all(|x| x.outcome == ProbeOutcome::PathTtlExceeded));
    }

    #[test]
    fn path_mtu_yields_frag_needed() {
        let profile = ImpairmentProfile { path_mtu: Some(1400), ..Default::default() };
        let mut p = prober(profile, 4);
        let spec = ProbeSpec { packet_size: 1454, ..ProbeSpec::new(DST.into(), ProbeProtocol::Icmp) };
        let r = p.probe(&spec).unwrap();
        assert!(r.iter().all(|x| x.outcome == ProbeOutcome::UnreachableFromPath));
        let spec = ProbeSpec { packet_size: 1454, ..ProbeSpec::new(DST.into(), ProbeProtocol::Icmp) };
        let mut clean = prober(ImpairmentProfile::neutral(), 4);
        assert!(clean.probe(&spec).unwrap().iter().all(|x| x.succeeded()));
    }

    #[test]
    fn sweep_shapes() {
        let template = ProbeSpec::new(DST.into(), ProbeProtocol::Udp);
        let s = prober(ImpairmentProfile::neutral(), 6).mtu_sweep(&template, &SWEEP_SIZES);
        assert!(s.rows.iter().all(|r| r.udp_ok && r.icmp_ok));
        let blocked = ImpairmentProfile { udp_block: true, ..Default::default() };
        let s = prober(blocked, 6).mtu_sweep(&template, &SWEEP_SIZES);
        assert!(s.rows.iter().all(|r| r.udp_fail_icmp_pass) && s.udp_fail_icmp_pass);
        let big_icmp = ImpairmentProfile { large_icmp_block_threshold: Some(1000), ..Default::default() };
        let s = prober(big_icmp, 6).mtu_sweep(&template, &SWEEP_SIZES);
        assert!(s.large_icmp_asymmetry && !s.udp_fail_icmp_pass);
    }

    proptest::proptest! {
        #[test]
        fn high_ttl_never_expires_on_path(hops in 1u8..30, extra in 0u8..100, proto in 0usize..3, loss in 0.0f64..0.5) {
            let proto = [ProbeProtocol::Udp, ProbeProtocol::Tcp, ProbeProtocol::Icmp][proto];
            let profile = ImpairmentProfile { loss_rate_udp: loss, loss_rate_tcp: loss, ..Default::default() };
            let mut p = prober(profile, hops);
            let spec = ProbeSpec { initial_ttl: hops.saturating_add(extra), ..ProbeSpec::new(DST.into(), proto) };
            for r in p.probe(&spec).unwrap() {
                proptest::prop_assert_ne!(r.outcome, ProbeOutcome::PathTtlExceeded);
                if let Some(rtt) = r.rtt_ms {
                    proptest::prop_assert!(rtt >= 0.0 && rtt <= spec.timeout.as_secs_f64() * 1000.0);
                }
                proptest::prop_assert_eq!(r.rtt_ms.is_some(), r.outcome != ProbeOutcome::Timeout);
            }
        }
    }
}

//! Probe construction and response classification on raw IPv4 bytes.

use std::net::Ipv4Addr;

use etherparse::{
    icmpv4::{DestUnreachableHeader, TimeExceededCode},
    Icmpv4Type, Ipv4Header, PacketBuilder, SlicedPacket, TransportSlice,
};

use super::ProbeProtocol;

pub const ICMP_ECHO_REPLY: u8 = 0;
pub const ICMP_DEST_UNREACHABLE: u8 = 3;
pub const ICMP_ECHO_REQUEST: u8 = 8;
pub const ICMP_TIME_EXCEEDED: u8 = 11;
pub const CODE_PORT_UNREACHABLE: u8 = 3;
pub const CODE_FRAG_NEEDED: u8 = 4;

const TCP_FLAG_RST: u8 = 0x04;
const TCP_FLAG_SYN: u8 = 0x02;
const TCP_FLAG_ACK: u8 = 0x10;

/// Identifies one probe packet so responses can be matched to it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProbeKey {
    pub protocol: ProbeProtocol,
    pub src: Ipv4Addr,
    pub dst: Ipv4Addr,
    /// UDP/TCP source port, or ICMP echo identifier.
    pub sport: u16,
    /// UDP/TCP destination port, or ICMP echo sequence number.
    pub dport: u16,
    /// TCP initial sequence number; unused otherwise.
    pub seq: u32,
}

/// What came back for a probe, before it is turned into an outcome.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Reply {
    EchoReply,
    TcpSynAck,
    TcpRst,
    IcmpError { icmp_type: u8, code: u8 },
}

fn set_dont_fragment(packet: &mut [u8]) {
    if let Ok((mut h, _)) = Ipv4Header::from_slice(packet) {
        h.dont_fragment = true;
        h.header_checksum = h.calc_header_checksum();
        let bytes = h.to_bytes();
        packet[..bytes.len()].copy_from_slice(&bytes);
    }
}

/// Full IPv4 probe packet with DF set; `payload_len` zero bytes follow the
/// transport header (ignored for TCP, whose SYN carries no data).
pub fn build_probe(key: &ProbeKey, ttl: u8, payload_len: usize) -> Vec<u8> {
    let ip = PacketBuilder::ipv4(key.src.octets(), key.dst.octets(), ttl);
    let payload = vec![0u8; payload_len];
    let mut out = Vec::with_capacity(payload_len + 60);
    let written = match key.protocol {
        ProbeProtocol::Udp => ip.udp(key.sport, key.dport).write(&mut out, &payload),
        ProbeProtocol::Icmp => ip.icmpv4_echo_request(key.sport, key.dport).write(&mut out, &payload),
        ProbeProtocol::Tcp => ip.tcp(key.sport, key.dport, key.seq, 65_535).syn().write(&mut out, &[]),
    };
    written.expect("writing to a Vec cannot fail");
    set_dont_fragment(&mut out);
    out
}

/// RST that tears down the half-open state a SYN+ACK left on the target.
pub fn build_rst(key: &ProbeKey, ttl: u8) -> Vec<u8> {
    let mut out = Vec::with_capacity(40);
    PacketBuilder::ipv4(key.src.octets(), key.dst.octets(), ttl)
        .tcp(key.sport, key.dport, key.seq.wrapping_add(1), 0)
        .rst()
        .write(&mut out, &[])
        .expect("writing to a Vec cannot fail");
    out
}

/// ICMP error from `from` quoting the IP header and first 8 payload bytes
/// of `offending`.
pub fn build_icmp_error(
    from: Ipv4Addr,
    offending: &[u8],
    icmp_type: u8,
    code: u8,
    next_hop_mtu: u16,
) -> Option<Vec<u8>> {
    let (h, _) = Ipv4Header::from_slice(offending).ok()?;
    let quote_len = (h.header_len() + 8).min(offending.len());
    let kind = match icmp_type {
        ICMP_TIME_EXCEEDED => Icmpv4Type::TimeExceeded(TimeExceededCode::TtlExceededInTransit),
        ICMP_DEST_UNREACHABLE => {
            Icmpv4Type::DestinationUnreachable(DestUnreachableHeader::from_values(code, next_hop_mtu)?)
        }
        _ => return None,
    };
    let mut out = Vec::with_capacity(28 + quote_len);
    PacketBuilder::ipv4(from.octets(), h.source, 64).icmpv4(kind).write(&mut out, &offending[..quote_len]).ok()?;
    Some(out)
}

/// Echo reply answering `request`, same identifier, sequence and payload.
pub fn build_echo_reply(request: &[u8]) -> Option<Vec<u8>> {
    let sliced = SlicedPacket::from_ip(request).ok()?;
    let ip = sliced.net.as_ref()?.ipv4_ref()?.header();
    let TransportSlice::Icmpv4(icmp) = sliced.transport? else {
        return None;
    };
    if icmp.type_u8() != ICMP_ECHO_REQUEST {
        return None;
    }
    let b = icmp.bytes5to8();
    let (id, seq) = (u16::from_be_bytes([b[0], b[1]]), u16::from_be_bytes([b[2], b[3]]));
    let mut out = Vec::with_capacity(request.len());
    PacketBuilder::ipv4(ip.destination(), ip.source(), 64)
        .icmpv4_echo_reply(id, seq)
        .write(&mut out, icmp.payload())
        .ok()?;
    Some(out)
}

/// SYN+ACK or RST answering a SYN probe.
pub fn build_tcp_answer(syn: &[u8], listening: bool) -> Option<Vec<u8>> {
    let sliced = SlicedPacket::from_ip(syn).ok()?;
    let ip = sliced.net.as_ref()?.ipv4_ref()?.header();
    let TransportSlice::Tcp(t) = sliced.transport? else {
        return None;
    };
    if !t.syn() || t.ack() {
        return None;
    }
    let ack = t.sequence_number().wrapping_add(1);
    let b = PacketBuilder::ipv4(ip.destination(), ip.source(), 64);
    let mut out = Vec::with_capacity(60);
    let step = if listening {
        b.tcp(t.destination_port(), t.source_port(), 0x5eed_0000, 65_535).syn().ack(ack)
    } else {
        b.tcp(t.destination_port(), t.source_port(), 0, 0).rst().ack(ack)
    };
    step.write(&mut out, &[]).ok()?;
    Some(out)
}

/// Does the quoted header inside an ICMP error belong to `key`?
fn quote_matches(quote: &[u8], key: &ProbeKey) -> bool {
    let Ok((h, rest)) = Ipv4Header::from_slice(quote) else {
        return false;
    };
    if Ipv4Addr::from(h.destination) != key.dst || h.protocol.0 != key.protocol.ip_number() || rest.len() < 8 {
        return false;
    }
    let a = u16::from_be_bytes([rest[0], rest[1]]);
    let b = u16::from_be_bytes([rest[2], rest[3]]);
    match key.protocol {
        ProbeProtocol::Udp => a == key.sport && b == key.dport,
        ProbeProtocol::Tcp => {
            a == key.sport && b == key.dport && u32::from_be_bytes([rest[4], rest[5], rest[6], rest[7]]) == key.seq
        }
        ProbeProtocol::Icmp => {
            rest[0] == ICMP_ECHO_REQUEST
                && u16::from_be_bytes([rest[4], rest[5]]) == key.sport
                && u16::from_be_bytes([rest[6], rest[7]]) == key.dport
        }
    }
}

/// Matches a received IPv4 packet against a probe; returns the responder
/// and what it said, or `None` for unrelated traffic.
pub fn match_response(packet: &[u8], key: &ProbeKey) -> Option<(Ipv4Addr, Reply)> {
    let sliced = SlicedPacket::from_ip(packet).ok()?;
    let ip = sliced.net.as_ref()?.ipv4_ref()?.header();
    let from = ip.source_addr();
    if ip.destination_addr() != key.src {
        return None;
    }
    match sliced.transport? {
        TransportSlice::Icmpv4(icmp) => {
            let (t, code) = (icmp.type_u8(), icmp.code_u8());
            match t {
                ICMP_ECHO_REPLY if key.protocol == ProbeProtocol::Icmp && from == key.dst => {
                    let b = icmp.bytes5to8();
                    let id_seq = (u16::from_be_bytes([b[0], b[1]]), u16::from_be_bytes([b[2], b[3]]));
                    (id_seq == (key.sport, key.dport)).then_some((from, Reply::EchoReply))
                }
                ICMP_DEST_UNREACHABLE | ICMP_TIME_EXCEEDED if quote_matches(icmp.payload(), key) => {
                    Some((from, Reply::IcmpError { icmp_type: t, code }))
                }
                _ => None,
            }
        }
        TransportSlice::Tcp(t) if key.protocol == ProbeProtocol::Tcp && from == key.dst => {
            let ports_match = t.source_port() == key.dport && t.destination_port() == key.sport;
            if !ports_match || !t.ack() || t.acknowledgment_number() != key.seq.wrapping_add(1) {
                return None;
            }
            if t.rst() {
                Some((from, Reply::TcpRst))
            } else if t.syn() {
                Some((from, Reply::TcpSynAck))
            } else {
                None
            }
        }
        _ => None,
    }
}

/// TCP flag byte of a raw IPv4/TCP packet, for tests and emulation.
pub fn tcp_flags(packet: &[u8]) -> Option<u8> {
    let sliced = SlicedPacket::from_ip(packet).ok()?;
    let TransportSlice::Tcp(t) = sliced.transport? else {
        return None;
    };
    Some((u8::from(t.syn()) * TCP_FLAG_SYN) | (u8::from(t.ack()) * TCP_FLAG_ACK) | (u8::from(t.rst()) * TCP_FLAG_RST))
}

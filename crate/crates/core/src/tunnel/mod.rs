//! Userspace tunnel endpoint that gives TCP flows a UDP wire image.
//!
//! Inner IP packets read from a layer-3 virtual interface are carried
//! verbatim as UDP payloads toward the peer; inbound datagrams are unwrapped
//! and written back to the interface. There is no extra framing: the outer
//! payload is exactly the inner packet.

pub mod endpoint;
pub mod packet;
#[cfg(target_os = "linux")]
pub mod tun;

use std::io;
use std::net::{IpAddr, Ipv4Addr, SocketAddr};

use etherparse::PacketBuilder;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use endpoint::{
    create_endpoint, CounterSnapshot, DirectionSnapshot, EndpointHandle, MemoryInterface, MemoryInterfaceHost,
    TunnelEndpoint, TunnelSocket, VirtualInterface,
};
pub use packet::{inspect_ip, rewrite_syn_mss, syn_mss, IpSummary, PacketError};

/// Outer IPv4 header (20) plus UDP header (8).
pub const IPV4_ENCAP_OVERHEAD: usize = 28;
/// Outer IPv6 header (40) plus UDP header (8).
pub const IPV6_ENCAP_OVERHEAD: usize = 48;
/// IPv4 + TCP headers without options, subtracted from an MTU to get an MSS.
pub const IPV4_TCP_HEADERS: usize = 40;

#[derive(Debug, Error)]
pub enum TunnelError {
    #[error("invalid UDP port 0")]
    InvalidPort,
    #[error("invalid tunnel configuration: {0}")]
    InvalidConfig(String),
    #[error("insufficient privileges to create virtual interface {name}: {source}")]
    Privilege { name: String, source: io::Error },
    #[error("virtual interface {0} already exists")]
    InterfaceCollision(String),
    #[error("UDP address {0} already in use")]
    PortInUse(SocketAddr),
    #[error("inner packet rejected: {0}")]
    Malformed(#[from] PacketError),
    #[error("inner packet of {len} bytes exceeds the {max}-byte virtual MTU")]
    Oversize { len: usize, max: usize },
    #[error("native MSS {native} does not exceed tunnel overhead {overhead}")]
    MssTooSmall { native: u16, overhead: u16 },
    #[error("virtual interface went away: {0}")]
    InterfaceGone(io::Error),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Parameters of one tunnel endpoint.
///
/// `interface_mtu` is the MTU of the physical path the outer datagrams use;
/// the virtual interface gets `interface_mtu - encap_overhead()`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TunnelConfig {
    pub local_addr: IpAddr,
    pub peer_addr: IpAddr,
    pub udp_port: u16,
    pub virtual_if_name: String,
    pub interface_mtu: usize,
    /// Address given to the virtual interface.
    pub virtual_addr: Ipv4Addr,
    /// Point-to-point peer address routed through the virtual interface.
    pub virtual_peer: Ipv4Addr,
    /// When set, outer UDP ports copy the inner TCP/UDP ports so that the
    /// tunneled flow and a native flow share their on-wire 4-tuple.
    #[serde(default)]
    pub mirror_ports: bool,
}

impl TunnelConfig {
    pub fn new(local_addr: IpAddr, peer_addr: IpAddr, udp_port: u16) -> Self {
        Self {
            local_addr,
            peer_addr,
            udp_port,
            virtual_if_name: "wimg0".into(),
            interface_mtu: 1500,
            virtual_addr: Ipv4Addr::new(10, 77, 0, 1),
            virtual_peer: Ipv4Addr::new(10, 77, 0, 2),
            mirror_ports: false,
        }
    }

    pub fn encap_overhead(&self) -> usize {
        match self.local_addr {
            IpAddr::V4(_) => IPV4_ENCAP_OVERHEAD,
            IpAddr::V6(_) => IPV6_ENCAP_OVERHEAD,
        }
    }

    /// Largest inner packet the tunnel forwards.
    pub fn virtual_mtu(&self) -> usize {
        self.interface_mtu.saturating_sub(self.encap_overhead())
    }

    /// MSS enforced on SYNs crossing the tunnel.
    pub fn clamped_mss(&self) -> u16 {
        self.virtual_mtu().saturating_sub(IPV4_TCP_HEADERS) as u16
    }

    pub fn validate(&self) -> Result<(), TunnelError> {
        if self.udp_port == 0 {
            return Err(TunnelError::InvalidPort);
        }
        if self.local_addr.is_ipv4() != self.peer_addr.is_ipv4() {
            return Err(TunnelError::InvalidConfig("local and peer addresses must share an address family".into()));
        }
        if self.interface_mtu <= self.encap_overhead() + IPV4_TCP_HEADERS {
            return Err(TunnelError::InvalidConfig(format!(
                "interface MTU {} leaves no room for a segment after {} bytes of encapsulation",
                self.interface_mtu,
                self.encap_overhead()
            )));
        }
        if self.virtual_if_name.is_empty() || self.virtual_if_name.len() >= 16 {
            return Err(TunnelError::InvalidConfig(format!(
                "interface name {:?} must be 1-15 bytes",
                self.virtual_if_name
            )));
        }
        Ok(())
    }
}

/// A complete inner IP packet as read from the virtual interface.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InnerPacket(Vec<u8>);

impl InnerPacket {
    pub fn parse(bytes: Vec<u8>) -> Result<Self, PacketError> {
        inspect_ip(&bytes)?;
        Ok(Self(bytes))
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.0
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// A UDP datagram carrying one inner packet.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OuterDatagram {
    pub src: SocketAddr,
    pub dst: SocketAddr,
    pub payload: Vec<u8>,
}

impl OuterDatagram {
    pub fn overhead(&self) -> usize {
        if self.dst.is_ipv4() {
            IPV4_ENCAP_OVERHEAD
        } else {
            IPV6_ENCAP_OVERHEAD
        }
    }

    /// Size of the datagram on the wire, outer headers included.
    pub fn wire_len(&self) -> usize {
        self.payload.len() + self.overhead()
    }

    /// Serializes outer IP + UDP headers and payload. The UDP checksum is
    /// always computed.
    pub fn to_wire_bytes(&self) -> Vec<u8> {
        let builder = match (self.src.ip(), self.dst.ip()) {
            (IpAddr::V4(s), IpAddr::V4(d)) => PacketBuilder::ipv4(s.octets(), d.octets(), 64),
            (IpAddr::V6(s), IpAddr::V6(d)) => PacketBuilder::ipv6(s.octets(), d.octets(), 64),
            _ => unreachable!("mixed address families are rejected by TunnelConfig::validate"),
        }
        .udp(self.src.port(), self.dst.port());
        let mut out = Vec::with_capacity(self.wire_len());
        builder.write(&mut out, &self.payload).expect("writing to a Vec cannot fail");
        out
    }
}

/// TCP MSS for a tunneled flow whose native counterpart uses `native_mss`.
pub fn clamp_mss(native_mss: u16, overhead: u16) -> Result<u16, TunnelError> {
    if native_mss <= overhead {
        return Err(TunnelError::MssTooSmall { native: native_mss, overhead });
    }
    Ok(native_mss - overhead)
}

/// Outer (source, destination) UDP ports for an inner packet.
fn outer_ports(config: &TunnelConfig, inner: &[u8], summary: &IpSummary) -> (u16, u16) {
    if config.mirror_ports {
        if let Some(ports) = summary.ports(inner) {
            return ports;
        }
    }
    (config.udp_port, config.udp_port)
}

/// Wraps `inner` in a UDP datagram addressed to the configured peer.
pub fn encapsulate(inner: &[u8], config: &TunnelConfig) -> Result<OuterDatagram, TunnelError> {
    let summary = inspect_ip(inner)?;
    let max = config.virtual_mtu();
    if inner.len() > max {
        return Err(TunnelError::Oversize { len: inner.len(), max });
    }
    let (sport, dport) = outer_ports(config, inner, &summary);
    Ok(OuterDatagram {
        src: SocketAddr::new(config.local_addr, sport),
        dst: SocketAddr::new(config.peer_addr, dport),
        payload: inner.to_vec(),
    })
}

/// Why an inbound datagram was not forwarded.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DecapError {
    #[error("datagram from unexpected source {0}")]
    UnexpectedPeer(IpAddr),
    #[error("payload is not an IP packet: {0}")]
    Malformed(#[from] PacketError),
}

/// Unwraps an inbound datagram; the payload must come from the configured
/// peer and be a well-formed IP packet.
pub fn decapsulate(outer: &OuterDatagram, config: &TunnelConfig) -> Result<InnerPacket, DecapError> {
    if outer.src.ip() != config.peer_addr {
        return Err(DecapError::UnexpectedPeer(outer.src.ip()));
    }
    Ok(InnerPacket::parse(outer.payload.clone())?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cfg() -> TunnelConfig {
        TunnelConfig::new("192.0.2.1".parse().unwrap(), "192.0.2.2".parse().unwrap(), 12345)
    }

    fn tcp_packet(payload_len: usize) -> Vec<u8> {
        let b = PacketBuilder::ipv4([10, 77, 0, 1], [10, 77, 0, 2], 64).tcp(40001, 443, 1, 1000).ack(5);
        let mut out = Vec::new();
        b.write(&mut out, &vec![0xab; payload_len]).unwrap();
        out
    }

    #[test]
    fn hundred_byte_inner_is_128_on_wire() {
        let inner = tcp_packet(60);
        assert_eq!(inner.len(), 100);
        let d = encapsulate(&inner, &cfg()).unwrap();
        assert_eq!(d.payload.len(), 100);
        assert_eq!(d.wire_len(), 128);
        assert_eq!(d.to_wire_bytes().len(), 128);
        assert_eq!(d.dst, "192.0.2.2:12345".parse().unwrap());
    }

    #[test]
    fn empty_inner_rejected() {
        assert!(matches!(encapsulate(&[], &cfg()), Err(TunnelError::Malformed(PacketError::Empty))));
    }

    #[test]
    fn boundary_inner_fills_interface_mtu() {
        let c = cfg();
        let inner = tcp_packet(c.interface_mtu - 28 - 40);
        assert_eq!(inner.len(), 1472);
        let d = encapsulate(&inner, &c).unwrap();
        assert_eq!(d.wire_len(), c.interface_mtu);
        let too_big = tcp_packet(c.interface_mtu - 28 - 40 + 1);
        assert!(matches!(encapsulate(&too_big, &c), Err(TunnelError::Oversize { len: 1473, max: 1472 })));
    }

    #[test]
    fn clamp_examples() {
        assert_eq!(clamp_mss(1460, 28).unwrap(), 1432);
        assert_eq!(clamp_mss(536, 28).unwrap(), 508);
        assert!(clamp_mss(28, 28).is_err());
        assert_eq!(cfg().clamped_mss(), 1432);
    }

    #[test]
    fn config_validation() {
        let mut c = cfg();
        c.udp_port = 0;
        assert!(matches!(c.validate(), Err(TunnelError::InvalidPort)));
        let mut c = cfg();
        c.interface_mtu = 60;
        assert!(c.validate().is_err());
        let mut c = cfg();
        c.virtual_if_name = "x".repeat(16);
        assert!(c.validate().is_err());
        assert!(cfg().validate().is_ok());
    }

    #[test]
    fn ipv6_outer_overhead() {
        let mut c = cfg();
        c.local_addr = "2001:db8::1".parse().unwrap();
        c.peer_addr = "2001:db8::2".parse().unwrap();
        assert_eq!(c.encap_overhead(), 48);
        let d = encapsulate(&tcp_packet(60), &c).unwrap();
        assert_eq!(d.wire_len(), 148);
        assert_eq!(d.to_wire_bytes().len(), 148);
    }

    #[test]
    fn decap_rejects_garbage_and_strangers() {
        let c = cfg();
        let mut d = encapsulate(&tcp_packet(10), &c).unwrap();
        // Flip direction: the datagram arrives from the peer.
        std::mem::swap(&mut d.src, &mut d.dst);
        assert!(decapsulate(&d, &c).is_ok());
        let mut bad = d.clone();
        bad.payload = b"definitely not ip".to_vec();
        assert!(matches!(decapsulate(&bad, &c), Err(DecapError::Malformed(_))));
        let mut stranger = d;
        stranger.src = "198.51.100.7:12345".parse().unwrap();
        assert!(matches!(decapsulate(&stranger, &c), Err(DecapError::UnexpectedPeer(_))));
    }

    #[test]
    fn mirrored_ports_follow_inner_tuple() {
        let mut c = cfg();
        c.mirror_ports = true;
        let d = encapsulate(&tcp_packet(10), &c).unwrap();
        assert_eq!(d.src.port(), 40001);
        assert_eq!(d.dst.port(), 443);
    }

    proptest! {
        #[test]
        fn outer_checksum_is_never_zero_and_valid(len in 0usize..1400) {
            let d = encapsulate(&tcp_packet(len), &cfg()).unwrap();
            let wire = d.to_wire_bytes();
            let sliced = etherparse::SlicedPacket::from_ip(&wire).unwrap();
            match sliced.transport {
                Some(etherparse::TransportSlice::Udp(u)) => {
                    prop_assert_ne!(u.checksum(), 0);
                    let ip = etherparse::Ipv4HeaderSlice::from_slice(&wire).unwrap();
                    let expected = u.to_header()
                        .calc_checksum_ipv4_raw(ip.source(), ip.destination(), u.payload())
                        .unwrap();
                    prop_assert_eq!(u.checksum(), expected);
                }
                _ => prop_assert!(false, "not udp"),
            }
        }
    }
}

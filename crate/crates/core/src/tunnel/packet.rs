//! Minimal inner-packet inspection: IP validation, transport tuple
//! extraction and the SYN MSS rewrite applied by the tunnel.

use std::net::{IpAddr, Ipv4Addr, Ipv6Addr};

use etherparse::{IpNumber, Ipv4HeaderSlice, Ipv6HeaderSlice};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PacketError {
    #[error("empty packet")]
    Empty,
    #[error("unsupported IP version {0}")]
    BadVersion(u8),
    #[error("truncated or malformed IP header: {0}")]
    BadHeader(String),
    #[error("IP length field says {declared} bytes but packet has {actual}")]
    LengthMismatch { declared: usize, actual: usize },
}

/// What the tunnel needs to know about an inner IP packet.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IpSummary {
    pub version: u8,
    pub src: IpAddr,
    pub dst: IpAddr,
    pub protocol: u8,
    /// Offset of the transport header.
    pub header_len: usize,
}

impl IpSummary {
    /// Source and destination ports for TCP or UDP payloads.
    pub fn ports(&self, packet: &[u8]) -> Option<(u16, u16)> {
        if self.protocol != IpNumber::TCP.0 && self.protocol != IpNumber::UDP.0 {
            return None;
        }
        let t = packet.get(self.header_len..self.header_len + 4)?;
        Some((u16::from_be_bytes([t[0], t[1]]), u16::from_be_bytes([t[2], t[3]])))
    }
}

/// Checks that `packet` is a complete IPv4 or IPv6 packet whose length
/// field agrees with the buffer length.
pub fn inspect_ip(packet: &[u8]) -> Result<IpSummary, PacketError> {
    let first = *packet.first().ok_or(PacketError::Empty)?;
    match first >> 4 {
        4 => {
            let h = Ipv4HeaderSlice::from_slice(packet).map_err(|e| PacketError::BadHeader(e.to_string()))?;
            let declared = h.total_len() as usize;
            if declared != packet.len() {
                return Err(PacketError::LengthMismatch { declared, actual: packet.len() });
            }
            Ok(IpSummary {
                version: 4,
                src: IpAddr::V4(Ipv4Addr::from(h.source())),
                dst: IpAddr::V4(Ipv4Addr::from(h.destination())),
                protocol: h.protocol().0,
                header_len: h.slice().len(),
            })
        }
        6 => {
            let h = Ipv6HeaderSlice::from_slice(packet).map_err(|e| PacketError::BadHeader(e.to_string()))?;
            let declared = 40 + h.payload_length() as usize;
            if declared != packet.len() {
                return Err(PacketError::LengthMismatch { declared, actual: packet.len() });
            }
            Ok(IpSummary {
                version: 6,
                src: IpAddr::V6(Ipv6Addr::from(h.source())),
                dst: IpAddr::V6(Ipv6Addr::from(h.destination())),
                protocol: h.next_header().0,
                header_len: 40,
            })
        }
        v => Err(PacketError::BadVersion(v)),
    }
}

const TCP_FLAG_SYN: u8 = 0x02;
const TCP_OPT_END: u8 = 0;
const TCP_OPT_NOP: u8 = 1;
const TCP_OPT_MSS: u8 = 2;

/// One's-complement incremental checksum update for a single 16-bit word.
fn checksum_adjust(checksum: u16, old: u16, new: u16) -> u16 {
    let mut sum = u32::from(!checksum) + u32::from(!old) + u32::from(new);
    while sum > 0xffff {
        sum = (sum & 0xffff) + (sum >> 16);
    }
    !(sum as u16)
}

/// Lowers the MSS option of a TCP SYN (or SYN+ACK) to `max_mss` when it is
/// larger, fixing the TCP checksum incrementally. Returns the previous MSS
/// value when a rewrite happened.
///
/// Non-TCP packets, non-SYN segments and SYNs without an MSS option are left
/// untouched.
pub fn rewrite_syn_mss(packet: &mut [u8], max_mss: u16) -> Result<Option<u16>, PacketError> {
    let ip = inspect_ip(packet)?;
    if ip.protocol != IpNumber::TCP.0 {
        return Ok(None);
    }
    let tcp_start = ip.header_len;
    if packet.len() < tcp_start + 20 {
        return Err(PacketError::BadHeader("truncated TCP header".into()));
    }
    if packet[tcp_start + 13] & TCP_FLAG_SYN == 0 {
        return Ok(None);
    }
    let data_offset = usize::from(packet[tcp_start + 12] >> 4) * 4;
    if data_offset < 20 || packet.len() < tcp_start + data_offset {
        return Err(PacketError::BadHeader("bad TCP data offset".into()));
    }
    let opts = tcp_start + 20..tcp_start + data_offset;
    let mut i = opts.start;
    while i < opts.end {
        match packet[i] {
            TCP_OPT_END => break,
            TCP_OPT_NOP => i += 1,
            kind => {
                let len = *packet.get(i + 1).unwrap_or(&0) as usize;
                if len < 2 || i + len > opts.end {
                    return Err(PacketError::BadHeader("bad TCP option length".into()));
                }
                if kind == TCP_OPT_MSS && len == 4 {
                    let old = u16::from_be_bytes([packet[i + 2], packet[i + 3]]);
                    if old <= max_mss {
                        return Ok(None);
                    }
                    packet[i + 2..i + 4].copy_from_slice(&max_mss.to_be_bytes());
                    let csum_at = tcp_start + 16;
                    let checksum = u16::from_be_bytes([packet[csum_at], packet[csum_at + 1]]);
                    let new_checksum = if (i + 2 - tcp_start) % 2 == 0 {
                        checksum_adjust(checksum, old, max_mss)
                    } else {
                        // MSS value straddles two checksum words.
                        let [old_a, old_b] = old.to_be_bytes();
                        let old_hi = u16::from_be_bytes([packet[i + 1], old_a]);
                        let new_hi = u16::from_be_bytes([packet[i + 1], packet[i + 2]]);
                        let old_lo = u16::from_be_bytes([old_b, packet[i + 4]]);
                        let new_lo = u16::from_be_bytes([packet[i + 3], packet[i + 4]]);
                        checksum_adjust(checksum_adjust(checksum, old_hi, new_hi), old_lo, new_lo)
                    };
                    packet[csum_at..csum_at + 2].copy_from_slice(&new_checksum.to_be_bytes());
                    return Ok(Some(old));
                }
                i += len;
            }
        }
    }
    Ok(None)
}

/// Reads the MSS option of a TCP SYN, if any.
pub fn syn_mss(packet: &[u8]) -> Option<u16> {
    let ip = inspect_ip(packet).ok()?;
    if ip.protocol != IpNumber::TCP.0 {
        return None;
    }
    let (tcp, _) = etherparse::TcpHeader::from_slice(packet.get(ip.header_len..)?).ok()?;
    if !tcp.syn {
        return None;
    }
    tcp.options_iterator().find_map(|o| match o {
        Ok(etherparse::TcpOptionElement::MaximumSegmentSize(m)) => Some(m),
        _ => None,
    })
}

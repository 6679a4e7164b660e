//! Minimal pcap (raw IP link type) reading and writing, and conversion of
//! captured TCP packets into [`PacketRecord`]s.

use std::io::{self, Read, Write};
use std::net::IpAddr;

use etherparse::{NetSlice, SlicedPacket, TransportSlice};

use super::{CaptureDirection, PacketRecord, TcpFlags};

const MAGIC_US: u32 = 0xa1b2_c3d4;
const LINKTYPE_RAW: u32 = 101;
const SNAPLEN: u32 = 65_535;

/// One captured packet: timestamp and IP bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CapturedPacket {
    pub ts_us: u64,
    pub data: Vec<u8>,
}

pub struct PcapWriter<W: Write> {
    out: W,
}

impl<W: Write> PcapWriter<W> {
    pub fn new(mut out: W) -> io::Result<Self> {
        let mut header = Vec::with_capacity(24);
        header.extend_from_slice(&MAGIC_US.to_le_bytes());
        header.extend_from_slice(&2u16.to_le_bytes());
        header.extend_from_slice(&4u16.to_le_bytes());
        header.extend_from_slice(&0i32.to_le_bytes());
        header.extend_from_slice(&0u32.to_le_bytes());
        header.extend_from_slice(&SNAPLEN.to_le_bytes());
        header.extend_from_slice(&LINKTYPE_RAW.to_le_bytes());
        out.write_all(&header)?;
        Ok(Self { out })
    }

    pub fn write_packet(&mut self, ts_us: u64, data: &[u8]) -> io::Result<()> {
        let caplen = data.len().min(SNAPLEN as usize);
        let mut rec = Vec::with_capacity(16 + caplen);
        rec.extend_from_slice(&((ts_us / 1_000_000) as u32).to_le_bytes());
        rec.extend_from_slice(&((ts_us % 1_000_000) as u32).to_le_bytes());
        rec.extend_from_slice(&(caplen as u32).to_le_bytes());
        rec.extend_from_slice(&(data.len() as u32).to_le_bytes());
        rec.extend_from_slice(&data[..caplen]);
        self.out.write_all(&rec)
    }

    pub fn into_inner(mut self) -> io::Result<W> {
        self.out.flush()?;
        Ok(self.out)
    }
}

/// Reads a whole raw-IP pcap stream. Both byte orders are accepted.
pub fn read_pcap<R: Read>(mut input: R) -> io::Result<Vec<CapturedPacket>> {
    let mut buf = Vec::new();
    input.read_to_end(&mut buf)?;
    let bad = |msg: &str| io::Error::new(io::ErrorKind::InvalidData, msg.to_string());
    if buf.len() < 24 {
        return Err(bad("truncated pcap header"));
    }
    let swapped = match u32::from_le_bytes(buf[0..4].try_into().unwrap()) {
        MAGIC_US => false,
        m if m.swap_bytes() == MAGIC_US => true,
        _ => return Err(bad("not a microsecond pcap file")),
    };
    let u32_at = |b: &[u8], at: usize| {
        let v = u32::from_le_bytes(b[at..at + 4].try_into().unwrap());
        if swapped {
            v.swap_bytes()
        } else {
            v
        }
    };
    if u32_at(&buf, 20) != LINKTYPE_RAW {
        return Err(bad("unsupported link type (expected raw IP)"));
    }
    let mut packets = Vec::new();
    let mut at = 24;
    while at < buf.len() {
        if buf.len() - at < 16 {
            return Err(bad("truncated record header"));
        }
        let ts_us = u64::from(u32_at(&buf, at)) * 1_000_000 + u64::from(u32_at(&buf, at + 4));
        let caplen = u32_at(&buf, at + 8) as usize;
        at += 16;
        if buf.len() - at < caplen {
            return Err(bad("truncated record"));
        }
        packets.push(CapturedPacket { ts_us, data: buf[at..at + caplen].to_vec() });
        at += caplen;
    }
    Ok(packets)
}

/// TCP packets of one connection as seen by `local`. Packets are selected
/// by `local_port` on the local side; everything else is ignored.
pub fn tcp_records(packets: &[CapturedPacket], local: IpAddr, local_port: u16) -> Vec<PacketRecord> {
    packets
        .iter()
        .filter_map(|p| {
            let sliced = SlicedPacket::from_ip(&p.data).ok()?;
            let (src, dst) = match sliced.net? {
                NetSlice::Ipv4(v4) => {
                    (IpAddr::V4(v4.header().source_addr()), IpAddr::V4(v4.header().destination_addr()))
                }
                NetSlice::Ipv6(v6) => {
                    (IpAddr::V6(v6.header().source_addr()), IpAddr::V6(v6.header().destination_addr()))
                }
                _ => return None,
            };
            let TransportSlice::Tcp(tcp) = sliced.transport? else {
                return None;
            };
            let direction = if src == local && tcp.source_port() == local_port {
                CaptureDirection::Sent
            } else if dst == local && tcp.destination_port() == local_port {
                CaptureDirection::Received
            } else {
                return None;
            };
            let flags = u8::from(tcp.fin())
                | u8::from(tcp.syn()) << 1
                | u8::from(tcp.rst()) << 2
                | u8::from(tcp.psh()) << 3
                | u8::from(tcp.ack()) << 4;
            Some(PacketRecord {
                ts_us: p.ts_us,
                direction,
                seq: tcp.sequence_number(),
                payload_len: tcp.payload().len() as u32,
                flags: TcpFlags(flags),
            })
        })
        .collect()
}

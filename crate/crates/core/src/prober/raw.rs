//! Live transport over raw IPv4 sockets: one header-including socket for
//! sending, raw ICMP and TCP sockets for listening.

use std::io::{self, Read};
use std::net::{IpAddr, Ipv4Addr, SocketAddr};
use std::os::fd::AsRawFd;
use std::time::{Duration, Instant};

use socket2::{Domain, Protocol, SockAddr, Socket, Type};

use super::{ProbeTransport, ProberError};

const IPPROTO_RAW: i32 = 255;

pub struct RawTransport {
    sender: Socket,
    listeners: [Socket; 2],
    last_send: Instant,
    buf: Vec<u8>,
}

fn raw_socket(protocol: i32) -> Result<Socket, ProberError> {
    Socket::new(Domain::IPV4, Type::RAW, Some(Protocol::from(protocol))).map_err(|e| {
        if e.kind() == io::ErrorKind::PermissionDenied {
            ProberError::Privilege(e.to_string())
        } else {
            ProberError::Io(e)
        }
    })
}

impl RawTransport {
    /// Fails with [`ProberError::Privilege`] when raw sockets are not
    /// permitted.
    pub fn open() -> Result<Self, ProberError> {
        let sender = raw_socket(IPPROTO_RAW)?;
        let listeners = [raw_socket(libc::IPPROTO_ICMP)?, raw_socket(libc::IPPROTO_TCP)?];
        Ok(Self { sender, listeners, last_send: Instant::now(), buf: vec![0; 65_536] })
    }
}

impl ProbeTransport for RawTransport {
    fn send(&mut self, packet: &[u8]) -> io::Result<()> {
        if packet.len() < 20 {
            return Err(io::Error::new(io::ErrorKind::InvalidInput, "short IPv4 packet"));
        }
        let dst = Ipv4Addr::new(packet[16], packet[17], packet[18], packet[19]);
        self.sender.send_to(packet, &SockAddr::from(SocketAddr::new(IpAddr::V4(dst), 0)))?;
        self.last_send = Instant::now();
        Ok(())
    }

    fn recv(&mut self, wait: Duration) -> io::Result<Option<(Vec<u8>, Duration)>> {
        let deadline = self.last_send + wait;
        loop {
            let remaining = deadline.saturating_duration_since(Instant::now());
            if remaining.is_zero() {
                return Ok(None);
            }
            let mut fds =
                self.listeners.each_ref().map(|s| libc::pollfd { fd: s.as_raw_fd(), events: libc::POLLIN, revents: 0 });
            let ms = remaining.as_millis().clamp(1, i32::MAX as u128) as i32;
            // SAFETY: `fds` is a live array of two initialized pollfd structs.
            let n = unsafe { libc::poll(fds.as_mut_ptr(), fds.len() as libc::nfds_t, ms) };
            if n < 0 {
                let e = io::Error::last_os_error();
                if e.kind() == io::ErrorKind::Interrupted {
                    continue;
                }
                return Err(e);
            }
            for (fd, sock) in fds.iter().zip(&self.listeners) {
                if fd.revents & libc::POLLIN != 0 {
                    let len = (&*sock).read(&mut self.buf)?;
                    return Ok(Some((self.buf[..len].to_vec(), self.last_send.elapsed())));
                }
            }
        }
    }
}

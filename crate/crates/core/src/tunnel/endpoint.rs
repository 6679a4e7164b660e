//! The forwarding loop between a virtual interface and the tunnel socket(s).
//!
//! A single thread multiplexes the interface and every bound UDP socket with
//! `poll(2)`. Order is preserved within a direction; the two directions are
//! independent. Shutdown and counter snapshots go through [`EndpointHandle`].

use std::collections::BTreeMap;
use std::io;
use std::net::{SocketAddr, UdpSocket};
use std::os::fd::{AsRawFd, RawFd};
use std::os::unix::net::UnixDatagram;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::packet::rewrite_syn_mss;
use super::{decapsulate, encapsulate, DecapError, OuterDatagram, TunnelConfig, TunnelError};

const POLL_INTERVAL: Duration = Duration::from_millis(50);
const MAX_BATCH: usize = 64;
const BUF_LEN: usize = 65_536;

/// A packet-oriented layer-3 device (a tun interface or a test double).
/// Implementations must be non-blocking.
pub trait VirtualInterface: AsRawFd + Send {
    fn read_packet(&self, buf: &mut [u8]) -> io::Result<usize>;
    fn write_packet(&self, packet: &[u8]) -> io::Result<usize>;
}

/// A non-blocking datagram socket carrying outer packets.
pub trait TunnelSocket: AsRawFd + Send {
    fn recv_from(&self, buf: &mut [u8]) -> io::Result<(usize, SocketAddr)>;
    fn send_to(&self, buf: &[u8], to: SocketAddr) -> io::Result<usize>;
    fn local_addr(&self) -> io::Result<SocketAddr>;
}

impl TunnelSocket for UdpSocket {
    fn recv_from(&self, buf: &mut [u8]) -> io::Result<(usize, SocketAddr)> {
        UdpSocket::recv_from(self, buf)
    }

    fn send_to(&self, buf: &[u8], to: SocketAddr) -> io::Result<usize> {
        UdpSocket::send_to(self, buf, to)
    }

    fn local_addr(&self) -> io::Result<SocketAddr> {
        UdpSocket::local_addr(self)
    }
}

/// Binds a new outer socket on demand (port mirroring).
pub type SocketBinder = Box<dyn Fn(SocketAddr) -> io::Result<Box<dyn TunnelSocket>> + Send>;

pub fn bind_udp(addr: SocketAddr) -> io::Result<Box<dyn TunnelSocket>> {
    let s = UdpSocket::bind(addr)?;
    s.set_nonblocking(true)?;
    Ok(Box::new(s))
}

/// In-memory virtual interface: one end of a datagram socketpair. The other
/// end, [`MemoryInterfaceHost`], plays the role of the kernel stack.
pub struct MemoryInterface(UnixDatagram);

pub struct MemoryInterfaceHost(UnixDatagram);

impl MemoryInterface {
    pub fn pair() -> io::Result<(MemoryInterface, MemoryInterfaceHost)> {
        let (a, b) = UnixDatagram::pair()?;
        a.set_nonblocking(true)?;
        Ok((MemoryInterface(a), MemoryInterfaceHost(b)))
    }
}

impl AsRawFd for MemoryInterface {
    fn as_raw_fd(&self) -> RawFd {
        self.0.as_raw_fd()
    }
}

impl VirtualInterface for MemoryInterface {
    fn read_packet(&self, buf: &mut [u8]) -> io::Result<usize> {
        self.0.recv(buf)
    }

    fn write_packet(&self, packet: &[u8]) -> io::Result<usize> {
        self.0.send(packet).map_err(|e| match e.raw_os_error() {
            // The host end is gone: report it like a removed device.
            Some(libc::ECONNREFUSED) | Some(libc::EPIPE) | Some(libc::ENOTCONN) => {
                io::Error::from_raw_os_error(libc::ENODEV)
            }
            _ => e,
        })
    }
}

impl MemoryInterfaceHost {
    /// Injects a packet as if the local stack had routed it into the tunnel.
    pub fn inject(&self, packet: &[u8]) -> io::Result<()> {
        self.0.send(packet).map(|_| ())
    }

    /// Waits up to `timeout` for a packet the tunnel delivered.
    pub fn receive(&self, timeout: Duration) -> io::Result<Option<Vec<u8>>> {
        self.0.set_read_timeout(Some(timeout))?;
        let mut buf = vec![0u8; BUF_LEN];
        match self.0.recv(&mut buf) {
            Ok(n) => {
                buf.truncate(n);
                Ok(Some(buf))
            }
            Err(e) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => Ok(None),
            Err(e) => Err(e),
        }
    }
}

#[derive(Debug, Default)]
struct DirectionCounters {
    packets_in: AtomicU64,
    bytes_in: AtomicU64,
    forwarded: AtomicU64,
    bytes_forwarded: AtomicU64,
    dropped: AtomicU64,
    malformed: AtomicU64,
    spoofed: AtomicU64,
    oversize: AtomicU64,
    io_errors: AtomicU64,
    mss_rewrites: AtomicU64,
}

/// Point-in-time copy of one direction's counters.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DirectionSnapshot {
    pub packets_in: u64,
    pub bytes_in: u64,
    pub forwarded: u64,
    pub bytes_forwarded: u64,
    pub dropped: u64,
    pub malformed: u64,
    pub spoofed: u64,
    pub oversize: u64,
    pub io_errors: u64,
    pub mss_rewrites: u64,
}

impl DirectionCounters {
    fn snapshot(&self) -> DirectionSnapshot {
        // Outcome counters are read before packets_in so a live snapshot
        // never shows more forwarded than read.
        let forwarded = self.forwarded.load(Ordering::Acquire);
        let dropped = self.dropped.load(Ordering::Acquire);
        let bytes_forwarded = self.bytes_forwarded.load(Ordering::Acquire);
        DirectionSnapshot {
            forwarded,
            dropped,
            bytes_forwarded,
            malformed: self.malformed.load(Ordering::Acquire),
            spoofed: self.spoofed.load(Ordering::Acquire),
            oversize: self.oversize.load(Ordering::Acquire),
            io_errors: self.io_errors.load(Ordering::Acquire),
            mss_rewrites: self.mss_rewrites.load(Ordering::Acquire),
            packets_in: self.packets_in.load(Ordering::Acquire),
            bytes_in: self.bytes_in.load(Ordering::Acquire),
        }
    }

    fn read(&self, len: usize) {
        self.packets_in.fetch_add(1, Ordering::AcqRel);
        self.bytes_in.fetch_add(len as u64, Ordering::AcqRel);
    }

    fn forwarded(&self, len: usize) {
        self.bytes_forwarded.fetch_add(len as u64, Ordering::AcqRel);
        self.forwarded.fetch_add(1, Ordering::AcqRel);
    }

    fn drop_with(&self, reason: &AtomicU64) {
        reason.fetch_add(1, Ordering::AcqRel);
        self.dropped.fetch_add(1, Ordering::AcqRel);
    }
}

/// Counters for both directions. `outbound` is interface → socket.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CounterSnapshot {
    pub outbound: DirectionSnapshot,
    pub inbound: DirectionSnapshot,
    /// Receive errors on sockets or the interface that did not yield a packet.
    pub recv_errors: u64,
}

#[derive(Debug, Default)]
struct Counters {
    outbound: DirectionCounters,
    inbound: DirectionCounters,
    recv_errors: AtomicU64,
}

/// Control surface of a running endpoint, usable from other threads.
#[derive(Clone, Debug)]
pub struct EndpointHandle {
    counters: Arc<Counters>,
    shutdown: Arc<AtomicBool>,
}

impl EndpointHandle {
    pub fn shutdown(&self) {
        self.shutdown.store(true, Ordering::Release);
    }

    pub fn is_shutdown(&self) -> bool {
        self.shutdown.load(Ordering::Acquire)
    }

    pub fn snapshot(&self) -> CounterSnapshot {
        CounterSnapshot {
            outbound: self.counters.outbound.snapshot(),
            inbound: self.counters.inbound.snapshot(),
            recv_errors: self.counters.recv_errors.load(Ordering::Acquire),
        }
    }

    /// Exposes the shutdown flag, e.g. for signal registration.
    pub fn shutdown_flag(&self) -> Arc<AtomicBool> {
        Arc::clone(&self.shutdown)
    }
}

pub struct TunnelEndpoint {
    config: TunnelConfig,
    iface: Box<dyn VirtualInterface>,
    sockets: BTreeMap<u16, Box<dyn TunnelSocket>>,
    binder: SocketBinder,
    handle: EndpointHandle,
}

fn map_bind_error(addr: SocketAddr, e: io::Error) -> TunnelError {
    if e.kind() == io::ErrorKind::AddrInUse {
        TunnelError::PortInUse(addr)
    } else {
        TunnelError::Io(e)
    }
}

/// Creates the tun interface and binds the tunnel socket.
#[cfg(target_os = "linux")]
pub fn create_endpoint(config: TunnelConfig) -> Result<TunnelEndpoint, TunnelError> {
    config.validate()?;
    let addr = SocketAddr::new(config.local_addr, config.udp_port);
    // Bind first so a busy port does not leave a dangling interface.
    let socket = bind_udp(addr).map_err(|e| map_bind_error(addr, e))?;
    let tun = super::tun::TunDevice::create(&config)?;
    TunnelEndpoint::from_parts(config, Box::new(tun), vec![socket], Box::new(bind_udp))
}

impl TunnelEndpoint {
    /// Assembles an endpoint from an existing interface and sockets.
    pub fn from_parts(
        config: TunnelConfig,
        iface: Box<dyn VirtualInterface>,
        sockets: Vec<Box<dyn TunnelSocket>>,
        binder: SocketBinder,
    ) -> Result<Self, TunnelError> {
        config.validate()?;
        let mut by_port = BTreeMap::new();
        for s in sockets {
            let port = local_port(s.as_ref())?;
            by_port.insert(port, s);
        }
        Ok(Self {
            config,
            iface,
            sockets: by_port,
            binder,
            handle: EndpointHandle { counters: Arc::default(), shutdown: Arc::default() },
        })
    }

    pub fn config(&self) -> &TunnelConfig {
        &self.config
    }

    pub fn handle(&self) -> EndpointHandle {
        self.handle.clone()
    }

    /// Binds an additional outer port, e.g. one per served campaign port.
    pub fn bind_port(&mut self, port: u16) -> Result<(), TunnelError> {
        if port == 0 {
            return Err(TunnelError::InvalidPort);
        }
        if self.sockets.contains_key(&port) {
            return Ok(());
        }
        let addr = SocketAddr::new(self.config.local_addr, port);
        let s = (self.binder)(addr).map_err(|e| map_bind_error(addr, e))?;
        self.sockets.insert(port, s);
        Ok(())
    }

    /// Forwards in both directions until shutdown is requested. Returns the
    /// final counters; fails only when the virtual interface disappears.
    pub fn run_datapath(&mut self) -> Result<CounterSnapshot, TunnelError> {
        let mut buf = vec![0u8; BUF_LEN];
        while !self.handle.is_shutdown() {
            let ports: Vec<u16> = self.sockets.keys().copied().collect();
            let mut fds: Vec<libc::pollfd> = std::iter::once(self.iface.as_raw_fd())
                .chain(ports.iter().map(|p| self.sockets[p].as_raw_fd()))
                .map(|fd| libc::pollfd { fd, events: libc::POLLIN, revents: 0 })
                .collect();
            // SAFETY: fds is a valid array of pollfd for the duration of the call.
            let n = unsafe {
                libc::poll(fds.as_mut_ptr(), fds.len() as libc::nfds_t, POLL_INTERVAL.as_millis() as libc::c_int)
            };
            if n < 0 {
                let e = io::Error::last_os_error();
                if e.kind() == io::ErrorKind::Interrupted {
                    continue;
                }
                return Err(TunnelError::Io(e));
            }
            if n == 0 {
                continue;
            }
            let iface_events = fds[0].revents;
            if iface_events & (libc::POLLERR | libc::POLLNVAL | libc::POLLHUP) != 0 && iface_events & libc::POLLIN == 0
            {
                return Err(TunnelError::InterfaceGone(io::Error::other(
                    "virtual interface reported an error condition",
                )));
            }
            if iface_events & libc::POLLIN != 0 {
                self.drain_interface(&mut buf)?;
            }
            for (i, port) in ports.iter().enumerate() {
                if fds[i + 1].revents & (libc::POLLIN | libc::POLLERR) != 0 {
                    self.drain_socket(*port, &mut buf)?;
                }
            }
        }
        Ok(self.handle.snapshot())
    }

    fn drain_interface(&mut self, buf: &mut [u8]) -> Result<(), TunnelError> {
        let counters = Arc::clone(&self.handle.counters);
        let out = &counters.outbound;
        for _ in 0..MAX_BATCH {
            let n = match self.iface.read_packet(buf) {
                Ok(n) => n,
                Err(e) if e.kind() == io::ErrorKind::WouldBlock => return Ok(()),
                Err(e) if e.kind() == io::ErrorKind::Interrupted => continue,
                Err(e) if interface_gone(&e) => return Err(TunnelError::InterfaceGone(e)),
                Err(_) => {
                    counters.recv_errors.fetch_add(1, Ordering::AcqRel);
                    continue;
                }
            };
            out.read(n);
            let packet = &mut buf[..n];
            match rewrite_syn_mss(packet, self.config.clamped_mss()) {
                Ok(Some(_)) => {
                    out.mss_rewrites.fetch_add(1, Ordering::AcqRel);
                }
                Ok(None) => {}
                Err(_) => {
                    out.drop_with(&out.malformed);
                    continue;
                }
            }
            let datagram = match encapsulate(packet, &self.config) {
                Ok(d) => d,
                Err(TunnelError::Oversize { .. }) => {
                    out.drop_with(&out.oversize);
                    continue;
                }
                Err(_) => {
                    out.drop_with(&out.malformed);
                    continue;
                }
            };
            let port = datagram.src.port();
            if !self.sockets.contains_key(&port) && self.bind_port(port).is_err() {
                out.drop_with(&out.io_errors);
                continue;
            }
            match self.sockets[&port].send_to(&datagram.payload, datagram.dst) {
                Ok(_) => out.forwarded(n),
                Err(e) if e.kind() == io::ErrorKind::Interrupted => out.drop_with(&out.io_errors),
                Err(_) => out.drop_with(&out.io_errors),
            }
        }
        Ok(())
    }

    fn drain_socket(&mut self, port: u16, buf: &mut [u8]) -> Result<(), TunnelError> {
        let counters = Arc::clone(&self.handle.counters);
        let inb = &counters.inbound;
        let local = SocketAddr::new(self.config.local_addr, port);
        for _ in 0..MAX_BATCH {
            let (n, from) = match self.sockets[&port].recv_from(buf) {
                Ok(r) => r,
                Err(e) if e.kind() == io::ErrorKind::WouldBlock => return Ok(()),
                Err(e) if e.kind() == io::ErrorKind::Interrupted => continue,
                Err(_) => {
                    // ICMP errors surface here as ECONNREFUSED and friends.
                    counters.recv_errors.fetch_add(1, Ordering::AcqRel);
                    return Ok(());
                }
            };
            inb.read(n);
            let outer = OuterDatagram { src: from, dst: local, payload: buf[..n].to_vec() };
            let mut inner = match decapsulate(&outer, &self.config) {
                Ok(p) => p.into_bytes(),
                Err(DecapError::UnexpectedPeer(_)) => {
                    inb.drop_with(&inb.spoofed);
                    continue;
                }
                Err(DecapError::Malformed(_)) => {
                    inb.drop_with(&inb.malformed);
                    continue;
                }
            };
            if inner.len() > self.config.virtual_mtu() {
                inb.drop_with(&inb.oversize);
                continue;
            }
            if let Ok(Some(_)) = rewrite_syn_mss(&mut inner, self.config.clamped_mss()) {
                inb.mss_rewrites.fetch_add(1, Ordering::AcqRel);
            }
            match self.iface.write_packet(&inner) {
                Ok(_) => inb.forwarded(n),
                Err(e) if interface_gone(&e) => return Err(TunnelError::InterfaceGone(e)),
                Err(_) => inb.drop_with(&inb.io_errors),
            }
        }
        Ok(())
    }
}

fn local_port(s: &dyn TunnelSocket) -> Result<u16, TunnelError> {
    Ok(s.local_addr()?.port())
}

fn interface_gone(e: &io::Error) -> bool {
    matches!(e.raw_os_error(), Some(libc::ENODEV) | Some(libc::EBADFD) | Some(libc::EBADF) | Some(libc::ENXIO))
}

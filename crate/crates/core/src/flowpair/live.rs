//! Live client: runs the native flow over the host's regular route and the
//! tunneled flow through a tunnel endpoint, from the same source port.
//!
//! The host stack cannot hold two connections with one 4-tuple, so the
//! tunneled flow's inner addresses are the virtual interface pair. With port
//! mirroring its outer UDP 4-tuple matches the native flow's TCP 4-tuple.

use std::io;
use std::net::{IpAddr, SocketAddr, TcpStream, UdpSocket};
use std::thread;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use socket2::{Domain, Protocol, SockAddr, Socket, Type};

use super::race::{HandshakeRacer, Transport};
use super::server::fetch;
use super::{FailureReason, FlowPairError, FlowResult, FlowSpec, PairDriver, PairOutcome, PairTimestamps};
use crate::tunnel::{create_endpoint, EndpointHandle, TunnelConfig};

const SOURCE_PORT_TRIES: usize = 16;

struct RunningTunnel {
    handle: EndpointHandle,
    thread: thread::JoinHandle<()>,
}

pub struct LiveDriver {
    /// Template for the per-destination tunnel; `peer_addr` is replaced.
    pub tunnel: TunnelConfig,
    pub connect_timeout: Duration,
    pub stall_timeout: Duration,
    destination: Option<IpAddr>,
    running: Option<RunningTunnel>,
}

impl LiveDriver {
    pub fn new(tunnel: TunnelConfig, connect_timeout: Duration, stall_timeout: Duration) -> Self {
        Self { tunnel, connect_timeout, stall_timeout, destination: None, running: None }
    }

    fn stop_tunnel(&mut self) {
        if let Some(t) = self.running.take() {
            t.handle.shutdown();
            let _ = t.thread.join();
        }
    }
}

impl Drop for LiveDriver {
    fn drop(&mut self) {
        self.stop_tunnel();
    }
}

/// Source address the routing table picks toward `dest`.
pub fn route_source(dest: IpAddr) -> io::Result<IpAddr> {
    let any: SocketAddr = if dest.is_ipv4() { "0.0.0.0:0" } else { "[::]:0" }.parse().unwrap();
    let s = UdpSocket::bind(any)?;
    s.connect((dest, 9))?;
    Ok(s.local_addr()?.ip())
}

fn unix_now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or_default()
}

fn tcp_socket(bind: SocketAddr) -> io::Result<Socket> {
    let s = Socket::new(Domain::for_address(bind), Type::STREAM, Some(Protocol::TCP))?;
    s.bind(&SockAddr::from(bind))?;
    Ok(s)
}

/// Two unconnected sockets bound to the same source port, one per path.
fn bind_pair(native_local: IpAddr, tunnel_local: IpAddr) -> io::Result<(Socket, Socket, u16)> {
    let mut last = io::Error::new(io::ErrorKind::AddrInUse, "no common source port");
    for _ in 0..SOURCE_PORT_TRIES {
        let native = tcp_socket(SocketAddr::new(native_local, 0))?;
        let port = native
            .local_addr()?
            .as_socket()
            .map(|a| a.port())
            .ok_or_else(|| io::Error::other("unexpected socket family"))?;
        match tcp_socket(SocketAddr::new(tunnel_local, port)) {
            Ok(tunneled) => return Ok((native, tunneled, port)),
            Err(e) => last = e,
        }
    }
    Err(last)
}

struct FlowRun {
    result: FlowResult,
    start: f64,
    end: f64,
}

fn run_flow(socket: Socket, to: SocketAddr, size: u64, connect_timeout: Duration, stall: Duration) -> FlowRun {
    let start = unix_now();
    let t0 = Instant::now();
    let failed = |reason, bytes, rtt| FlowRun {
        result: FlowResult::failed(reason, bytes, t0.elapsed().as_secs_f64(), rtt),
        start,
        end: unix_now(),
    };
    if let Err(e) = socket.connect_timeout(&SockAddr::from(to), connect_timeout) {
        let reason = match e.kind() {
            io::ErrorKind::ConnectionRefused | io::ErrorKind::ConnectionReset => FailureReason::Reset,
            _ => FailureReason::ConnectTimeout,
        };
        return failed(reason, 0, None);
    }
    let rtt_ms = t0.elapsed().as_secs_f64() * 1000.0;
    let mut stream: TcpStream = socket.into();
    if stream.set_read_timeout(Some(stall)).is_err() {
        return failed(FailureReason::Reset, 0, Some(rtt_ms));
    }
    let _ = stream.set_nodelay(true);
    match fetch(&mut stream, size as u32) {
        Ok(n) if n == size => FlowRun {
            result: FlowResult::succeeded(n, t0.elapsed().as_secs_f64(), rtt_ms, None),
            start,
            end: unix_now(),
        },
        Ok(n) => failed(FailureReason::Reset, n, Some(rtt_ms)),
        Err(e) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => {
            failed(FailureReason::Stall, 0, Some(rtt_ms))
        }
        Err(_) => failed(FailureReason::Reset, 0, Some(rtt_ms)),
    }
}

impl PairDriver for LiveDriver {
    fn begin_destination(&mut self, destination: &str) -> Result<(), FlowPairError> {
        self.stop_tunnel();
        let setup = |reason: String| FlowPairError::Setup { target: destination.to_string(), reason };
        let dest: IpAddr = destination.parse().map_err(|_| setup(format!("{destination:?} is not an IP address")))?;
        let mut config = self.tunnel.clone();
        config.peer_addr = dest;
        config.local_addr = route_source(dest).map_err(|e| setup(e.to_string()))?;
        config.mirror_ports = true;
        let mut endpoint = create_endpoint(config).map_err(|e| setup(e.to_string()))?;
        let handle = endpoint.handle();
        let thread = thread::spawn(move || {
            if let Err(e) = endpoint.run_datapath() {
                log::error!("tunnel datapath stopped: {e}");
            }
        });
        self.running = Some(RunningTunnel { handle, thread });
        self.destination = Some(dest);
        Ok(())
    }

    fn run_flows(&mut self, spec: &FlowSpec) -> PairOutcome {
        let size = spec.payload_bytes().unwrap_or(0);
        let dest = self.destination.expect("begin_destination not called");
        let tunnel_local = IpAddr::V4(self.tunnel.virtual_addr);
        let tunnel_peer = IpAddr::V4(self.tunnel.virtual_peer);
        let native_local = route_source(dest).unwrap_or(IpAddr::from([0, 0, 0, 0]));
        let (native, tunneled) = match bind_pair(native_local, tunnel_local) {
            Ok((n, t, _)) => (n, t),
            Err(e) => {
                log::error!("cannot bind a common source port: {e}");
                let r = FlowResult::failed(FailureReason::ConnectTimeout, 0, 0.0, None);
                return PairOutcome { tcp: r.clone(), udp: r, timestamps: PairTimestamps::default() };
            }
        };
        let (ct, st) = (self.connect_timeout, self.stall_timeout);
        let port = spec.port;
        let udp = thread::spawn(move || run_flow(tunneled, SocketAddr::new(tunnel_peer, port), size, ct, st));
        let tcp = run_flow(native, SocketAddr::new(dest, port), size, ct, st);
        let udp = udp.join().expect("flow thread panicked");
        PairOutcome {
            timestamps: PairTimestamps {
                tcp_start: tcp.start,
                tcp_end: tcp.end,
                udp_start: udp.start,
                udp_end: udp.end,
            },
            tcp: tcp.result,
            udp: udp.result,
        }
    }

    fn end_destination(&mut self, _destination: &str) {
        self.stop_tunnel();
        self.destination = None;
    }
}

/// Handshake-only attempts for the racer: native TCP to the destination,
/// tunneled TCP to the virtual peer.
pub struct LiveHandshake {
    pub virtual_peer: IpAddr,
}

impl HandshakeRacer for LiveHandshake {
    fn handshake(&self, transport: Transport, destination: &str, port: u16, timeout: Duration) -> Result<(), String> {
        let ip = match transport {
            Transport::NativeTcp => destination.parse::<IpAddr>().map_err(|e| e.to_string())?,
            Transport::UdpTunneled => self.virtual_peer,
        };
        TcpStream::connect_timeout(&SocketAddr::new(ip, port), timeout).map(drop).map_err(|e| e.to_string())
    }
}

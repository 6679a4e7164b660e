//! Data server: answers a 4-byte big-endian size request with exactly that
//! many payload bytes, then closes.

use std::io::{self, Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::FlowPairError;

/// Largest request honored by default: the biggest default flow
/// (1500 IW x 10 segments x 1460 bytes) with room to spare.
pub const DEFAULT_MAX_REQUEST: u32 = 32_000_000;

#[derive(Debug, Clone)]
pub struct ServeConfig {
    pub listen: Vec<SocketAddr>,
    pub max_request_bytes: u32,
    /// A connection that neither sends its request nor accepts data for
    /// this long is closed.
    pub idle_timeout: Duration,
}

impl ServeConfig {
    pub fn new(listen: Vec<SocketAddr>) -> Self {
        Self { listen, max_request_bytes: DEFAULT_MAX_REQUEST, idle_timeout: Duration::from_secs(30) }
    }
}

#[derive(Debug, Default)]
struct Counters {
    accepted: AtomicU64,
    served: AtomicU64,
    bytes_sent: AtomicU64,
    malformed: AtomicU64,
    oversize: AtomicU64,
    idle_reaped: AtomicU64,
    io_errors: AtomicU64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServerStats {
    pub accepted: u64,
    pub served: u64,
    pub bytes_sent: u64,
    pub malformed: u64,
    pub oversize: u64,
    pub idle_reaped: u64,
    pub io_errors: u64,
}

pub struct DataServer {
    listeners: Vec<TcpListener>,
    config: ServeConfig,
    counters: Arc<Counters>,
}

impl DataServer {
    /// Binds every listen address; the first failure names its address.
    pub fn bind(config: ServeConfig) -> Result<Self, FlowPairError> {
        let mut listeners = Vec::with_capacity(config.listen.len());
        for addr in &config.listen {
            let l = TcpListener::bind(addr).map_err(|source| FlowPairError::Bind { addr: *addr, source })?;
            l.set_nonblocking(true)?;
            listeners.push(l);
        }
        Ok(Self { listeners, config, counters: Arc::default() })
    }

    pub fn local_addrs(&self) -> io::Result<Vec<SocketAddr>> {
        self.listeners.iter().map(TcpListener::local_addr).collect()
    }

    pub fn stats(&self) -> ServerStats {
        let c = &self.counters;
        ServerStats {
            accepted: c.accepted.load(Ordering::Relaxed),
            served: c.served.load(Ordering::Relaxed),
            bytes_sent: c.bytes_sent.load(Ordering::Relaxed),
            malformed: c.malformed.load(Ordering::Relaxed),
            oversize: c.oversize.load(Ordering::Relaxed),
            idle_reaped: c.idle_reaped.load(Ordering::Relaxed),
            io_errors: c.io_errors.load(Ordering::Relaxed),
        }
    }

    /// Accepts connections until `stop` is set; each client gets its own
    /// thread.
    pub fn run(&self, stop: &AtomicBool) -> ServerStats {
        while !stop.load(Ordering::Relaxed) {
            let mut idle = true;
            for l in &self.listeners {
                match l.accept() {
                    Ok((stream, peer)) => {
                        idle = false;
                        self.counters.accepted.fetch_add(1, Ordering::Relaxed);
                        let counters = Arc::clone(&self.counters);
                        let max = self.config.max_request_bytes;
                        let timeout = self.config.idle_timeout;
                        thread::spawn(move || {
                            log::debug!("client {peer}");
                            serve_one(stream, max, timeout, &counters);
                        });
                    }
                    Err(e) if e.kind() == io::ErrorKind::WouldBlock => {}
                    Err(e) => {
                        log::warn!("accept failed: {e}");
                        self.counters.io_errors.fetch_add(1, Ordering::Relaxed);
                    }
                }
            }
            if idle {
                thread::sleep(Duration::from_millis(5));
            }
        }
        self.stats()
    }
}

fn is_timeout(e: &io::Error) -> bool {
    matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut)
}

fn serve_one(mut stream: TcpStream, max: u32, timeout: Duration, c: &Counters) {
    let setup = stream
        .set_nonblocking(false)
        .and_then(|_| stream.set_read_timeout(Some(timeout)))
        .and_then(|_| stream.set_write_timeout(Some(timeout)))
        .and_then(|_| stream.set_nodelay(true));
    if setup.is_err() {
        c.io_errors.fetch_add(1, Ordering::Relaxed);
        return;
    }
    let mut header = [0u8; 4];
    if let Err(e) = stream.read_exact(&mut header) {
        let counter = if is_timeout(&e) {
            &c.idle_reaped
        } else if e.kind() == io::ErrorKind::UnexpectedEof {
            &c.malformed
        } else {
            &c.io_errors
        };
        counter.fetch_add(1, Ordering::Relaxed);
        return;
    }
    let size = u32::from_be_bytes(header);
    if size > max {
        log::warn!("rejecting request for {size} bytes (limit {max})");
        c.oversize.fetch_add(1, Ordering::Relaxed);
        return;
    }
    let chunk = [0u8; 64 * 1024];
    let mut left = size as usize;
    while left > 0 {
        let n = left.min(chunk.len());
        match stream.write(&chunk[..n]) {
            Ok(0) => {
                c.io_errors.fetch_add(1, Ordering::Relaxed);
                return;
            }
            Ok(w) => {
                left -= w;
                c.bytes_sent.fetch_add(w as u64, Ordering::Relaxed);
            }
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => {
                let counter = if is_timeout(&e) { &c.idle_reaped } else { &c.io_errors };
                counter.fetch_add(1, Ordering::Relaxed);
                return;
            }
        }
    }
    let _ = stream.shutdown(Shutdown::Write);
    // Drain until the client closes so no reset races the tail of the data.
    let mut sink = [0u8; 256];
    while matches!(stream.read(&mut sink), Ok(n) if n > 0) {}
    c.served.fetch_add(1, Ordering::Relaxed);
}

/// Client side of the request protocol: sends the size and reads until the
/// server closes. Returns the number of payload bytes received.
pub fn fetch(stream: &mut TcpStream, size: u32) -> io::Result<u64> {
    stream.write_all(&size.to_be_bytes())?;
    let mut buf = vec![0u8; 64 * 1024];
    let mut total = 0u64;
    loop {
        match stream.read(&mut buf) {
            Ok(0) => return Ok(total),
            Ok(n) => total += n as u64,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn start(
        max: u32,
        idle: Duration,
    ) -> (Arc<DataServer>, SocketAddr, Arc<AtomicBool>, thread::JoinHandle<ServerStats>) {
        let mut cfg = ServeConfig::new(vec!["127.0.0.1:0".parse().unwrap()]);
        cfg.max_request_bytes = max;
        cfg.idle_timeout = idle;
        let server = Arc::new(DataServer::bind(cfg).unwrap());
        let addr = server.local_addrs().unwrap()[0];
        let stop = Arc::new(AtomicBool::new(false));
        let (s, st) = (Arc::clone(&server), Arc::clone(&stop));
        let h = thread::spawn(move || s.run(&st));
        (server, addr, stop, h)
    }

    fn wait_for(server: &DataServer, pred: impl Fn(&ServerStats) -> bool) -> ServerStats {
        for _ in 0..400 {
            let s = server.stats();
            if pred(&s) {
                return s;
            }
            thread::sleep(Duration::from_millis(5));
        }
        server.stats()
    }

    #[test]
    fn exact_payload_then_close() {
        let (server, addr, stop, h) = start(DEFAULT_MAX_REQUEST, Duration::from_secs(5));
        let mut s = TcpStream::connect(addr).unwrap();
        assert_eq!(fetch(&mut s, 3 * 14_320).unwrap(), 42_960);
        drop(s);
        let stats = wait_for(&server, |s| s.served == 1);
        assert_eq!(stats.bytes_sent, 42_960);
        stop.store(true, Ordering::Relaxed);
        h.join().unwrap();
    }

    #[test]
    fn concurrent_clients() {
        let (server, addr, stop, h) = start(DEFAULT_MAX_REQUEST, Duration::from_secs(5));
        let clients: Vec<_> = (0..2)
            .map(|_| {
                thread::spawn(move || {
                    let mut s = TcpStream::connect(addr).unwrap();
                    fetch(&mut s, 1_000_000).unwrap()
                })
            })
            .collect();
        for c in clients {
            assert_eq!(c.join().unwrap(), 1_000_000);
        }
        wait_for(&server, |s| s.served == 2);
        stop.store(true, Ordering::Relaxed);
        h.join().unwrap();
    }

    #[test]
    fn malformed_oversize_and_idle() {
        let (server, addr, stop, h) = start(1000, Duration::from_millis(200));
        let mut s = TcpStream::connect(addr).unwrap();
        s.write_all(&[0, 1]).unwrap();
        s.shutdown(Shutdown::Write).unwrap();
        let mut s2 = TcpStream::connect(addr).unwrap();
        assert_eq!(fetch(&mut s2, 1001).unwrap(), 0);
        let _idle = TcpStream::connect(addr).unwrap();
        let stats = wait_for(&server, |s| s.malformed == 1 && s.oversize == 1 && s.idle_reaped == 1);
        assert_eq!((stats.malformed, stats.oversize, stats.idle_reaped), (1, 1, 1));
        assert_eq!(stats.served, 0);
        stop.store(true, Ordering::Relaxed);
        h.join().unwrap();
    }

    #[test]
    fn bind_failure_names_address() {
        let taken = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = taken.local_addr().unwrap();
        let err = DataServer::bind(ServeConfig::new(vec![addr])).err().unwrap();
        assert!(err.to_string().contains(&addr.port().to_string()));
    }
}

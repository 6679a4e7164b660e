//! Transport racing: start a tunneled and a native handshake together and
//! prefer the tunneled one unless it is clearly slower or fails.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc;
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_HEAD_START: Duration = Duration::from_millis(100);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Transport {
    UdpTunneled,
    NativeTcp,
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum RaceError {
    #[error("both transports failed (udp: {udp}; tcp: {tcp})")]
    BothFailed { udp: String, tcp: String },
}

/// Handshake completion time measured from the common start, or why it
/// failed.
pub type Handshake = Result<Duration, String>;

/// UDP wins when its handshake completed no later than `head_start` after
/// TCP's (ties included) or when TCP failed.
pub fn decide(udp: &Handshake, tcp: &Handshake, head_start: Duration) -> Result<Transport, RaceError> {
    match (udp, tcp) {
        (Ok(u), Ok(t)) if *u <= *t + head_start => Ok(Transport::UdpTunneled),
        (Ok(_), Ok(_)) => Ok(Transport::NativeTcp),
        (Ok(_), Err(_)) => Ok(Transport::UdpTunneled),
        (Err(_), Ok(_)) => Ok(Transport::NativeTcp),
        (Err(u), Err(t)) => Err(RaceError::BothFailed { udp: u.clone(), tcp: t.clone() }),
    }
}

/// Performs one handshake over the given transport.
pub trait HandshakeRacer: Send + Sync {
    fn handshake(&self, transport: Transport, destination: &str, port: u16, timeout: Duration) -> Result<(), String>;
}

/// Races both handshakes in real time. Returns as soon as the decision is
/// certain; a losing attempt is left to finish in the background.
pub fn race_connect(
    racer: Arc<dyn HandshakeRacer>,
    destination: &str,
    port: u16,
    timeout: Duration,
    head_start: Duration,
) -> Result<Transport, RaceError> {
    let (tx, rx) = mpsc::channel();
    let start = Instant::now();
    for transport in [Transport::UdpTunneled, Transport::NativeTcp] {
        let tx = tx.clone();
        let racer = Arc::clone(&racer);
        let dest = destination.to_string();
        thread::spawn(move || {
            let r = racer.handshake(transport, &dest, port, timeout).map(|_| start.elapsed());
            let _ = tx.send((transport, r));
        });
    }
    drop(tx);
    let mut udp: Option<Handshake> = None;
    let mut tcp: Option<Handshake> = None;
    loop {
        // Once TCP has succeeded, UDP only has until the end of its head start.
        let wait = match (&udp, &tcp) {
            (None, Some(Ok(t))) => (*t + head_start).checked_sub(start.elapsed()).unwrap_or_default(),
            _ => timeout + head_start,
        };
        match rx.recv_timeout(wait) {
            Ok((Transport::UdpTunneled, r)) => udp = Some(r),
            Ok((Transport::NativeTcp, r)) => tcp = Some(r),
            Err(_) => {
                udp.get_or_insert_with(|| Err("handshake not complete within head start".into()));
                tcp.get_or_insert_with(|| Err("no result".into()));
            }
        }
        match (&udp, &tcp) {
            (Some(Ok(_)), _) => return Ok(Transport::UdpTunneled),
            (Some(u), Some(t)) => return decide(u, t, head_start),
            _ => {}
        }
    }
}

/// Monotonic time source for cache expiry.
pub trait Clock: Send + Sync {
    fn now(&self) -> Duration;
}

pub struct SystemClock(Instant);

impl Default for SystemClock {
    fn default() -> Self {
        Self(Instant::now())
    }
}

impl Clock for SystemClock {
    fn now(&self) -> Duration {
        self.0.elapsed()
    }
}

/// Clock advanced by hand, for tests and emulated runs.
#[derive(Debug, Default)]
pub struct ManualClock(AtomicU64);

impl ManualClock {
    pub fn advance(&self, by: Duration) {
        self.0.fetch_add(by.as_micros() as u64, Ordering::Relaxed);
    }
}

impl Clock for ManualClock {
    fn now(&self) -> Duration {
        Duration::from_micros(self.0.load(Ordering::Relaxed))
    }
}

/// Race verdicts keyed by the client's access network.
pub struct RaceCache {
    ttl: Duration,
    clock: Arc<dyn Clock>,
    entries: HashMap<String, (Transport, Duration)>,
}

impl RaceCache {
    pub fn new(ttl: Duration, clock: Arc<dyn Clock>) -> Self {
        Self { ttl, clock, entries: HashMap::new() }
    }

    pub fn get(&mut self, network: &str) -> Option<Transport> {
        let now = self.clock.now();
        match self.entries.get(network) {
            Some(&(t, expires)) if now < expires => Some(t),
            Some(_) => {
                self.entries.remove(network);
                None
            }
            None => None,
        }
    }

    pub fn put(&mut self, network: &str, transport: Transport) {
        let expires = self.clock.now() + self.ttl;
        self.entries.insert(network.to_string(), (transport, expires));
    }
}

/// Uses a fresh cached verdict for `network` if there is one, otherwise runs
/// `race` and caches its result.
pub fn race_with_cache(
    cache: &mut RaceCache,
    network: &str,
    race: impl FnOnce() -> Result<Transport, RaceError>,
) -> Result<Transport, RaceError> {
    if let Some(t) = cache.get(network) {
        return Ok(t);
    }
    let t = race()?;
    cache.put(network, t);
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::sync::atomic::AtomicUsize;

    const HS: Duration = DEFAULT_HEAD_START;

    fn ms(v: u64) -> Handshake {
        Ok(Duration::from_millis(v))
    }

    #[test]
    fn decision_rules() {
        assert_eq!(decide(&ms(20), &ms(20), HS), Ok(Transport::UdpTunneled));
        assert_eq!(decide(&ms(120), &ms(20), HS), Ok(Transport::UdpTunneled));
        assert_eq!(decide(&ms(121), &ms(20), HS), Ok(Transport::NativeTcp));
        assert_eq!(decide(&Err("timeout".into()), &ms(20), HS), Ok(Transport::NativeTcp));
        let e = decide(&Err("u".into()), &Err("t".into()), HS).unwrap_err();
        assert_eq!(e, RaceError::BothFailed { udp: "u".into(), tcp: "t".into() });
    }

    struct Fake {
        udp: Option<Duration>,
        tcp: Option<Duration>,
        udp_calls: AtomicUsize,
    }

    impl HandshakeRacer for Fake {
        fn handshake(&self, t: Transport, _: &str, _: u16, timeout: Duration) -> Result<(), String> {
            let d = match t {
                Transport::UdpTunneled => {
                    self.udp_calls.fetch_add(1, Ordering::Relaxed);
                    self.udp
                }
                Transport::NativeTcp => self.tcp,
            };
            match d {
                Some(d) => {
                    thread::sleep(d);
                    Ok(())
                }
                None => {
                    thread::sleep(timeout);
                    Err("connect timeout".into())
                }
            }
        }
    }

    fn fake(udp: Option<u64>, tcp: Option<u64>) -> Arc<Fake> {
        Arc::new(Fake {
            udp: udp.map(Duration::from_millis),
            tcp: tcp.map(Duration::from_millis),
            udp_calls: AtomicUsize::new(0),
        })
    }

    #[test]
    fn realtime_race() {
        let t = Duration::from_millis(300);
        assert_eq!(race_connect(fake(Some(10), Some(10)), "d", 1, t, HS), Ok(Transport::UdpTunneled));
        assert_eq!(race_connect(fake(None, Some(10)), "d", 1, t, HS), Ok(Transport::NativeTcp));
        assert_eq!(race_connect(fake(Some(10), None), "d", 1, t, HS), Ok(Transport::UdpTunneled));
        assert!(race_connect(fake(None, None), "d", 1, t, HS).is_err());
        let started = Instant::now();
        assert_eq!(race_connect(fake(Some(2_000), Some(5)), "d", 1, t, HS), Ok(Transport::NativeTcp));
        assert!(started.elapsed() < Duration::from_millis(1_000));
    }

    #[test]
    fn cached_verdict_skips_attempts() {
        let clock = Arc::new(ManualClock::default());
        let mut cache = RaceCache::new(Duration::from_secs(60), clock.clone());
        let racer = fake(None, Some(5));
        let t = Duration::from_millis(100);
        let run = |r: &Arc<Fake>| {
            let r: Arc<dyn HandshakeRacer> = r.clone();
            move || race_connect(r, "d", 1, t, HS)
        };
        assert_eq!(race_with_cache(&mut cache, "net-a", run(&racer)), Ok(Transport::NativeTcp));
        assert_eq!(racer.udp_calls.load(Ordering::Relaxed), 1);
        assert_eq!(race_with_cache(&mut cache, "net-a", run(&racer)), Ok(Transport::NativeTcp));
        assert_eq!(racer.udp_calls.load(Ordering::Relaxed), 1);
        clock.advance(Duration::from_secs(61));
        assert_eq!(cache.get("net-a"), None);
    }

    proptest! {
        #[test]
        fn never_picks_a_failed_transport(
            u in proptest::option::of(0u64..1000),
            t in proptest::option::of(0u64..1000),
        ) {
            let uh: Handshake = u.map(Duration::from_millis).ok_or_else(|| "x".to_string());
            let th: Handshake = t.map(Duration::from_millis).ok_or_else(|| "y".to_string());
            match decide(&uh, &th, HS) {
                Ok(Transport::UdpTunneled) => prop_assert!(u.is_some()),
                Ok(Transport::NativeTcp) => prop_assert!(t.is_some()),
                Err(_) => prop_assert!(u.is_none() && t.is_none()),
            }
        }
    }
}

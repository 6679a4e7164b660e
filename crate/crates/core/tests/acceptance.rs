//! One test per acceptance criterion. Each writes a single `PASS`/`FAIL`
//! line to stderr (outside the test harness capture) before asserting.

use std::fs;
use std::io::Write;
use std::net::{IpAddr, Ipv4Addr};
use std::sync::Arc;
use std::time::{Duration, Instant};

use etherparse::PacketBuilder;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use wireimage::flowpair::{race_connect, FlowResult, FlowSpec, PairResult, PairTimestamps, Transport};
use wireimage::metrics::{classify_blocked, loss_pct, rtt_bias, tp_bias, CaptureDirection, PacketRecord, TcpFlags};
use wireimage::pathlab::harness::{
    bundled_scenario, calibrate_tcp_throughput, run_scenario, EmulatedRacer, PairWorkload, Scenario, SweepWorkload,
    Workload,
};
use wireimage::pathlab::probe_path::EmulatedProbePath;
use wireimage::pathlab::sim::{simulate, FlowKind, FlowSetup, LinkModel, Path, SimOptions, CLIENT_ADDR, SERVER_ADDR};
use wireimage::pathlab::{DropReason, ImpairmentProfile, Protocol, Scope};
use wireimage::prober::{ProbeOutcome, ProbeProtocol, ProbeSpec, Prober, SWEEP_SIZES};
use wireimage::tunnel::{decapsulate, encapsulate, TunnelConfig};

fn verdict(n: u32, title: &str, passed: bool, detail: &str) {
    let status = if passed { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr(), "criterion {n:>2} [{status}] {title}: {detail}");
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let m = s.len() / 2;
    if s.len().is_multiple_of(2) {
        (s[m - 1] + s[m]) / 2.0
    } else {
        s[m]
    }
}

/// Relative difference scaled by the larger magnitude, so a sign error or a
/// swapped normalizer shows up as a large value.
fn rel_err(a: f64, b: f64) -> f64 {
    if a == b {
        0.0
    } else {
        (a - b).abs() / a.abs().max(b.abs())
    }
}

/// Brute-force reference: normalize by whichever input is smaller, decided
/// by explicit branching on the comparison rather than `min`.
fn oracle_relative(first: f64, second: f64) -> f64 {
    let diff = first - second;
    if first < second {
        diff / first * 100.0
    } else {
        diff / second * 100.0
    }
}

#[test]
fn criterion_01_formula_oracles() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0xB1A5);
    let mut worst: f64 = 0.0;
    let mut props_ok = true;
    for _ in 0..10_000 {
        // Log-uniform over twelve decades to exercise very unequal inputs.
        let a = 10f64.powf(rng.random_range(-6.0..6.0));
        let b = 10f64.powf(rng.random_range(-6.0..6.0));
        let tp = tp_bias(a, b).unwrap();
        let rtt = rtt_bias(a, b).unwrap();
        worst = worst.max(rel_err(tp, oracle_relative(a, b))).max(rel_err(rtt, oracle_relative(a, b)));
        let k = 10f64.powf(rng.random_range(-3.0..3.0));
        props_ok &= tp_bias(b, a).unwrap() == -tp
            && rtt_bias(b, a).unwrap() == -rtt
            && tp_bias(a, a).unwrap() == 0.0
            && rtt_bias(b, b).unwrap() == 0.0
            && rel_err(tp_bias(a * k, b * k).unwrap(), tp) <= 1e-9
            && rel_err(rtt_bias(a * k, b * k).unwrap(), rtt) <= 1e-9
            && (tp > 0.0) == (a > b);
    }
    let elapsed = start.elapsed();
    let passed = worst <= 1e-9 && props_ok && elapsed < Duration::from_secs(5);
    verdict(
        1,
        "formula oracles",
        passed,
        &format!("10000 pairs, worst relative error {worst:.3e} (limit 1e-9), antisymmetry/zero/scale ok={props_ok}, {elapsed:.2?} (limit 5 s)"),
    );
    assert!(passed);
}

fn random_inner(rng: &mut ChaCha8Rng, max_len: usize) -> Vec<u8> {
    let src = Ipv4Addr::from(rng.random::<u32>()).octets();
    let dst = Ipv4Addr::from(rng.random::<u32>()).octets();
    let ttl = rng.random_range(1..=255);
    let ip = PacketBuilder::ipv4(src, dst, ttl);
    let mut out = Vec::new();
    if rng.random_bool(0.5) {
        let payload: Vec<u8> = (0..rng.random_range(0..=max_len - 40)).map(|_| rng.random()).collect();
        let b = ip.tcp(rng.random(), rng.random(), rng.random(), rng.random()).ack(rng.random());
        b.write(&mut out, &payload).unwrap();
    } else {
        let payload: Vec<u8> = (0..rng.random_range(0..=max_len - 28)).map(|_| rng.random()).collect();
        ip.udp(rng.random(), rng.random()).write(&mut out, &payload).unwrap();
    }
    out
}

/// Outer IPv4 + UDP parsed by hand: (outer length, UDP payload).
fn split_outer(wire: &[u8]) -> (usize, &[u8]) {
    assert_eq!(wire[0] >> 4, 4);
    let ihl = usize::from(wire[0] & 0x0f) * 4;
    assert_eq!(wire[9], 17, "outer protocol must be UDP");
    let total = usize::from(u16::from_be_bytes([wire[2], wire[3]]));
    let udp_len = usize::from(u16::from_be_bytes([wire[ihl + 4], wire[ihl + 5]]));
    assert_eq!(total, wire.len());
    assert_eq!(udp_len, total - ihl);
    (total, &wire[ihl + 8..])
}

#[test]
fn criterion_02_tunnel_correctness() {
    let start = Instant::now();
    let a = IpAddr::V4(Ipv4Addr::new(192, 0, 2, 1));
    let b = IpAddr::V4(Ipv4Addr::new(198, 51, 100, 2));
    let sender = TunnelConfig::new(a, b, 4789);
    let receiver = TunnelConfig::new(b, a, 4789);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut roundtrip_bad = 0;
    let mut size_bad = 0;
    for _ in 0..10_000 {
        let inner = random_inner(&mut rng, sender.virtual_mtu());
        let outer = encapsulate(&inner, &sender).unwrap();
        if outer.wire_len() != inner.len() + 28 || outer.to_wire_bytes().len() != inner.len() + 28 {
            size_bad += 1;
        }
        if decapsulate(&outer, &receiver).map(|p| p.into_bytes()).ok() != Some(inner) {
            roundtrip_bad += 1;
        }
    }

    // Sizes as captured on the emulated wire, clean and lossy.
    let mut captured = 0;
    let mut capture_bad = 0;
    for (i, loss) in [0.0, 0.02].into_iter().enumerate() {
        let profile = ImpairmentProfile { loss_rate_udp: loss, ..Default::default() };
        let link = LinkModel { rate_mbps: 100.0, one_way_delay_ms: 10.0, buffer_bytes: 500_000 };
        let mut path = Path::new(profile, link, i as u64);
        let opts = SimOptions { capture: true, seed: i as u64, ..Default::default() };
        let setup = FlowSetup {
            kind: FlowKind::Tunneled,
            request: Some(400_000),
            start_us: 0,
            src_port: 40_000,
            dst_port: 443,
        };
        for flow in simulate(&mut path, &opts, &[setup]).unwrap() {
            for p in &flow.capture {
                let (outer_len, inner) = split_outer(&p.data);
                let inner_total = usize::from(u16::from_be_bytes([inner[2], inner[3]]));
                captured += 1;
                if outer_len != inner.len() + 28 || inner_total != inner.len() {
                    capture_bad += 1;
                }
            }
        }
    }

    // Every harness run: the largest native and tunneled packets match.
    let mut runs = 0;
    let mut unequal_runs = Vec::new();
    let profiles = [
        ImpairmentProfile::neutral(),
        ImpairmentProfile { extra_latency_udp: 20.0, scope: Scope::Forward, ..Default::default() },
        ImpairmentProfile { loss_rate_udp: 0.01, loss_rate_tcp: 0.01, ..Default::default() },
        ImpairmentProfile { udp_rate_limit: Some(2000.0), ..Default::default() },
    ];
    for (i, profile) in profiles.into_iter().enumerate() {
        for seed in 0..3 {
            let mut s = Scenario::new(
                &format!("mss-{i}-{seed}"),
                profile.clone(),
                Workload::Pairs(PairWorkload { schedule: vec![(1, 3), (30, 3)], ..Default::default() }),
            );
            s.seed = seed;
            let r = run_scenario(&s).unwrap();
            runs += 1;
            let equal = r.pairs.iter().zip(&r.pair_diagnostics).filter(|(p, _)| p.tcp.success && p.udp.success).all(
                |(_, d)| d.tcp_max_wire_len == d.udp_max_wire_len && d.udp_mss == Some(1432) && d.tcp_mss == Some(1460),
            );
            let violations: u64 = r.pair_diagnostics.iter().map(|d| d.wire_len_violations).sum();
            if !equal || violations > 0 || r.bias.as_ref().unwrap().n_both_ok == 0 {
                unequal_runs.push(s.name.clone());
            }
        }
    }
    let elapsed = start.elapsed();
    let passed = roundtrip_bad == 0
        && size_bad == 0
        && captured > 0
        && capture_bad == 0
        && unequal_runs.is_empty()
        && elapsed < Duration::from_secs(30);
    verdict(
        2,
        "tunnel correctness",
        passed,
        &format!(
            "10000 round trips ({roundtrip_bad} mismatched, {size_bad} wrong size), {captured} captured packets ({capture_bad} not inner+28), \
             max packet size equal in {}/{runs} harness runs, {elapsed:.2?} (limit 30 s)",
            runs - unequal_runs.len()
        ),
    );
    assert!(passed, "runs with unequal max size: {unequal_runs:?}");
}

#[test]
fn criterion_03_neutral_parity() {
    let start = Instant::now();
    let s = bundled_scenario("neutral").unwrap();
    assert_eq!(s.profile, ImpairmentProfile::neutral());
    let Workload::Pairs(w) = &s.workload else { panic!("neutral runs pairs") };
    assert_eq!(w.schedule, vec![(1, 20), (3, 20), (30, 20)]);
    let r = run_scenario(&s).unwrap();
    let tp: Vec<f64> = r.pairs.iter().filter_map(|p| p.tp_bias.map(f64::abs)).collect();
    let rtt: Vec<f64> = r.pairs.iter().filter_map(|p| p.rtt_bias.map(f64::abs)).collect();
    let (mtp, mrtt) = (median(&tp), median(&rtt));
    let elapsed = start.elapsed();
    let passed = tp.len() == 60 && rtt.len() == 60 && mtp <= 5.0 && mrtt <= 5.0 && elapsed < Duration::from_secs(180);
    verdict(
        3,
        "neutral-path parity",
        passed,
        &format!("{} pairs, median |tp_bias| {mtp:.3}%, median |rtt_bias| {mrtt:.3}% (limit 5%), {elapsed:.2?} (limit 3 min)", tp.len()),
    );
    assert!(passed);
}

#[test]
fn criterion_04_blackhole_detection() {
    let start = Instant::now();
    let profile = ImpairmentProfile { udp_block: true, ..Default::default() };
    let s = Scenario::new(
        "blackhole",
        profile.clone(),
        Workload::Pairs(PairWorkload { schedule: vec![(1, 5)], attempts_before_skip: 10, ..Default::default() }),
    );
    let r = run_scenario(&s).unwrap();
    let attempts: Vec<_> = r.pairs.iter().map(PairResult::attempt).collect();
    let udp_ok = attempts.iter().filter(|a| a.udp_ok).count() as f64;
    let tcp_ok = attempts.iter().filter(|a| a.tcp_ok).count() as f64;
    let conn = (udp_ok - tcp_ok) / attempts.len() as f64;
    let reported = r.bias.as_ref().unwrap().conn_bias;
    let blocked = classify_blocked(&attempts);

    let racer = Arc::new(EmulatedRacer { profile, link: s.path, seed: 4, time_scale: 1.0 });
    let chosen = race_connect(racer, &SERVER_ADDR.to_string(), 443, Duration::from_secs(2), Duration::from_millis(100));
    let elapsed = start.elapsed();
    let passed = attempts.len() >= 5
        && conn == -1.0
        && reported == Some(-1.0)
        && blocked
        && chosen.as_ref().ok() == Some(&Transport::NativeTcp)
        && elapsed < Duration::from_secs(60);
    verdict(
        4,
        "blackhole detection",
        passed,
        &format!(
            "{} attempts, conn_bias {reported:?} (oracle {conn}), classify_blocked {blocked}, race_connect {chosen:?}, {elapsed:.2?} (limit 1 min)",
            attempts.len()
        ),
    );
    assert!(passed);
}

#[test]
fn criterion_05_rate_limit_detection() {
    let start = Instant::now();
    let link = LinkModel { rate_mbps: 100.0, one_way_delay_ms: 20.0, buffer_bytes: 500_000 };
    let workload = PairWorkload { schedule: vec![(300, 5)], ..Default::default() };
    let mut medians = Vec::new();
    let mut all_ok = true;
    for run in 0..10u64 {
        let seed = 500 + run;
        let tcp_kbps = calibrate_tcp_throughput(link, &workload, seed).unwrap();
        let mut s = Scenario::new(
            "shaped",
            ImpairmentProfile { udp_rate_limit: Some(0.5 * tcp_kbps), ..Default::default() },
            Workload::Pairs(workload.clone()),
        );
        s.path = link;
        s.seed = seed;
        let r = run_scenario(&s).unwrap();
        let tp: Vec<f64> = r.pairs.iter().filter_map(|p| p.tp_bias).collect();
        // Sign oracle: UDP slower means the UDP throughput is below TCP's.
        let sign_ok = r
            .pairs
            .iter()
            .filter(|p| p.tp_bias.is_some())
            .all(|p| (p.tp_bias.unwrap() < 0.0) == (p.udp.throughput_kbps < p.tcp.throughput_kbps));
        let m = if tp.is_empty() { f64::NAN } else { median(&tp) };
        all_ok &= tp.len() == 5 && m <= -30.0 && sign_ok;
        medians.push(m);
    }
    let elapsed = start.elapsed();
    let passed = all_ok && elapsed < Duration::from_secs(180);
    let shown: Vec<String> = medians.iter().map(|m| format!("{m:.1}")).collect();
    verdict(
        5,
        "rate-limit detection",
        passed,
        &format!(
            "median tp_bias per run [{}] (limit <= -30 in 10/10), {} runs ok, {elapsed:.2?} (limit 3 min)",
            shown.join(", "),
            medians.iter().filter(|m| **m <= -30.0).count()
        ),
    );
    assert!(passed);
}

#[test]
fn criterion_06_latency_skew_detection() {
    let start = Instant::now();
    // 20 ms one-way base delay; UDP gets 20 ms more toward the server.
    let link = LinkModel { rate_mbps: 100.0, one_way_delay_ms: 20.0, buffer_bytes: 500_000 };
    let profile = ImpairmentProfile { extra_latency_udp: 20.0, scope: Scope::Forward, ..Default::default() };
    let mut s = Scenario::new(
        "latency",
        profile,
        Workload::Pairs(PairWorkload { schedule: vec![(1, 20), (3, 20), (30, 20)], ..Default::default() }),
    );
    s.path = link;
    let r = run_scenario(&s).unwrap();
    let rtt: Vec<f64> = r.pairs.iter().filter_map(|p| p.rtt_bias).collect();
    let m = median(&rtt);
    let expected = oracle_relative(2.0 * 20.0, 2.0 * 20.0 + 20.0);
    let elapsed = start.elapsed();
    let passed = rtt.len() == 60 && (m - (-50.0)).abs() <= 10.0 && elapsed < Duration::from_secs(120);
    verdict(
        6,
        "latency-skew detection",
        passed,
        &format!("median rtt_bias {m:.3} over {} pairs, target -50 ± 10 (oracle for RTT 40 vs 60 ms: {expected}), {elapsed:.2?} (limit 2 min)", rtt.len()),
    );
    assert!(passed);
}

/// Sender trace of `n` equal segments with the listed ones sent twice.
fn synthetic_trace(n: u32, seg: u32, retransmit: &[u32]) -> Vec<PacketRecord> {
    let isn = 0xFFFF_F000u32; // wraps mid-flow
    let mut out = vec![PacketRecord {
        ts_us: 0,
        direction: CaptureDirection::Sent,
        seq: isn,
        payload_len: 0,
        flags: TcpFlags(TcpFlags::SYN),
    }];
    let mut ts = 1000;
    for i in 0..n {
        out.push(PacketRecord {
            ts_us: ts,
            direction: CaptureDirection::Sent,
            seq: isn.wrapping_add(1 + i * seg),
            payload_len: seg,
            flags: TcpFlags(TcpFlags::ACK),
        });
        ts += 100;
        out.push(PacketRecord {
            ts_us: ts,
            direction: CaptureDirection::Received,
            seq: 1,
            payload_len: 0,
            flags: TcpFlags(TcpFlags::ACK),
        });
        ts += 100;
    }
    for &i in retransmit {
        out.push(PacketRecord {
            ts_us: ts,
            direction: CaptureDirection::Sent,
            seq: isn.wrapping_add(1 + i * seg),
            payload_len: seg,
            flags: TcpFlags(TcpFlags::ACK | TcpFlags::PSH),
        });
        ts += 100;
    }
    out
}

#[test]
fn criterion_07_loss_extraction() {
    let start = Instant::now();
    let n = 30u32;
    let mut rows = Vec::new();
    let mut passed = true;
    for (k, which) in [(0u32, vec![]), (1, vec![7]), (3, vec![0, 14, 29])] {
        let got = loss_pct(&synthetic_trace(n, 1432, &which)).unwrap();
        let want = 100.0 * f64::from(k) / f64::from(n);
        passed &= got == want;
        rows.push(format!("k={k}: {got} (want {want})"));
    }
    let elapsed = start.elapsed();
    passed &= elapsed < Duration::from_secs(5);
    verdict(7, "loss extraction", passed, &format!("n=30, {}, {elapsed:.2?} (limit 5 s)", rows.join("; ")));
    assert!(passed);
}

#[test]
fn criterion_08_nat_timeout_asymmetry() {
    let start = Instant::now();
    let s = bundled_scenario("nat-timeouts").unwrap();
    assert_eq!(s.profile.nat_udp_idle_timeout, Some(180.0));
    assert_eq!(s.profile.nat_tcp_idle_timeout, Some(3600.0));
    let r = run_scenario(&s).unwrap();
    let at = |p: Protocol, idle: f64| r.nat.iter().find(|o| o.protocol == p && o.idle_s == idle).unwrap().clone();
    let udp_before = at(Protocol::Udp, 179.0);
    let udp_after = at(Protocol::Udp, 181.0);
    let tcp_after = at(Protocol::Tcp, 181.0);
    let tcp_long = at(Protocol::Tcp, 3599.0);
    let tcp_expired = at(Protocol::Tcp, 3601.0);
    let reported = r.check("nat-udp-expires-before-tcp").is_some_and(|c| c.passed)
        && r.check("nat-matches-profile").is_some_and(|c| c.passed);
    let elapsed = start.elapsed();
    let passed = udp_before.inbound_delivered
        && !udp_after.inbound_delivered
        && udp_after.drop_reason == Some(DropReason::NatExpired)
        && tcp_after.inbound_delivered
        && tcp_long.inbound_delivered
        && !tcp_expired.inbound_delivered
        && reported
        && elapsed < Duration::from_secs(10);
    verdict(
        8,
        "NAT-timeout asymmetry",
        passed,
        &format!(
            "after 181 s idle: UDP inbound {:?}, TCP inbound delivered {}; TCP at 3599 s {} / 3601 s {}; harness report flags it: {reported}; {elapsed:.2?} (limit 10 s)",
            udp_after.drop_reason, tcp_after.inbound_delivered, tcp_long.inbound_delivered, tcp_expired.inbound_delivered
        ),
    );
    assert!(passed);
}

#[test]
fn criterion_09_prober_semantics() {
    let start = Instant::now();
    // Ping mode: TTL 199 against a responder ten hops away.
    let responder = EmulatedProbePath::new(ImpairmentProfile::neutral(), SERVER_ADDR, 10, 1.0, 9);
    let mut prober = Prober::new(responder, CLIENT_ADDR);
    let mut results = Vec::new();
    for protocol in [ProbeProtocol::Udp, ProbeProtocol::Tcp, ProbeProtocol::Icmp] {
        let mut spec = ProbeSpec::new(IpAddr::V4(SERVER_ADDR), protocol);
        if protocol == ProbeProtocol::Tcp {
            spec.port = 443;
        }
        assert_eq!(spec.initial_ttl, 199);
        results.extend(prober.probe(&spec).unwrap());
    }
    let all_target = results.iter().all(|r| r.outcome == ProbeOutcome::TargetResponse);
    let ttl_exceeded = results.iter().filter(|r| r.outcome == ProbeOutcome::PathTtlExceeded).count();

    let blocked =
        EmulatedProbePath::new(ImpairmentProfile { udp_block: true, ..Default::default() }, SERVER_ADDR, 10, 1.0, 9);
    let mut prober = Prober::new(blocked, CLIENT_ADDR);
    let template = ProbeSpec::new(IpAddr::V4(SERVER_ADDR), ProbeProtocol::Udp);
    let sweep = prober.mtu_sweep(&template, &SWEEP_SIZES);
    let flagged: Vec<usize> = sweep.rows.iter().filter(|r| r.udp_fail_icmp_pass).map(|r| r.size).collect();

    // The same through the scenario runner.
    let lab = run_scenario(&Scenario::new(
        "probe",
        ImpairmentProfile { udp_block: true, ..Default::default() },
        Workload::ProbeSweep(SweepWorkload::default()),
    ))
    .unwrap();
    let elapsed = start.elapsed();
    let passed = results.len() == 9
        && all_target
        && ttl_exceeded == 0
        && flagged == [72, 572, 1454]
        && sweep.udp_fail_icmp_pass
        && lab.passed()
        && elapsed < Duration::from_secs(60);
    verdict(
        9,
        "prober semantics",
        passed,
        &format!(
            "{} probes all target-response={all_target}, path-ttl-exceeded {ttl_exceeded}; UDP-fail/ICMP-pass at {flagged:?}; {elapsed:.2?} (limit 1 min)",
            results.len()
        ),
    );
    assert!(passed);
}

fn pair(src: &str, dst: &str, k: usize, tcp: Option<(f64, f64)>, udp: Option<(f64, f64)>) -> PairResult {
    // (throughput kB/s, initial RTT ms); one-second flows make throughput exact.
    let flow = |v: Option<(f64, f64)>| match v {
        Some((tp, rtt)) => FlowResult::succeeded((tp * 1000.0) as u64, 1.0, rtt, None),
        None => FlowResult::failed(wireimage::flowpair::FailureReason::ConnectTimeout, 0, 10.0, None),
    };
    PairResult::new(
        format!("{src}/{dst}:443/1iw/{k}"),
        src,
        FlowSpec::new(dst, 443, 1),
        flow(tcp),
        flow(udp),
        PairTimestamps::default(),
    )
}

fn write_jsonl(path: &std::path::Path, pairs: &[PairResult], extra: &[&str]) {
    let mut text = String::from("{\"manifest\":{\"tool\":\"fixture\",\"version\":\"0\",\"command_line\":[],\"command\":\"campaign\",\"config\":null,\"started_at\":\"2026-01-01T00:00:00.000000Z\",\"finished_at\":null,\"host\":{\"hostname\":\"h\",\"os\":\"linux\",\"arch\":\"x86_64\"},\"seeds\":[1]}}\n");
    for p in pairs {
        text.push_str(&serde_json::to_string(p).unwrap());
        text.push('\n');
    }
    for e in extra {
        text.push_str(e);
        text.push('\n');
    }
    fs::write(path, text).unwrap();
}

fn analyze(dir: &std::path::Path, input: &std::path::Path, extra: &[&str]) -> i32 {
    let out = dir.join("out");
    let mut args = vec![
        "wireimage".to_string(),
        "analyze".into(),
        input.to_string_lossy().into_owned(),
        "--out-dir".into(),
        out.to_string_lossy().into_owned(),
    ];
    args.extend(extra.iter().map(|s| s.to_string()));
    wireimage::cli::run(args)
}

#[test]
fn criterion_10_analyzer_fixtures() {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    // Three nodes; A and C in eu, B in us. Values chosen so every bias is an
    // exact binary fraction.
    let pairs = vec![
        pair("A", "B", 0, Some((100.0, 40.0)), Some((150.0, 20.0))), // tp +50, rtt +100
        pair("A", "B", 1, Some((300.0, 60.0)), Some((200.0, 60.0))), // tp -50, rtt 0
        pair("A", "B", 2, Some((120.0, 45.0)), None),
        pair("A", "B", 3, Some((250.0, 30.0)), Some((500.0, 60.0))), // tp +100, rtt -100
        pair("C", "B", 0, Some((90.0, 70.0)), None),
        pair("C", "B", 1, Some((95.0, 70.0)), None),
        pair("B", "A", 0, None, Some((400.0, 25.0))),
        pair("B", "A", 1, Some((1000.0, 80.0)), Some((800.0, 100.0))), // tp -25, rtt -25
    ];
    let input = dir.path().join("fixture.jsonl");
    write_jsonl(&input, &pairs, &["{\"pair_id\": ", "", "not json at all"]);
    fs::write(dir.path().join("regions.txt"), "A eu\nB us\nC eu\n").unwrap();
    let regions = dir.path().join("regions.txt").to_string_lossy().into_owned();
    let code = analyze(dir.path(), &input, &["--regions", &regions, "--region-order", "eu,us"]);
    let read = |f: &str| fs::read_to_string(dir.path().join("out").join(f)).unwrap();

    // Hand computation.
    let want_summary = "dimension,side,threshold,n_flows,median_bias\n\
                        throughput,below,200,1,50\n\
                        throughput,above,200,3,-25\n\
                        latency,below,50,2,0\n\
                        latency,above,50,2,-12.5\n";
    let want_conn = "src\\dst,A,C,B\nA,,,-0.25\nC,,,-1\nB,0.5,,\n";
    let want_tp = "src\\dst,A,C,B\nA,,,50\nC,,,\nB,-25,,\n";
    let want_rtt = "src\\dst,A,C,B\nA,,,0\nC,,,\nB,-25,,\n";
    let want_paths = "src,dst,n_pairs,n_successful,conn_bias,median_tp_bias,median_rtt_bias\n\
                      A,B,4,3,-0.25,50,0\n\
                      B,A,2,1,0.5,-25,-25\n\
                      C,B,2,0,-1,,\n";
    let tables_ok = code == 0
        && read("summary.csv") == want_summary
        && read("matrix_conn_bias.csv") == want_conn
        && read("matrix_tp_bias.csv") == want_tp
        && read("matrix_rtt_bias.csv") == want_rtt
        && read("paths.csv") == want_paths;
    let stats: serde_json::Value = serde_json::from_str(&read("stats.json")).unwrap();
    let counts_ok = stats["pairs"] == 8 && stats["malformed"] == 2 && stats["blank"] == 1 && stats["manifests"] == 1;

    // CDF sort oracle on 1000 samples with repeated values.
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let many: Vec<PairResult> = (0..1000)
        .map(|k| {
            let tcp = f64::from(rng.random_range(50u32..80)) * 10.0;
            let udp = f64::from(rng.random_range(50u32..80)) * 10.0;
            pair("S", "D", k, Some((tcp, 20.0)), Some((udp, 20.0)))
        })
        .collect();
    let many_input = dir.path().join("many.jsonl");
    write_jsonl(&many_input, &many, &[]);
    let code_many = analyze(dir.path(), &many_input, &[]);
    let mut samples: Vec<f64> = many.iter().map(|p| p.tp_bias.unwrap()).collect();
    samples.sort_by(f64::total_cmp);
    let mut want_cdf: Vec<(f64, f64)> = Vec::new();
    for (i, v) in samples.iter().enumerate() {
        if samples.get(i + 1) != Some(v) {
            want_cdf.push((*v, (i + 1) as f64 / 1000.0));
        }
    }
    let got_cdf: Vec<(f64, f64)> = read("cdf_tp_bias.csv")
        .lines()
        .skip(1)
        .map(|l| {
            let (v, f) = l.split_once(',').unwrap();
            (v.parse().unwrap(), f.parse().unwrap())
        })
        .collect();
    if let Some((g, w)) = got_cdf.iter().zip(&want_cdf).find(|(g, w)| g != w) {
        eprintln!("first cdf mismatch: got {g:?} want {w:?} ({} vs {} points)", got_cdf.len(), want_cdf.len());
    }
    let cdf_ok = code_many == 0 && got_cdf == want_cdf && got_cdf.last().map(|p| p.1) == Some(1.0);

    let elapsed = start.elapsed();
    let passed = tables_ok && counts_ok && cdf_ok && elapsed < Duration::from_secs(10);
    verdict(
        10,
        "analyzer fixtures",
        passed,
        &format!(
            "grouped medians and matrices match hand computation={tables_ok}, line counts={counts_ok}, CDF sort oracle over 1000 samples ({} distinct)={cdf_ok}, {elapsed:.2?} (limit 10 s)",
            want_cdf.len()
        ),
    );
    assert!(
        tables_ok,
        "summary:\n{}\nconn:\n{}\npaths:\n{}",
        read("summary.csv"),
        read("matrix_conn_bias.csv"),
        read("paths.csv")
    );
    assert!(passed);
}

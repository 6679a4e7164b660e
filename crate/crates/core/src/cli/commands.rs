use std::fs;
use std::io;
use std::net::{IpAddr, Ipv4Addr, SocketAddr};
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use serde_json::json;

use super::writer::RecordSender;
use super::{CampaignArgs, CliError, LabArgs, ProbeArgs, ResultWriter, RunManifest, ServeArgs};
use crate::flowpair::live::{route_source, LiveDriver};
use crate::flowpair::{
    run_campaign, CampaignConfig, DataServer, FlowPairError, PairDriver, ServeConfig, DEFAULT_PORTS, DEFAULT_SCHEDULE,
};
use crate::metrics::capture::PcapWriter;
use crate::pathlab::harness::EmulatedPairDriver;
use crate::pathlab::probe_path::EmulatedProbePath;
use crate::pathlab::sim::{LinkModel, Path as LabPath, SimOptions};
use crate::pathlab::{bundled, bundled_scenario, run_scenario, ImpairmentProfile, PathLabError, Scenario};
use crate::prober::{
    parse_targets, MtuSweep, ProbeProtocol, ProbeSpec, ProbeTarget, ProbeTransport, Prober, ProberError,
};
use crate::tunnel::{create_endpoint, TunnelConfig, TunnelError};

/// Set by SIGINT or SIGTERM.
fn stop_flag() -> Result<Arc<AtomicBool>, CliError> {
    let stop = Arc::new(AtomicBool::new(false));
    for sig in [signal_hook::consts::SIGINT, signal_hook::consts::SIGTERM] {
        signal_hook::flag::register(sig, Arc::clone(&stop)).map_err(|e| CliError::Runtime(e.to_string()))?;
    }
    Ok(stop)
}

fn is_root() -> bool {
    // SAFETY: geteuid has no preconditions.
    unsafe { libc::geteuid() == 0 }
}

fn read_config_file(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

fn load_profile(spec: &str) -> Result<ImpairmentProfile, CliError> {
    if spec == "none" {
        return Ok(ImpairmentProfile::neutral());
    }
    ImpairmentProfile::parse(&read_config_file(Path::new(spec))?).map_err(|e| CliError::Config(format!("{spec}: {e}")))
}

fn lab_error(e: PathLabError) -> CliError {
    match e {
        PathLabError::Profile(_) | PathLabError::Setup(_) => CliError::Config(e.to_string()),
        _ => CliError::Runtime(e.to_string()),
    }
}

fn tunnel_error(e: TunnelError) -> CliError {
    match e {
        TunnelError::Privilege { .. } => CliError::Privilege(e.to_string()),
        TunnelError::InvalidPort | TunnelError::InvalidConfig(_) => CliError::Config(e.to_string()),
        _ => CliError::Runtime(e.to_string()),
    }
}

fn flowpair_error(e: FlowPairError) -> CliError {
    match e {
        FlowPairError::InvalidSpec(_) => CliError::Config(e.to_string()),
        FlowPairError::Bind { ref source, .. } if source.kind() == io::ErrorKind::PermissionDenied => {
            CliError::Privilege(e.to_string())
        }
        _ => CliError::Runtime(e.to_string()),
    }
}

fn random_seed() -> u64 {
    rand::random()
}

/// Sleeps up to `d`, returning early once `stop` is set.
fn sleep_unless_stopped(d: Duration, stop: &AtomicBool) {
    let step = Duration::from_millis(100);
    let mut left = d;
    while !left.is_zero() && !stop.load(Ordering::Relaxed) {
        let s = left.min(step);
        thread::sleep(s);
        left -= s;
    }
}

pub(super) fn serve(a: ServeArgs) -> Result<(), CliError> {
    let ports = a.ports.clone().unwrap_or_else(|| DEFAULT_PORTS.to_vec());
    if ports.is_empty() || ports.contains(&0) {
        return Err(CliError::Config("--ports needs one or more non-zero ports".into()));
    }
    let stop = stop_flag()?;
    let mut config = ServeConfig::new(ports.iter().map(|&p| SocketAddr::new(a.bind, p)).collect());
    if let Some(m) = a.max_request {
        config.max_request_bytes = m;
    }
    let server = DataServer::bind(config).map_err(flowpair_error)?;

    let tunnel = match a.tunnel_peer {
        Some(peer) => {
            let local = match a.tunnel_local {
                Some(l) => l,
                None => route_source(peer).map_err(|e| CliError::Runtime(format!("no route to {peer}: {e}")))?,
            };
            let mut tc = TunnelConfig::new(local, peer, ports[0]);
            // The server holds the far end of the client's point-to-point link.
            std::mem::swap(&mut tc.virtual_addr, &mut tc.virtual_peer);
            tc.virtual_if_name = a.tunnel_if.clone();
            tc.mirror_ports = true;
            let mut endpoint = create_endpoint(tc).map_err(tunnel_error)?;
            for &p in &ports[1..] {
                endpoint.bind_port(p).map_err(tunnel_error)?;
            }
            let handle = endpoint.handle();
            let t = thread::spawn(move || endpoint.run_datapath());
            Some((handle, t))
        }
        None => None,
    };
    let addrs = server.local_addrs()?;
    log::info!("serving on {addrs:?}");
    eprintln!("serving on {}", addrs.iter().map(ToString::to_string).collect::<Vec<_>>().join(", "));

    let stats = server.run(&stop);
    let mut failure = None;
    if let Some((handle, t)) = tunnel {
        handle.shutdown();
        match t.join() {
            Ok(Ok(c)) => log::info!("tunnel counters: {c:?}"),
            Ok(Err(e)) => failure = Some(CliError::Runtime(format!("tunnel stopped: {e}"))),
            Err(_) => failure = Some(CliError::Runtime("tunnel thread panicked".into())),
        }
    }
    if let Some(out) = &a.out {
        let m = RunManifest::new(
            "serve",
            json!({ "ports": ports, "bind": a.bind, "tunnel_peer": a.tunnel_peer, "max_request": a.max_request }),
            vec![],
        );
        let w = ResultWriter::create(out, &m)?;
        w.append(&json!({ "server_stats": stats }))?;
        w.finish()?;
    }
    eprintln!("served {} of {} connections, {} bytes", stats.served, stats.accepted, stats.bytes_sent);
    failure.map_or(Ok(()), Err)
}

fn read_target_lines(path: &Path) -> Result<Vec<String>, CliError> {
    Ok(read_config_file(path)?
        .lines()
        .map(|l| l.split('#').next().unwrap_or("").trim())
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect())
}

fn campaign_config(a: &CampaignArgs) -> Result<CampaignConfig, CliError> {
    let mut c = match &a.config {
        Some(p) => serde_json::from_str::<CampaignConfig>(&read_config_file(p)?)
            .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?,
        None => CampaignConfig { source: super::hostname(), ..Default::default() },
    };
    let mut targets = a.targets.clone().unwrap_or_default();
    if let Some(f) = &a.target_file {
        targets.extend(read_target_lines(f)?);
    }
    if !targets.is_empty() {
        c.destinations = targets;
    }
    if let Some(p) = &a.ports {
        c.ports = p.clone();
    }
    match (&a.sizes_iw, a.pairs) {
        (Some(sizes), pairs) => {
            let default_count = |s: u32| DEFAULT_SCHEDULE.iter().find(|(d, _)| *d == s).map_or(10, |&(_, n)| n);
            c.schedule = sizes.iter().map(|&s| (s, pairs.unwrap_or_else(|| default_count(s)))).collect();
        }
        (None, Some(n)) => c.schedule.iter_mut().for_each(|e| e.1 = n),
        (None, None) => {}
    }
    if let Some(s) = &a.source {
        c.source = s.clone();
    }
    if let Some(d) = a.inter_pair_delay_ms {
        c.inter_pair_delay = Duration::from_millis(d);
    }
    if c.destinations.is_empty() {
        return Err(CliError::Config("no destinations: use --targets, --target-file or a config file".into()));
    }
    c.validate().map_err(flowpair_error)?;
    Ok(c)
}

pub(super) fn campaign(a: CampaignArgs) -> Result<(), CliError> {
    let config = campaign_config(&a)?;
    let seed = a.seed.unwrap_or_else(random_seed);
    let profile = a.emulate.as_deref().map(load_profile).transpose()?;
    let link =
        LinkModel { rate_mbps: a.link_rate_mbps, one_way_delay_ms: a.link_delay_ms, buffer_bytes: a.link_buffer_bytes };

    let mut emulated = None;
    let mut live = None;
    match &profile {
        Some(p) => {
            let options = SimOptions {
                connect_timeout_us: config.connect_timeout.as_micros() as u64,
                stall_timeout_us: config.stall_timeout.as_micros() as u64,
                capture: a.capture.is_some(),
                seed,
                ..SimOptions::default()
            };
            emulated = Some(EmulatedPairDriver::new(LabPath::new(p.clone(), link, seed), options, seed));
        }
        None => {
            if a.capture.is_some() {
                return Err(CliError::Config("--capture is only available with --emulate".into()));
            }
            if !is_root() {
                return Err(CliError::Privilege("the client tunnel needs a tun interface; run as root".into()));
            }
            let mut template = TunnelConfig::new(
                IpAddr::V4(Ipv4Addr::UNSPECIFIED),
                IpAddr::V4(Ipv4Addr::UNSPECIFIED),
                config.ports[0],
            );
            template.virtual_if_name = a.tunnel_if.clone();
            template.validate().map_err(tunnel_error)?;
            live = Some(LiveDriver::new(template, config.connect_timeout, config.stall_timeout));
        }
    }
    let driver: &mut dyn PairDriver = match (&mut emulated, &mut live) {
        (Some(d), _) => d,
        (None, Some(d)) => d,
        (None, None) => unreachable!("one driver is always built"),
    };

    let manifest = RunManifest::new(
        "campaign",
        json!({
            "campaign": config,
            "emulate": profile,
            "link": profile.as_ref().map(|_| link),
        }),
        vec![seed],
    );
    let writer = ResultWriter::create(&a.out, &manifest)?;
    let stop = stop_flag()?;
    let mut sink: RecordSender = writer.sender();
    let outcome = run_campaign(&config, driver, &mut sink, Some(&stop));
    drop(sink);
    writer.finish()?;
    let summary = outcome.map_err(flowpair_error)?;

    if let (Some(path), Some(d)) = (&a.capture, &emulated) {
        let mut w = PcapWriter::new(io::BufWriter::new(fs::File::create(path)?))?;
        for p in &d.captured {
            w.write_packet(p.ts_us, &p.data)?;
        }
        w.into_inner()?;
    }
    eprintln!(
        "campaign: {} pairs ({} both ok, {} tcp only, {} udp only, {} both failed), {} skipped",
        summary.pairs_run,
        summary.both_ok,
        summary.tcp_only,
        summary.udp_only,
        summary.both_failed,
        summary.pairs_skipped
    );
    if summary.interrupted {
        return Err(CliError::Interrupted);
    }
    Ok(())
}

fn probe_specs(a: &ProbeArgs, targets: &[ProbeTarget]) -> Result<Vec<ProbeSpec>, CliError> {
    let mut specs = Vec::new();
    for t in targets {
        for &protocol in &a.protocols {
            let port = match protocol {
                ProbeProtocol::Udp => t.port.unwrap_or(a.udp_port),
                ProbeProtocol::Tcp => t.port.unwrap_or(a.tcp_port),
                ProbeProtocol::Icmp => 0,
            };
            let spec = ProbeSpec {
                port,
                initial_ttl: a.ttl,
                attempts: a.attempts,
                timeout: Duration::from_millis(a.timeout_ms),
                ..ProbeSpec::new(t.addr, protocol)
            };
            spec.validate().map_err(|e| CliError::Config(e.to_string()))?;
            specs.push(spec);
        }
    }
    Ok(specs)
}

fn prober_error(e: ProberError) -> CliError {
    match e {
        ProberError::Privilege(_) => CliError::Privilege(e.to_string()),
        ProberError::InvalidSpec(_) | ProberError::TargetList { .. } => CliError::Config(e.to_string()),
        _ => CliError::Runtime(e.to_string()),
    }
}

fn sweep_table(s: &MtuSweep) -> String {
    let mut out = format!("{}\n  size  udp   icmp  udp-fail/icmp-pass\n", s.target);
    let yes = |b: bool| if b { "ok" } else { "FAIL" };
    for r in &s.rows {
        out.push_str(&format!(
            "  {:>4}  {:<4}  {:<4}  {}\n",
            r.size,
            yes(r.udp_ok),
            yes(r.icmp_ok),
            if r.udp_fail_icmp_pass { "yes" } else { "no" }
        ));
    }
    out
}

fn probe_round<T: ProbeTransport>(
    prober: &mut Prober<T>,
    specs: &[ProbeSpec],
    sizes: Option<&[usize]>,
    out: &RecordSender,
) -> Result<(), CliError> {
    for spec in specs {
        for r in prober.probe(spec).map_err(prober_error)? {
            out.append(&r)?;
        }
    }
    if let Some(sizes) = sizes {
        let mut seen = Vec::new();
        for spec in specs.iter().filter(|s| s.protocol == ProbeProtocol::Udp) {
            if seen.contains(&spec.target) {
                continue;
            }
            seen.push(spec.target);
            let sweep = prober.mtu_sweep(spec, sizes);
            eprint!("{}", sweep_table(&sweep));
            out.append(&json!({ "sweep": sweep }))?;
        }
    }
    Ok(())
}

pub(super) fn probe(a: ProbeArgs) -> Result<(), CliError> {
    let mut targets: Vec<ProbeTarget> =
        a.targets.iter().flatten().map(|&addr| ProbeTarget { addr, port: None }).collect();
    if let Some(f) = &a.target_file {
        targets.extend(parse_targets(&read_config_file(f)?).map_err(prober_error)?);
    }
    if targets.is_empty() {
        return Err(CliError::Config("no targets: use --targets or --target-file".into()));
    }
    if a.protocols.is_empty() {
        return Err(CliError::Config("--protocols is empty".into()));
    }
    let mut specs = probe_specs(&a, &targets)?;
    if a.sizes.is_some() && !a.protocols.contains(&ProbeProtocol::Udp) {
        return Err(CliError::Config("--sizes needs udp among --protocols".into()));
    }
    let sizes = a.sizes.as_deref();
    let rounds = if a.once { Some(1) } else { a.rounds };
    let seed = a.seed;
    let manifest = RunManifest::new(
        "probe",
        json!({
            "targets": targets, "protocols": a.protocols, "ttl": a.ttl, "attempts": a.attempts,
            "timeout_ms": a.timeout_ms, "sizes": a.sizes, "rounds": rounds, "interval_s": a.interval_s,
            "emulate": a.emulate, "emulate_hops": a.emulate.as_ref().map(|_| a.emulate_hops),
        }),
        vec![seed],
    );

    // Emulated paths are built per target; live probing shares one socket set.
    let mut emulated: Vec<(Vec<ProbeSpec>, Prober<EmulatedProbePath>)> = Vec::new();
    let mut live = None;
    match &a.emulate {
        Some(p) => {
            let profile = load_profile(p)?;
            for t in &targets {
                let IpAddr::V4(v4) = t.addr else {
                    return Err(CliError::Config(format!("{}: only IPv4 targets can be emulated", t.addr)));
                };
                let mine: Vec<ProbeSpec> = specs.iter().filter(|s| s.target == t.addr).cloned().collect();
                let path = EmulatedProbePath::new(profile.clone(), v4, a.emulate_hops, 2.0, seed);
                emulated.push((mine, Prober::new(path, crate::pathlab::sim::CLIENT_ADDR)));
            }
            specs.clear();
        }
        None => {
            let transport = crate::prober::raw::RawTransport::open().map_err(prober_error)?;
            let source = match a.source {
                Some(s) => s,
                None => match route_source(targets[0].addr) {
                    Ok(IpAddr::V4(s)) => s,
                    Ok(other) => return Err(CliError::Config(format!("source {other} is not IPv4"))),
                    Err(e) => return Err(CliError::Runtime(format!("no route to {}: {e}", targets[0].addr))),
                },
            };
            live = Some(Prober::new(transport, source));
        }
    }

    let writer = ResultWriter::create(&a.out, &manifest)?;
    let out = writer.sender();
    let stop = stop_flag()?;
    let mut round = 0u64;
    let result = loop {
        let r = match &mut live {
            Some(p) => probe_round(p, &specs, sizes, &out),
            None => emulated.iter_mut().try_for_each(|(s, p)| probe_round(p, s, sizes, &out)),
        };
        if let Err(e) = r {
            break Err(e);
        }
        round += 1;
        if rounds.is_some_and(|n| round >= n) {
            break Ok(());
        }
        sleep_unless_stopped(Duration::from_secs(a.interval_s), &stop);
        if stop.load(Ordering::Relaxed) {
            break Err(CliError::Interrupted);
        }
    };
    drop(out);
    writer.finish()?;
    result
}

fn unknown_scenario(name: &str) -> CliError {
    let names: Vec<String> = bundled().into_iter().map(|s| s.name).collect();
    CliError::Config(format!("unknown scenario {name:?}; available: {}", names.join(", ")))
}

fn lab_scenarios(a: &LabArgs) -> Result<Vec<Scenario>, CliError> {
    let mut out = Vec::new();
    if a.all {
        out.extend(bundled());
    }
    for name in &a.scenarios {
        out.push(bundled_scenario(name).ok_or_else(|| unknown_scenario(name))?);
    }
    if let Some(f) = &a.scenario_file {
        let text = read_config_file(f)?;
        let parsed: Vec<Scenario> = match serde_json::from_str::<Vec<Scenario>>(&text) {
            Ok(v) => v,
            Err(_) => vec![serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", f.display())))?],
        };
        out.extend(parsed);
    }
    if out.is_empty() {
        let names: Vec<String> = bundled().into_iter().map(|s| s.name).collect();
        return Err(CliError::Config(format!("no scenario given; available: {}", names.join(", "))));
    }
    if let Some(p) = &a.profile {
        let profile = load_profile(&p.to_string_lossy())?;
        out.iter_mut().for_each(|s| s.profile = profile.clone());
    }
    if let Some(seed) = a.seed {
        out.iter_mut().for_each(|s| s.seed = seed);
    }
    Ok(out)
}

pub(super) fn lab(a: LabArgs) -> Result<(), CliError> {
    if a.list {
        for s in bundled() {
            println!("{:<20} {}", s.name, s.description);
        }
        return Ok(());
    }
    let scenarios = lab_scenarios(&a)?;
    for s in &scenarios {
        s.validate().map_err(lab_error)?;
    }
    let manifest =
        RunManifest::new("lab", json!({ "scenarios": scenarios }), scenarios.iter().map(|s| s.seed).collect());
    let writer = ResultWriter::create(&a.out, &manifest)?;
    let mut failed = Vec::new();
    for s in &scenarios {
        let report = match run_scenario(s) {
            Ok(r) => r,
            Err(e) => {
                writer.finish()?;
                return Err(lab_error(e));
            }
        };
        writer.append(&report)?;
        eprintln!("{}: {}", s.name, if report.passed() { "PASS" } else { "FAIL" });
        for c in &report.checks {
            eprintln!("  [{}] {}: {}", if c.passed { "pass" } else { "FAIL" }, c.name, c.detail);
        }
        if !report.passed() {
            failed.push(s.name.clone());
        }
    }
    writer.finish()?;
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::ChecksFailed(format!("checks failed in: {}", failed.join(", "))))
    }
}

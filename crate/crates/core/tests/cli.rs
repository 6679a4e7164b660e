//! The `wireimage` binary, driven as a user would. Nothing here needs
//! privileges: campaigns and probes run against the impairment lab.

use std::fs;
use std::net::TcpListener;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn wireimage(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_wireimage")).args(args).output().expect("spawn wireimage")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn jsonl(path: &Path) -> Vec<Value> {
    fs::read_to_string(path).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn lab_scenario_writes_passing_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("lab.jsonl");
    let o = wireimage(&["lab", "udp-blackhole", "race-udp-blackhole", "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let lines = jsonl(&out);
    assert_eq!(lines.len(), 3);
    assert_eq!(lines[0]["manifest"]["command"], "lab");
    for report in &lines[1..] {
        let checks = report["checks"].as_array().unwrap();
        assert!(!checks.is_empty());
        assert!(checks.iter().all(|c| c["passed"] == true), "{report}");
    }
    assert!(stderr(&o).contains("PASS"));
}

#[test]
fn lab_list_and_unknown_scenario() {
    let o = wireimage(&["lab", "--list"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&o.stdout).contains("udp-rate-limit"));

    let o = wireimage(&["lab", "no-such-scenario"]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("no-such-scenario") && err.contains("neutral"), "{err}");
}

#[test]
fn lab_scenario_file_with_failing_expectation_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    // A shaper far above the link rate never engages, so no shaping shows.
    let file = dir.path().join("s.json");
    fs::write(
        &file,
        r#"{"name": "loose-shaper", "profile": {"udp_rate_limit": 1000000000},
            "workload": {"kind": "pairs", "schedule": [[1, 3]]}}"#,
    )
    .unwrap();
    let o = wireimage(&["lab", "--scenario-file", s(&file)]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    assert!(stderr(&o).contains("FAIL"));
}

fn emulated_campaign(out: &Path, seed: &str) -> Output {
    wireimage(&[
        "campaign",
        "--emulate",
        "none",
        "--targets",
        "198.51.100.10",
        "--ports",
        "53,443",
        "--sizes-iw",
        "1,3",
        "--pairs",
        "2",
        "--seed",
        seed,
        "--source",
        "vp1",
        "--out",
        s(out),
    ])
}

#[test]
fn emulated_campaign_manifest_first_and_one_line_per_pair() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("c.jsonl");
    let o = emulated_campaign(&out, "7");
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let lines = jsonl(&out);
    assert_eq!(lines.len(), 1 + 2 * 2 * 2);
    let m = &lines[0]["manifest"];
    assert_eq!(m["seeds"][0], 7);
    assert!(m["finished_at"].is_string());
    assert!(lines[1..].iter().all(|l| l.get("manifest").is_none()));
    let mut ports: Vec<u64> = lines[1..].iter().map(|l| l["port"].as_u64().unwrap()).collect();
    ports.dedup();
    assert_eq!(ports, [53, 443]);
    for l in &lines[1..] {
        assert_eq!(l["src"], "vp1");
        assert_eq!(l["tcp"]["success"], true);
        assert_eq!(l["udp"]["success"], true);
        assert_eq!(l["tcp"]["bytes"], l["udp"]["bytes"]);
    }
}

#[test]
fn emulated_campaign_is_deterministic_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    for (p, seed) in [(&a, "11"), (&b, "11"), (&c, "12")] {
        assert_eq!(emulated_campaign(p, seed).status.code(), Some(0));
    }
    let records = |p: &Path| jsonl(p)[1..].to_vec();
    assert_eq!(records(&a), records(&b));
    assert_ne!(records(&a), records(&c));
}

#[test]
fn campaign_results_round_trip_through_analyze() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("c.jsonl");
    assert_eq!(emulated_campaign(&out, "3").status.code(), Some(0));
    let lab = dir.path().join("lab.jsonl");
    assert_eq!(wireimage(&["lab", "probe-neutral", "--out", s(&lab)]).status.code(), Some(0));
    let res = dir.path().join("res");
    let o = wireimage(&["analyze", s(&out), s(&lab), "--out-dir", s(&res)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let stats: Value = serde_json::from_str(&fs::read_to_string(res.join("stats.json")).unwrap()).unwrap();
    assert_eq!(stats["pairs"], 8);
    assert_eq!(stats["manifests"], 2);
    assert_eq!(stats["reports"], 1);
    assert_eq!(stats["malformed"], 0);
    let paths = fs::read_to_string(res.join("paths.csv")).unwrap();
    assert_eq!(
        paths.lines().nth(1).unwrap().split(',').take(5).collect::<Vec<_>>(),
        ["vp1", "198.51.100.10", "8", "8", "0"]
    );
}

#[test]
fn campaign_capture_is_a_pcap_of_the_pairs() {
    let dir = tempfile::tempdir().unwrap();
    let (out, pcap) = (dir.path().join("c.jsonl"), dir.path().join("c.pcap"));
    let o = wireimage(&[
        "campaign",
        "--emulate",
        "none",
        "--targets",
        "198.51.100.10",
        "--sizes-iw",
        "1",
        "--pairs",
        "1",
        "--seed",
        "1",
        "--out",
        s(&out),
        "--capture",
        s(&pcap),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let bytes = fs::read(&pcap).unwrap();
    assert_eq!(&bytes[..4], &0xa1b2_c3d4u32.to_le_bytes());
    // Walk the records: every one is a raw IPv4 packet of the stated length.
    let (mut at, mut n) = (24, 0);
    while at < bytes.len() {
        let len = u32::from_le_bytes(bytes[at + 8..at + 12].try_into().unwrap()) as usize;
        let pkt = &bytes[at + 16..at + 16 + len];
        assert_eq!(pkt[0] >> 4, 4);
        assert_eq!(usize::from(u16::from_be_bytes([pkt[2], pkt[3]])), len);
        at += 16 + len;
        n += 1;
    }
    assert_eq!(at, bytes.len());
    assert!(n > 10);
}

#[test]
fn campaign_configuration_errors_exit_two() {
    let o = wireimage(&["campaign", "--emulate", "none"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("destinations"));
    let o = wireimage(&["campaign", "--emulate", "none", "--targets", "x", "--ports", "0"]);
    assert_eq!(o.status.code(), Some(2));
    let o = wireimage(&["campaign", "--bogus-flag"]);
    assert_eq!(o.status.code(), Some(2));
    let o = wireimage(&["campaign", "--emulate", "/nonexistent/profile", "--targets", "x"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn analyze_empty_and_malformed_input() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty.jsonl");
    fs::write(&empty, "").unwrap();
    let o = wireimage(&["analyze", s(&empty), "--out-dir", s(&dir.path().join("e"))]);
    assert_eq!(o.status.code(), Some(0));
    let summary = fs::read_to_string(dir.path().join("e/summary.csv")).unwrap();
    assert!(summary.lines().skip(1).all(|l| l.ends_with(",0,")), "{summary}");

    let bad = dir.path().join("bad.jsonl");
    fs::write(&bad, "{\"pair_id\": 1\n[]\n\n").unwrap();
    let o = wireimage(&["analyze", s(&bad), "--out-dir", s(&dir.path().join("b"))]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stderr(&o).contains("2 malformed"), "{}", stderr(&o));

    let o = wireimage(&["analyze", s(&dir.path().join("missing.jsonl")), "--out-dir", s(&dir.path().join("m"))]);
    assert_ne!(o.status.code(), Some(0));
}

#[test]
fn emulated_probe_once_with_sweep() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("p.jsonl");
    let o = wireimage(&[
        "probe",
        "--emulate",
        "none",
        "--targets",
        "198.51.100.20",
        "--once",
        "--sizes",
        "72,572,1454",
        "--out",
        s(&out),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let lines = jsonl(&out);
    let probes: Vec<&Value> = lines.iter().filter(|l| l.get("outcome").is_some()).collect();
    assert_eq!(probes.len(), 9);
    assert!(probes.iter().all(|p| p["outcome"] == "target-response" && p["initial_ttl"] == 199));
    let sweep = lines.iter().find_map(|l| l.get("sweep")).unwrap();
    assert_eq!(sweep["rows"].as_array().unwrap().len(), 3);
    assert_eq!(sweep["udp_fail_icmp_pass"], false);
}

#[test]
fn emulated_probe_flags_udp_blocking_from_profile_file() {
    let dir = tempfile::tempdir().unwrap();
    let profile = dir.path().join("blocked.conf");
    fs::write(&profile, "# UDP dropped, everything else clean\nudp_block = true\n").unwrap();
    let out = dir.path().join("p.jsonl");
    let o = wireimage(&[
        "probe",
        "--emulate",
        s(&profile),
        "--targets",
        "198.51.100.20",
        "--once",
        "--protocols",
        "udp,icmp",
        "--sizes",
        "72,572,1454",
        "--out",
        s(&out),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let lines = jsonl(&out);
    let sweep = lines.iter().find_map(|l| l.get("sweep")).unwrap();
    let flagged: Vec<u64> = sweep["rows"]
        .as_array()
        .unwrap()
        .iter()
        .filter(|r| r["udp_fail_icmp_pass"] == true)
        .map(|r| r["size"].as_u64().unwrap())
        .collect();
    assert_eq!(flagged, [72, 572, 1454]);
    let udp: Vec<&Value> = lines.iter().filter(|l| l["protocol"] == "udp").collect();
    assert!(!udp.is_empty() && udp.iter().all(|p| p["outcome"] == "timeout"));
}

#[test]
fn serve_on_busy_port_names_it() {
    let taken = TcpListener::bind("127.0.0.1:0").unwrap();
    let port = taken.local_addr().unwrap().port().to_string();
    let o = wireimage(&["serve", "--bind", "127.0.0.1", "--ports", &port]);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
    assert!(stderr(&o).contains(&port), "{}", stderr(&o));
}

#[test]
fn help_exits_zero() {
    for sub in ["serve", "campaign", "analyze", "probe", "lab"] {
        let o = wireimage(&[sub, "--help"]);
        assert_eq!(o.status.code(), Some(0), "{sub}");
    }
}

//! `analyze`: reads result files and writes aggregate tables.
//!
//! Outputs in `--out-dir`:
//!
//! | file | columns |
//! |---|---|
//! | `paths.csv` | src, dst, n_pairs, n_successful, conn_bias, median_tp_bias, median_rtt_bias |
//! | `matrix_conn_bias.csv`, `matrix_tp_bias.csv`, `matrix_rtt_bias.csv` | `src\dst` then one column per node; empty cell = not measured |
//! | `summary.csv` | dimension, side, threshold, n_flows, median_bias |
//! | `cdf_tp_bias.csv`, `cdf_rtt_bias.csv` | value, fraction |
//! | `matrix.json`, `summary.json`, `cdf.json`, `stats.json` | the same data as JSON, plus line counts |
//!
//! Pair records come from campaign files and from lab reports. Lines that
//! are not JSON or not a known record are skipped and counted.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{self, BufRead, BufReader};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{AnalyzeArgs, CliError, RunManifest};
use crate::flowpair::{PairResult, ServerStats};
use crate::metrics::{aggregate_matrix, export_cdf, split_summary, CdfPoint, GroupedSummary, MatrixMetric, PathMatrix};
use crate::pathlab::HarnessReport;
use crate::prober::{MtuSweep, ProbeResult};

/// One parsed result line.
#[derive(Debug, Clone)]
pub enum Record {
    Manifest(Box<RunManifest>),
    Pair(Box<PairResult>),
    Probe(Box<ProbeResult>),
    Sweep(Box<MtuSweep>),
    Report(Box<HarnessReport>),
    Server(ServerStats),
}

fn field<T: serde::de::DeserializeOwned>(mut v: Value, key: &str) -> Option<T> {
    serde_json::from_value(v.get_mut(key)?.take()).ok()
}

impl Record {
    /// `None` for anything that is not a well-formed known record.
    pub fn parse(line: &str) -> Option<Record> {
        let v: Value = serde_json::from_str(line).ok()?;
        let obj = v.as_object()?;
        let has = |k: &str| obj.contains_key(k);
        // Reports embed sweeps and pairs, so they are recognized first.
        if has("scenario") && has("checks") {
            serde_json::from_value(v).ok().map(|r| Record::Report(Box::new(r)))
        } else if has("manifest") {
            field(v, "manifest").map(|m| Record::Manifest(Box::new(m)))
        } else if has("sweep") {
            field(v, "sweep").map(|s| Record::Sweep(Box::new(s)))
        } else if has("server_stats") {
            field(v, "server_stats").map(Record::Server)
        } else if has("pair_id") {
            serde_json::from_value(v).ok().map(|p| Record::Pair(Box::new(p)))
        } else if has("outcome") && has("attempt") {
            serde_json::from_value(v).ok().map(|p| Record::Probe(Box::new(p)))
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AnalyzeStats {
    pub files: usize,
    pub lines: u64,
    pub blank: u64,
    pub manifests: u64,
    pub pairs: u64,
    pub probes: u64,
    pub sweeps: u64,
    pub reports: u64,
    pub server_stats: u64,
    pub malformed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalyzeOutput {
    pub matrix: PathMatrix,
    pub grouped: Vec<GroupedSummary>,
    pub cdf_tp_bias: Vec<CdfPoint>,
    pub cdf_rtt_bias: Vec<CdfPoint>,
    pub stats: AnalyzeStats,
}

fn read_regions(path: &Path) -> io::Result<BTreeMap<String, String>> {
    let text = fs::read_to_string(path)?;
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let mut it = line.split_whitespace();
        match (it.next(), it.next(), it.next()) {
            (Some(node), Some(region), None) => {
                out.insert(node.to_string(), region.to_string());
            }
            _ => {
                return Err(io::Error::new(
                    io::ErrorKind::InvalidData,
                    format!("{}:{}: expected `node region`", path.display(), i + 1),
                ))
            }
        }
    }
    Ok(out)
}

pub fn analyze_files(
    inputs: &[PathBuf],
    tp_threshold: f64,
    rtt_threshold: f64,
    regions: &BTreeMap<String, String>,
    region_order: &[String],
) -> io::Result<AnalyzeOutput> {
    let mut stats = AnalyzeStats { files: inputs.len(), ..Default::default() };
    let mut pairs: Vec<PairResult> = Vec::new();
    for path in inputs {
        let reader = BufReader::new(
            fs::File::open(path).map_err(|e| io::Error::new(e.kind(), format!("{}: {e}", path.display())))?,
        );
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            stats.lines += 1;
            if line.trim().is_empty() {
                stats.blank += 1;
                continue;
            }
            match Record::parse(&line) {
                Some(Record::Manifest(_)) => stats.manifests += 1,
                Some(Record::Pair(p)) => {
                    stats.pairs += 1;
                    pairs.push(*p);
                }
                Some(Record::Probe(_)) => stats.probes += 1,
                Some(Record::Sweep(_)) => stats.sweeps += 1,
                Some(Record::Server(_)) => stats.server_stats += 1,
                Some(Record::Report(r)) => {
                    stats.reports += 1;
                    pairs.extend(r.pairs);
                }
                None => {
                    stats.malformed += 1;
                    log::warn!("{}:{}: skipping malformed line", path.display(), i + 1);
                }
            }
        }
    }
    let tp: Vec<f64> = pairs.iter().filter_map(|p| p.tp_bias).collect();
    let rtt: Vec<f64> = pairs.iter().filter_map(|p| p.rtt_bias).collect();
    Ok(AnalyzeOutput {
        matrix: aggregate_matrix(&pairs, regions, region_order),
        grouped: split_summary(&pairs, tp_threshold, rtt_threshold),
        cdf_tp_bias: export_cdf(&tp),
        cdf_rtt_bias: export_cdf(&rtt),
        stats,
    })
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn matrix_csv(m: &PathMatrix, metric: MatrixMetric) -> String {
    let mut out = String::from("src\\dst");
    for n in &m.nodes {
        out.push(',');
        out.push_str(&csv_field(n));
    }
    out.push('\n');
    for (src, row) in m.nodes.iter().zip(m.grid(metric)) {
        out.push_str(&csv_field(src));
        for v in row {
            out.push(',');
            out.push_str(&cell(v));
        }
        out.push('\n');
    }
    out
}

pub fn paths_csv(m: &PathMatrix) -> String {
    let mut out = String::from("src,dst,n_pairs,n_successful,conn_bias,median_tp_bias,median_rtt_bias\n");
    for p in &m.paths {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            csv_field(&p.src),
            csv_field(&p.dst),
            p.n_pairs,
            p.n_successful,
            p.conn_bias,
            cell(p.median_tp_bias),
            cell(p.median_rtt_bias)
        );
    }
    out
}

pub fn summary_csv(g: &[GroupedSummary]) -> String {
    let mut out = String::from("dimension,side,threshold,n_flows,median_bias\n");
    for s in g {
        let dim = serde_json::to_value(s.dimension).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default();
        let side = serde_json::to_value(s.side).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default();
        let _ = writeln!(out, "{dim},{side},{},{},{}", s.threshold, s.n_flows, cell(s.median_bias));
    }
    out
}

pub fn cdf_csv(points: &[CdfPoint]) -> String {
    let mut out = String::from("value,fraction\n");
    for p in points {
        let _ = writeln!(out, "{},{}", p.value, p.fraction);
    }
    out
}

pub fn write_outputs(out: &AnalyzeOutput, dir: &Path) -> io::Result<()> {
    fs::create_dir_all(dir)?;
    let files: [(&str, String); 11] = [
        ("paths.csv", paths_csv(&out.matrix)),
        ("matrix_conn_bias.csv", matrix_csv(&out.matrix, MatrixMetric::ConnBias)),
        ("matrix_tp_bias.csv", matrix_csv(&out.matrix, MatrixMetric::MedianTpBias)),
        ("matrix_rtt_bias.csv", matrix_csv(&out.matrix, MatrixMetric::MedianRttBias)),
        ("summary.csv", summary_csv(&out.grouped)),
        ("cdf_tp_bias.csv", cdf_csv(&out.cdf_tp_bias)),
        ("cdf_rtt_bias.csv", cdf_csv(&out.cdf_rtt_bias)),
        ("matrix.json", pretty(&out.matrix)?),
        ("summary.json", pretty(&out.grouped)?),
        ("cdf.json", pretty(&serde_json::json!({ "tp_bias": out.cdf_tp_bias, "rtt_bias": out.cdf_rtt_bias }))?),
        ("stats.json", pretty(&out.stats)?),
    ];
    for (name, body) in files {
        fs::write(dir.join(name), body)?;
    }
    Ok(())
}

fn pretty<T: Serialize>(v: &T) -> io::Result<String> {
    serde_json::to_string_pretty(v).map(|s| s + "\n").map_err(io::Error::other)
}

pub(super) fn cmd_analyze(args: AnalyzeArgs) -> Result<(), CliError> {
    if !(args.tp_threshold.is_finite() && args.rtt_threshold.is_finite()) {
        return Err(CliError::Config("thresholds must be finite".into()));
    }
    let regions = match &args.regions {
        Some(p) => read_regions(p).map_err(|e| CliError::Config(e.to_string()))?,
        None => BTreeMap::new(),
    };
    let order = args.region_order.clone().unwrap_or_default();
    for p in &args.inputs {
        if !p.is_file() {
            return Err(CliError::Config(format!("input {} is not a readable file", p.display())));
        }
    }
    let out = analyze_files(&args.inputs, args.tp_threshold, args.rtt_threshold, &regions, &order)?;
    write_outputs(&out, &args.out_dir)?;
    let s = &out.stats;
    eprintln!(
        "analyze: {} lines from {} file(s): {} pairs, {} probes, {} reports, {} malformed skipped",
        s.lines, s.files, s.pairs, s.probes, s.reports, s.malformed
    );
    Ok(())
}

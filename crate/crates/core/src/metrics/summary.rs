//! Aggregations over many pair results: per-path matrix, threshold split
//! and CDF series.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use super::connectivity::conn_bias;
use crate::flowpair::PairResult;

/// Median; the mean of the two central values for even-sized input.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    Some(if v.len().is_multiple_of(2) { (v[mid - 1] + v[mid]) / 2.0 } else { v[mid] })
}

/// Per (source, destination) aggregate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathSummary {
    pub src: String,
    pub dst: String,
    pub conn_bias: f64,
    pub median_tp_bias: Option<f64>,
    pub median_rtt_bias: Option<f64>,
    pub n_pairs: usize,
    pub n_successful: usize,
}

/// Path summaries plus the node order used for grid output.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PathMatrix {
    pub nodes: Vec<String>,
    pub paths: Vec<PathSummary>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatrixMetric {
    ConnBias,
    MedianTpBias,
    MedianRttBias,
}

impl PathMatrix {
    pub fn get(&self, src: &str, dst: &str) -> Option<&PathSummary> {
        self.paths.iter().find(|p| p.src == src && p.dst == dst)
    }

    /// Square grid indexed `[src][dst]` in `nodes` order; `None` where a path
    /// was not measured or has no value.
    pub fn grid(&self, metric: MatrixMetric) -> Vec<Vec<Option<f64>>> {
        let index: HashMap<&str, usize> = self.nodes.iter().enumerate().map(|(i, n)| (n.as_str(), i)).collect();
        let mut grid = vec![vec![None; self.nodes.len()]; self.nodes.len()];
        for p in &self.paths {
            let value = match metric {
                MatrixMetric::ConnBias => Some(p.conn_bias),
                MatrixMetric::MedianTpBias => p.median_tp_bias,
                MatrixMetric::MedianRttBias => p.median_rtt_bias,
            };
            grid[index[p.src.as_str()]][index[p.dst.as_str()]] = value;
        }
        grid
    }
}

/// Groups results per (src, dst). Nodes are ordered by the position of their
/// region in `region_order`, then by name; nodes without a region come last.
pub fn aggregate_matrix(
    results: &[PairResult],
    regions: &BTreeMap<String, String>,
    region_order: &[String],
) -> PathMatrix {
    let mut by_path: BTreeMap<(String, String), Vec<&PairResult>> = BTreeMap::new();
    for r in results {
        by_path.entry((r.src.clone(), r.spec.destination.clone())).or_default().push(r);
    }
    let region_rank =
        |node: &str| regions.get(node).and_then(|reg| region_order.iter().position(|r| r == reg)).unwrap_or(usize::MAX);
    let mut nodes: Vec<String> = by_path.keys().flat_map(|(s, d)| [s.clone(), d.clone()]).collect();
    nodes.sort_by(|a, b| region_rank(a).cmp(&region_rank(b)).then_with(|| a.cmp(b)));
    nodes.dedup();

    let paths = by_path
        .into_iter()
        .map(|((src, dst), rs)| {
            let attempts: Vec<_> = rs.iter().map(|r| r.attempt()).collect();
            let tp: Vec<f64> = rs.iter().filter_map(|r| r.tp_bias).collect();
            let rtt: Vec<f64> = rs.iter().filter_map(|r| r.rtt_bias).collect();
            PathSummary {
                src,
                dst,
                conn_bias: conn_bias(&attempts).expect("every path has at least one result"),
                median_tp_bias: median(&tp),
                median_rtt_bias: median(&rtt),
                n_pairs: rs.len(),
                n_successful: rs.iter().filter(|r| r.tcp.success && r.udp.success).count(),
            }
        })
        .collect();
    PathMatrix { nodes, paths }
}

pub const DEFAULT_TP_THRESHOLD_KBPS: f64 = 200.0;
pub const DEFAULT_RTT_THRESHOLD_MS: f64 = 50.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dimension {
    Throughput,
    Latency,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    /// Native-TCP value at or below the threshold.
    Below,
    Above,
}

/// One cell pair of a throughput/latency split table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupedSummary {
    pub dimension: Dimension,
    pub side: Side,
    pub threshold: f64,
    pub n_flows: usize,
    pub median_bias: Option<f64>,
}

/// Splits successful pairs by the native TCP flow's throughput (for
/// `tp_bias`) and initial RTT (for `rtt_bias`). Values exactly at a
/// threshold go to the lower group.
pub fn split_summary(results: &[PairResult], tp_threshold: f64, rtt_threshold: f64) -> Vec<GroupedSummary> {
    let mut tp = [Vec::new(), Vec::new()];
    let mut rtt = [Vec::new(), Vec::new()];
    for r in results {
        if let Some(b) = r.tp_bias {
            tp[usize::from(r.tcp.throughput_kbps > tp_threshold)].push(b);
        }
        if let (Some(b), Some(t)) = (r.rtt_bias, r.tcp.initial_rtt_ms) {
            rtt[usize::from(t > rtt_threshold)].push(b);
        }
    }
    let mut out = Vec::with_capacity(4);
    for (dimension, threshold, groups) in
        [(Dimension::Throughput, tp_threshold, &tp), (Dimension::Latency, rtt_threshold, &rtt)]
    {
        for (side, values) in [(Side::Below, &groups[0]), (Side::Above, &groups[1])] {
            out.push(GroupedSummary { dimension, side, threshold, n_flows: values.len(), median_bias: median(values) });
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CdfPoint {
    pub value: f64,
    pub fraction: f64,
}

/// Empirical CDF: one point per distinct value with the fraction of samples
/// less than or equal to it.
pub fn export_cdf(values: &[f64]) -> Vec<CdfPoint> {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| !x.is_nan()).collect();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    let mut out: Vec<CdfPoint> = Vec::new();
    for (i, x) in v.iter().enumerate() {
        let fraction = (i + 1) as f64 / n;
        match out.last_mut() {
            Some(last) if last.value == *x => last.fraction = fraction,
            _ => out.push(CdfPoint { value: *x, fraction }),
        }
    }
    out
}

/// Smallest value whose cumulative fraction reaches `q`.
pub fn cdf_quantile(cdf: &[CdfPoint], q: f64) -> Option<f64> {
    cdf.iter().find(|p| p.fraction >= q - 1e-12).map(|p| p.value)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flowpair::{FailureReason, FlowResult, FlowSpec, PairTimestamps};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn pair(src: &str, dst: &str, tcp: (f64, f64), udp: (f64, f64)) -> PairResult {
        let spec = FlowSpec::new(dst, 443, 1);
        let bytes = spec.payload_bytes().unwrap();
        let flow = |(tp, rtt): (f64, f64)| {
            if tp > 0.0 {
                FlowResult::succeeded(bytes, bytes as f64 / 1000.0 / tp, rtt, Some(0.0))
            } else {
                FlowResult::failed(FailureReason::ConnectTimeout, 0, 10.0, None)
            }
        };
        PairResult::new("id", src, spec, flow(tcp), flow(udp), PairTimestamps::default())
    }

    #[test]
    fn median_rules() {
        assert_eq!(median(&[]), None);
        assert_eq!(median(&[-1.0, 0.0, 1.0]), Some(0.0));
        assert_eq!(median(&[4.0, 1.0, 3.0, 2.0]), Some(2.5));
    }

    #[test]
    fn matrix_single_and_multi_path() {
        let rs = vec![
            pair("a", "b", (100.0, 10.0), (99.0, 10.0)),
            pair("a", "b", (100.0, 10.0), (100.0, 10.0)),
            pair("a", "b", (100.0, 10.0), (101.0, 10.0)),
            pair("b", "a", (100.0, 10.0), (50.0, 20.0)),
        ];
        let m = aggregate_matrix(&rs, &BTreeMap::new(), &[]);
        assert_eq!(m.paths.len(), 2);
        assert_eq!(m.get("a", "b").unwrap().median_tp_bias, Some(0.0));
        assert_eq!(m.get("a", "b").unwrap().n_pairs, 3);
        assert_eq!(m.get("b", "a").unwrap().median_tp_bias, Some(-100.0));
        assert_eq!(m.get("b", "a").unwrap().median_rtt_bias, Some(-100.0));
    }

    #[test]
    fn matrix_orders_by_region() {
        let rs = vec![pair("zz", "aa", (1.0, 1.0), (1.0, 1.0)), pair("mm", "aa", (1.0, 1.0), (1.0, 1.0))];
        let regions: BTreeMap<String, String> = [("zz", "eu"), ("aa", "na"), ("mm", "eu")]
            .into_iter()
            .map(|(a, b)| (a.to_string(), b.to_string()))
            .collect();
        let m = aggregate_matrix(&rs, &regions, &["eu".to_string(), "na".to_string()]);
        assert_eq!(m.nodes, vec!["mm", "zz", "aa"]);
        let g = m.grid(MatrixMetric::ConnBias);
        assert_eq!(g[1][2], Some(0.0));
        assert_eq!(g[2][0], None);
    }

    #[test]
    fn full_mesh_with_udp_blocked_node() {
        let nodes = ["n1", "n2", "n3"];
        let mut rs = Vec::new();
        for s in nodes {
            for d in nodes {
                if s == d {
                    continue;
                }
                for _ in 0..4 {
                    let blocked = s == "n2" || d == "n2";
                    let udp = if blocked { (0.0, 0.0) } else { (100.0, 10.0) };
                    rs.push(pair(s, d, (100.0, 10.0), udp));
                }
            }
        }
        let m = aggregate_matrix(&rs, &BTreeMap::new(), &[]);
        let g = m.grid(MatrixMetric::ConnBias);
        let i = m.nodes.iter().position(|n| n == "n2").unwrap();
        for j in 0..3 {
            if j != i {
                assert_eq!(g[i][j], Some(-1.0));
                assert_eq!(g[j][i], Some(-1.0));
            }
        }
        assert_eq!(m.get("n1", "n3").unwrap().conn_bias, 0.0);
    }

    #[test]
    fn split_tie_goes_low() {
        let rs = vec![pair("a", "b", (200.0, 50.0), (200.0, 50.0)), pair("a", "b", (100.0, 10.0), (110.0, 10.0))];
        let g = split_summary(&rs, DEFAULT_TP_THRESHOLD_KBPS, DEFAULT_RTT_THRESHOLD_MS);
        assert_eq!(g[0].side, Side::Below);
        assert_eq!(g[0].n_flows, 2);
        assert_eq!(g[1].n_flows, 0);
        assert_eq!(g[1].median_bias, None);
        assert_eq!(g[2].n_flows, 2);
        assert_eq!(g[3].n_flows, 0);
    }

    #[test]
    fn split_straddling_latency_fixture() {
        // tcp rtt / udp rtt -> rtt_bias
        let rows = [
            (10.0, 10.0),  // 0
            (20.0, 25.0),  // -25
            (40.0, 32.0),  // +25
            (60.0, 60.0),  // 0
            (80.0, 100.0), // -25
            (100.0, 50.0), // +100
        ];
        let rs: Vec<_> = rows.iter().map(|&(t, u)| pair("a", "b", (100.0, t), (100.0, u))).collect();
        let g = split_summary(&rs, 200.0, 50.0);
        let lat: Vec<_> = g.iter().filter(|s| s.dimension == Dimension::Latency).collect();
        assert_eq!((lat[0].n_flows, lat[1].n_flows), (3, 3));
        assert_eq!(lat[0].median_bias, Some(0.0));
        assert_eq!(lat[1].median_bias, Some(0.0));
    }

    #[test]
    fn cdf_examples() {
        let c = export_cdf(&[0.0, 0.0, 0.0, 0.0]);
        assert_eq!(c, vec![CdfPoint { value: 0.0, fraction: 1.0 }]);
        let c = export_cdf(&[10.0, -10.0, 0.0]);
        let f: Vec<f64> = c.iter().map(|p| p.fraction).collect();
        assert_eq!(f, vec![1.0 / 3.0, 2.0 / 3.0, 1.0]);
        assert!(export_cdf(&[]).is_empty());
    }

    #[test]
    fn cdf_quantile_matches_sort() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let v: Vec<f64> = (0..1000).map(|_| rng.random_range(-50.0..50.0)).collect();
        let c = export_cdf(&v);
        let mut sorted = v.clone();
        sorted.sort_by(f64::total_cmp);
        assert_eq!(cdf_quantile(&c, 0.99), Some(sorted[989]));
    }

    proptest! {
        #[test]
        fn cdf_is_valid(v in proptest::collection::vec(-1e3f64..1e3, 1..200)) {
            let c = export_cdf(&v);
            prop_assert!(c.windows(2).all(|w| w[0].value < w[1].value && w[0].fraction < w[1].fraction));
            prop_assert_eq!(c.last().unwrap().fraction, 1.0);
        }
    }
}

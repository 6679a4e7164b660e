use serde::{Deserialize, Serialize};

use super::MetricsError;

/// Relative throughput difference in percent, normalized by the smaller of
/// the two. Positive values mean the UDP-encapsulated flow was faster.
pub fn tp_bias(tp_udp: f64, tp_tcp: f64) -> Result<f64, MetricsError> {
    check_positive("tp_udp", tp_udp)?;
    check_positive("tp_tcp", tp_tcp)?;
    Ok((tp_udp - tp_tcp) / tp_tcp.min(tp_udp) * 100.0)
}

/// Relative initial-RTT difference in percent, normalized by the smaller of
/// the two. Positive values mean the UDP-encapsulated flow had the lower RTT.
pub fn rtt_bias(rtt_tcp: f64, rtt_udp: f64) -> Result<f64, MetricsError> {
    check_positive("rtt_tcp", rtt_tcp)?;
    check_positive("rtt_udp", rtt_udp)?;
    Ok((rtt_tcp - rtt_udp) / rtt_tcp.min(rtt_udp) * 100.0)
}

fn check_positive(name: &'static str, v: f64) -> Result<(), MetricsError> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(MetricsError::NonPositive { name, value: v })
    }
}

/// The four per-pair quantities both bias formulas read.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasSample {
    pub pair_id: String,
    /// kB/s
    pub tp_udp: f64,
    /// kB/s
    pub tp_tcp: f64,
    /// ms
    pub rtt_udp: f64,
    /// ms
    pub rtt_tcp: f64,
}

impl BiasSample {
    pub fn tp_bias(&self) -> Result<f64, MetricsError> {
        tp_bias(self.tp_udp, self.tp_tcp)
    }

    pub fn rtt_bias(&self) -> Result<f64, MetricsError> {
        rtt_bias(self.rtt_tcp, self.rtt_udp)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn throughput_examples() {
        assert_eq!(tp_bias(100.0, 100.0).unwrap(), 0.0);
        assert!((tp_bias(110.0, 100.0).unwrap() - 10.0).abs() < 1e-12);
        assert!((tp_bias(100.0, 110.0).unwrap() + 10.0).abs() < 1e-12);
    }

    #[test]
    fn rtt_examples() {
        assert_eq!(rtt_bias(50.0, 50.0).unwrap(), 0.0);
        assert!((rtt_bias(50.0, 40.0).unwrap() - 25.0).abs() < 1e-12);
        assert!((rtt_bias(40.0, 50.0).unwrap() + 25.0).abs() < 1e-12);
    }

    #[test]
    fn non_positive_inputs_rejected() {
        assert!(tp_bias(0.0, 1.0).is_err());
        assert!(tp_bias(1.0, -1.0).is_err());
        assert!(rtt_bias(f64::NAN, 1.0).is_err());
        assert!(rtt_bias(1.0, 0.0).is_err());
    }

    proptest! {
        #[test]
        fn antisymmetric(a in 1e-3f64..1e6, b in 1e-3f64..1e6) {
            prop_assert!((tp_bias(a, b).unwrap() + tp_bias(b, a).unwrap()).abs() <= 1e-9 * tp_bias(a, b).unwrap().abs().max(1.0));
            prop_assert!((rtt_bias(a, b).unwrap() + rtt_bias(b, a).unwrap()).abs() <= 1e-9 * rtt_bias(a, b).unwrap().abs().max(1.0));
        }

        #[test]
        fn zero_at_parity(x in 1e-6f64..1e9) {
            prop_assert_eq!(tp_bias(x, x).unwrap(), 0.0);
            prop_assert_eq!(rtt_bias(x, x).unwrap(), 0.0);
        }

        #[test]
        fn scale_invariant(a in 1e-3f64..1e5, b in 1e-3f64..1e5, k in 1e-3f64..1e3) {
            let base = tp_bias(a, b).unwrap();
            let scaled = tp_bias(k * a, k * b).unwrap();
            prop_assert!((base - scaled).abs() <= 1e-9 * base.abs().max(1.0));
        }
    }
}

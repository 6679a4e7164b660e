use serde::{Deserialize, Serialize};

use super::MetricsError;

/// Outcome of one paired connection attempt on a path.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConnAttempt {
    pub tcp_ok: bool,
    pub udp_ok: bool,
}

/// UDP success fraction minus TCP success fraction, in `[-1, 1]`.
///
/// `+1` when every UDP attempt succeeded and every TCP attempt failed, `-1`
/// for the reverse, `0` when both protocols fared equally.
pub fn conn_bias(attempts: &[ConnAttempt]) -> Result<f64, MetricsError> {
    if attempts.is_empty() {
        return Err(MetricsError::EmptyInput("connection attempts"));
    }
    let n = attempts.len() as f64;
    let udp = attempts.iter().filter(|a| a.udp_ok).count() as f64;
    let tcp = attempts.iter().filter(|a| a.tcp_ok).count() as f64;
    Ok(udp / n - tcp / n)
}

/// A path is UDP-blocked when UDP never got through but TCP did at least
/// once. With no success on either protocol there is no evidence.
pub fn classify_blocked(history: &[ConnAttempt]) -> bool {
    let udp = history.iter().any(|a| a.udp_ok);
    let tcp = history.iter().any(|a| a.tcp_ok);
    !udp && tcp
}

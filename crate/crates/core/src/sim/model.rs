//! Closed-form throughput estimates the simulator is checked against.

use crate::protocol::ProtocolKind;

/// Predicted transactions per second.
///
/// Sequential kinds are bounded both by one batch per consensus round and by
/// the primary's serial trusted accesses per batch. Parallel kinds keep
/// `pipeline_width` rounds in flight, so only the primary's component bounds
/// them once the window covers the round trip.
pub fn throughput_model(
    kind: ProtocolKind,
    batch: u32,
    rtt_us: u64,
    access_latency_us: u64,
    phases: u32,
    pipeline_width: u32,
) -> f64 {
    let batch = batch as f64;
    let round = phases as f64 * rtt_us as f64 / 1e6;
    let access = kind.serial_accesses() as f64 * access_latency_us as f64 / 1e6;
    let rate = |period: f64| if period > 0.0 { batch / period } else { f64::INFINITY };
    if kind.is_sequential() {
        rate(round).min(rate(access))
    } else {
        let w = pipeline_width.max(1) as f64;
        rate(access).min(w * rate(round + access))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(access_ms: u64) -> f64 {
        throughput_model(ProtocolKind::MinZZ, 100, 200, access_ms * 1000, 1, 1)
    }

    #[test]
    fn sequential_access_bound() {
        assert!((seq(10) - 10_000.0).abs() < 1e-6);
        assert!((seq(100) - 1_000.0).abs() < 1e-6);
        assert!((seq(200) - 500.0).abs() < 1e-6);
    }

    #[test]
    fn sequential_round_bound() {
        let t = throughput_model(ProtocolKind::MinBft, 100, 50_000, 1_000, 2, 1);
        assert!((t - 1_000.0).abs() < 1e-6);
    }

    #[test]
    fn parallel_window_lifts_round_bound() {
        let seq = throughput_model(ProtocolKind::MinBft, 100, 60_000, 10_000, 2, 1);
        let par = throughput_model(ProtocolKind::FlexiBft, 100, 60_000, 10_000, ProtocolKind::FlexiBft.phases(), 16);
        assert!(par >= 4.0 * seq, "{par} vs {seq}");
        assert!((par - 10_000.0).abs() < 1e-6);
    }
}

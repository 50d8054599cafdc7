#![allow(dead_code)]

pub mod explore;

use flexitrust::protocol::ProtocolKind;
use flexitrust::scenarios::{ScenarioName, ScenarioParams};
use flexitrust::trace::{Trace, TraceEvent};
use flexitrust::protocol::{ReplicaEvent, TrustedOp};
use flexitrust::types::ReplicaId;

/// Randomised honest setup: several clients, jittery links, frequent
/// checkpoints so state transfer gets exercised.
pub fn honest_params(seed: u64, txns: u64) -> ScenarioParams {
    ScenarioParams {
        seed,
        txns,
        clients: 3,
        jitter_us: 2_000,
        access_latency_us: 200,
        one_way_us: 500,
        checkpoint_period: 8,
        record_traffic: false,
        ..ScenarioParams::default()
    }
}

pub fn run(name: ScenarioName, kind: ProtocolKind, p: &ScenarioParams) -> (Trace, flexitrust::scenarios::Verdict) {
    flexitrust::scenarios::run_named_scenario(name, kind, p).expect("scenario builds")
}

/// Consensus-time trusted calls per replica, the initial counter creation excluded.
pub fn consensus_calls(t: &Trace) -> Vec<u64> {
    let mut v = vec![0; t.header.n as usize];
    for (_, r, e) in t.replica_events() {
        if let ReplicaEvent::TrustedCall { op, .. } = e {
            if *op != TrustedOp::Create {
                v[r.index()] += 1;
            }
        }
    }
    v
}

pub fn proposals(t: &Trace) -> Vec<u64> {
    let mut v = vec![0; t.header.n as usize];
    for (_, r, e) in t.replica_events() {
        if matches!(e, ReplicaEvent::Proposed { .. }) {
            v[r.index()] += 1;
        }
    }
    v
}

pub fn crashed(t: &Trace) -> Vec<ReplicaId> {
    t.records
        .iter()
        .filter_map(|r| match r.event {
            TraceEvent::Crashed { replica } => Some(replica),
            _ => None,
        })
        .collect()
}

//! The canned runs: attack constructions, failure injections and the
//! throughput setup.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::message::MsgKind;
use crate::protocol::ProtocolKind;
use crate::scenarios::checks::{verdict, Verdict};
use crate::scenarios::workload::{generate_workload, into_batches, KeyDistribution, Workload};
use crate::sim::{AdversaryAction, AdversaryScript, Filter, Forgery, SimConfig, SimError, Simulation, Timeouts};
use crate::trace::Trace;
use crate::trusted::Persistence;
use crate::types::{Batch, ClientId, NodeId, Op, Regime, ReplicaId, SystemConfig, Transaction};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioName {
    /// Honest replicas, random delays; the baseline.
    Honest,
    ResponsivenessAttack,
    RollbackAttack,
    SequentialBottleneck,
    SingleReplicaFailure,
    PrimaryFailureViewchange,
}

impl ScenarioName {
    pub const ALL: [ScenarioName; 6] = [
        ScenarioName::Honest,
        ScenarioName::ResponsivenessAttack,
        ScenarioName::RollbackAttack,
        ScenarioName::SequentialBottleneck,
        ScenarioName::SingleReplicaFailure,
        ScenarioName::PrimaryFailureViewchange,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ScenarioName::Honest => "honest",
            ScenarioName::ResponsivenessAttack => "responsiveness_attack",
            ScenarioName::RollbackAttack => "rollback_attack",
            ScenarioName::SequentialBottleneck => "sequential_bottleneck",
            ScenarioName::SingleReplicaFailure => "single_replica_failure",
            ScenarioName::PrimaryFailureViewchange => "primary_failure_viewchange",
        }
    }

    /// Whether a safety violation is the expected outcome: the rollback
    /// attack against a small-quorum protocol whose components forget.
    pub fn violation_expected(self, kind: ProtocolKind, persistence: Persistence) -> bool {
        self == ScenarioName::RollbackAttack
            && kind.regime() == Regime::TwoFPlusOne
            && persistence == Persistence::Volatile
            && !kind.is_speculative()
    }
}

impl fmt::Display for ScenarioName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ScenarioName {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        ScenarioName::ALL.into_iter().find(|n| n.name() == s).ok_or_else(|| format!("unknown scenario {s:?}"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioParams {
    pub f: u32,
    pub seed: u64,
    pub persistence: Persistence,
    pub access_latency_us: u64,
    pub one_way_us: u64,
    pub jitter_us: u64,
    pub batch_size: u32,
    pub clients: u32,
    /// Total transactions across all clients.
    pub txns: u64,
    pub pipeline_width: u32,
    pub checkpoint_period: u64,
    pub n_records: u64,
    pub read_fraction: f64,
    pub distribution: KeyDistribution,
    /// Overrides the scenario's own horizon.
    pub horizon_us: Option<u64>,
    pub record_traffic: bool,
    pub per_message_us: u64,
    pub per_verify_us: u64,
}

impl Default for ScenarioParams {
    fn default() -> Self {
        ScenarioParams {
            f: 1,
            seed: 0,
            persistence: Persistence::Persistent,
            access_latency_us: 1_000,
            one_way_us: 500,
            jitter_us: 0,
            batch_size: 1,
            clients: 1,
            txns: 10,
            pipeline_width: 64,
            checkpoint_period: 16,
            n_records: 600_000,
            read_fraction: 0.5,
            distribution: KeyDistribution::Uniform,
            horizon_us: None,
            record_traffic: true,
            per_message_us: 0,
            per_verify_us: 0,
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ScenarioError {
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("{0}")]
    Unsupported(String),
}

/// Replicas grouped the way the attack constructions need them: the faulty
/// set (holding the view-0 primary), the honest replicas kept in the dark,
/// and everyone else.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Partition {
    pub faulty: Vec<ReplicaId>,
    pub dark: Vec<ReplicaId>,
    pub rest: Vec<ReplicaId>,
}

pub fn partition(cfg: &SystemConfig) -> Partition {
    let f = cfg.f as usize;
    let all: Vec<ReplicaId> = cfg.replicas().collect();
    Partition {
        faulty: all[..f].to_vec(),
        dark: all[all.len() - f..].to_vec(),
        rest: all[f..all.len() - f].to_vec(),
    }
}

fn nodes(rs: &[ReplicaId]) -> Vec<NodeId> {
    rs.iter().map(|r| NodeId::Replica(*r)).collect()
}

pub fn base_config(kind: ProtocolKind, p: &ScenarioParams, scenario: ScenarioName) -> Result<SimConfig, ScenarioError> {
    let mut c = SimConfig::new(kind, p.f).map_err(SimError::from)?;
    c.cfg = SystemConfig::new(p.f, kind.regime(), p.batch_size, p.checkpoint_period).map_err(SimError::from)?;
    c.persistence = p.persistence;
    c.access_latency_us = p.access_latency_us;
    c.pipeline_width = p.pipeline_width;
    c.network.one_way_us = p.one_way_us;
    c.network.jitter_us = p.jitter_us;
    c.per_message_us = p.per_message_us;
    c.per_verify_us = p.per_verify_us;
    c.seed = p.seed;
    c.record_traffic = p.record_traffic;
    c.scenario = scenario.name().into();
    Ok(c)
}

pub fn workload_for(p: &ScenarioParams) -> Vec<Vec<Batch>> {
    let w = Workload {
        n_records: p.n_records,
        n_txns: p.txns,
        read_fraction: p.read_fraction,
        distribution: p.distribution,
        seed: p.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(1),
    };
    into_batches(generate_workload(&w), p.clients, p.batch_size)
}

/// Builds the simulation for a named scenario without running it.
pub fn build_scenario(name: ScenarioName, kind: ProtocolKind, p: &ScenarioParams) -> Result<Simulation, ScenarioError> {
    let mut c = base_config(kind, p, name)?;
    let (workload, script) = match name {
        ScenarioName::Honest | ScenarioName::SequentialBottleneck => {
            let w = workload_for(p);
            let bound = c.round_bound(p.clients);
            let batches = p.txns.div_ceil(p.batch_size.max(1) as u64);
            c.horizon_us = 1_000_000 + 50 * bound + batches * bound;
            (w, AdversaryScript::none())
        }
        ScenarioName::ResponsivenessAttack => responsiveness(&mut c),
        ScenarioName::RollbackAttack => rollback(&mut c, p),
        ScenarioName::SingleReplicaFailure => {
            let w = workload_for(p);
            let bound = c.round_bound(p.clients);
            let victim = ReplicaId(c.cfg.n - 1);
            let batches = p.txns.div_ceil(p.batch_size.max(1) as u64);
            c.horizon_us = 100 * bound + 2 * batches * bound;
            (w, AdversaryScript::none().at(0, AdversaryAction::Crash { replica: victim }))
        }
        ScenarioName::PrimaryFailureViewchange => primary_failure(&mut c, p),
    };
    if let Some(h) = p.horizon_us {
        c.horizon_us = h;
    }
    Ok(Simulation::new(c, workload, script)?)
}

pub fn run_named_scenario(
    name: ScenarioName,
    kind: ProtocolKind,
    p: &ScenarioParams,
) -> Result<(Trace, Verdict), ScenarioError> {
    let mut sim = build_scenario(name, kind, p)?;
    sim.run();
    let trace = sim.into_trace();
    let v = verdict(&trace);
    Ok((trace, v))
}

fn single_txn(client: u32, nonce: u64, key: u64, value: u64) -> Batch {
    let c = ClientId(client);
    Batch { client: c, nonce, txns: vec![Transaction { client: c, nonce, op: Op::Put { key, value } }] }
}

/// A faulty primary never talks to `dark` and never answers clients; the
/// honest replicas' messages to `dark` are held back until GST.
fn responsiveness(c: &mut SimConfig) -> (Vec<Vec<Batch>>, AdversaryScript) {
    let part = partition(&c.cfg);
    let delta = c.round_bound(1);
    let release = 12 * delta;
    c.network.gst_us = release;
    c.horizon_us = release + 200 * delta;
    let t = Timeouts { view_change_us: 10 * delta, forward_us: 10 * delta, client_retry_us: 8 * delta };
    c.timeouts = Some(t);
    let script = AdversaryScript { byzantine: part.faulty.iter().copied().collect(), actions: vec![] }
        .at(0, AdversaryAction::DropMatching { filter: Filter::any().from(nodes(&part.faulty)).to(nodes(&part.dark)) })
        .at(
            0,
            AdversaryAction::DropMatching { filter: Filter::any().from(nodes(&part.faulty)).kinds([MsgKind::Response]) },
        )
        .at(
            0,
            AdversaryAction::DelayMatching {
                filter: Filter::any().from(nodes(&part.rest)).to(nodes(&part.dark)),
                until: release,
            },
        );
    (vec![vec![single_txn(0, 0, 7, 1)]], script)
}

/// The faulty primary snapshots its component, orders T for everyone but
/// `dark`, rolls the component back and binds a conflicting T' to the same
/// sequence number for `dark` only.
fn rollback(c: &mut SimConfig, p: &ScenarioParams) -> (Vec<Vec<Batch>>, AdversaryScript) {
    let part = partition(&c.cfg);
    let primary = part.faulty[0];
    let delta = c.round_bound(1);
    let strike = 4 * delta;
    c.network.gst_us = 60 * delta;
    c.horizon_us = 120 * delta;
    c.extra_clients = 1;
    let forged_client = 1;
    let t_prime = single_txn(forged_client, 0, 7, 666);
    let label = "before-first-append".to_string();
    let pnode = NodeId::Replica(primary);
    let script = AdversaryScript { byzantine: part.faulty.iter().copied().collect(), actions: vec![] }
        .at(0, AdversaryAction::SnapshotTC { replica: primary, label: label.clone() })
        .at(0, AdversaryAction::DropMatching { filter: Filter::any().from([pnode]).to(nodes(&part.dark)).kinds([MsgKind::Preprepare]) })
        .at(
            0,
            AdversaryAction::DelayMatching { filter: Filter::any().from(nodes(&part.rest)).to(nodes(&part.dark)), until: c.network.gst_us },
        )
        .at(strike, AdversaryAction::ClearFilters)
        .at(
            strike,
            AdversaryAction::DelayMatching { filter: Filter::any().from(nodes(&part.rest)).to(nodes(&part.dark)), until: c.network.gst_us },
        )
        .at(strike, AdversaryAction::Rollback { replica: primary, label })
        .at(
            strike,
            AdversaryAction::SendForged {
                from: pnode,
                to: nodes(&part.dark),
                forgery: Forgery::Proposal { replica: primary, seq: 1, batch: t_prime.clone() },
            },
        );
    let script = if c.kind.has_commit_phase() {
        script.at(
            strike,
            AdversaryAction::SendForged {
                from: pnode,
                to: nodes(&part.dark),
                forgery: Forgery::Vote { replica: primary, kind: MsgKind::Commit, seq: 1, digest: t_prime.digest() },
            },
        )
    } else {
        script
    };
    let _ = p;
    (vec![vec![single_txn(0, 0, 7, 1)]], script)
}

/// The view-0 primary crash-stops at a seeded point of the run.
fn primary_failure(c: &mut SimConfig, p: &ScenarioParams) -> (Vec<Vec<Batch>>, AdversaryScript) {
    let w = workload_for(p);
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed ^ 0xc4a5);
    let bound = c.round_bound(p.clients);
    let batches = p.txns.div_ceil(p.batch_size.max(1) as u64).max(1);
    let per_batch = (c.access_latency_us * c.kind.serial_accesses() as u64
        + 2 * c.kind.phases() as u64 * c.network.one_way_us)
        .max(1);
    let busy = per_batch * batches / p.clients.max(1) as u64;
    let crash_at = rng.random_range(0..=busy.max(1));
    c.horizon_us = crash_at + 400 * bound + 4 * batches * bound;
    let primary = c.cfg.primary(0);
    (w, AdversaryScript::none().at(crash_at, AdversaryAction::Crash { replica: primary }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partition_shapes() {
        let small = SystemConfig::new(1, Regime::TwoFPlusOne, 1, 10).unwrap();
        let p = partition(&small);
        assert_eq!((p.faulty, p.rest, p.dark), (vec![ReplicaId(0)], vec![ReplicaId(1)], vec![ReplicaId(2)]));
        let big = SystemConfig::new(2, Regime::ThreeFPlusOne, 1, 10).unwrap();
        let p = partition(&big);
        assert_eq!((p.faulty.len(), p.rest.len(), p.dark.len()), (2, 3, 2));
    }

    #[test]
    fn names_round_trip() {
        for n in ScenarioName::ALL {
            assert_eq!(n.name().parse::<ScenarioName>().unwrap(), n);
        }
        assert!("nope".parse::<ScenarioName>().is_err());
    }

    #[test]
    fn honest_run_completes_everything() {
        let p = ScenarioParams { txns: 6, clients: 2, jitter_us: 200, seed: 4, ..Default::default() };
        for kind in ProtocolKind::ALL {
            let (_, v) = run_named_scenario(ScenarioName::Honest, kind, &p).unwrap();
            assert!(v.safety_ok, "{kind}");
            assert!(v.rsm_liveness_ok, "{kind}: {}", v.render_text());
        }
    }
}

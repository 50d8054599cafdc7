//! Safety and liveness verdicts computed from a trace alone.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;

use crate::message::MsgKind;
use crate::protocol::{ReplicaEvent, TrustedOp};
use crate::trace::{Trace, TraceEvent};
use crate::types::{ClientId, Digest, NodeId, ReplicaId, TxnId};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub enum ViolationKind {
    /// Honest replicas settled on different batches for one sequence number.
    Agreement,
    /// Checkpoint certificates for one sequence number disagree.
    Divergence,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub kind: ViolationKind,
    pub seq: u64,
    pub views: Vec<u64>,
    pub replicas: Vec<ReplicaId>,
    pub digests: Vec<String>,
}

fn honest(trace: &Trace) -> impl Fn(ReplicaId) -> bool + '_ {
    move |r| !trace.is_byzantine(r)
}

/// Executions that a replica never rolled back, as `seq -> (view, digest, txn)`.
pub fn surviving_executions(trace: &Trace) -> BTreeMap<ReplicaId, BTreeMap<u64, (u64, Digest, TxnId)>> {
    let mut out: BTreeMap<ReplicaId, BTreeMap<u64, (u64, Digest, TxnId)>> = BTreeMap::new();
    for (_, r, e) in trace.replica_events() {
        match e {
            ReplicaEvent::Executed { view, seq, digest, txn } => {
                out.entry(r).or_default().insert(*seq, (*view, *digest, *txn));
            }
            ReplicaEvent::RolledBack { seq, .. } => {
                out.entry(r).or_default().remove(seq);
            }
            _ => {}
        }
    }
    out
}

/// Client completions as `(time, client, txn, seq, view)`.
pub fn completions(trace: &Trace) -> Vec<(u64, ClientId, TxnId, u64, u64)> {
    trace
        .records
        .iter()
        .filter_map(|r| match &r.event {
            TraceEvent::Completed { client, txn, seq, view, .. } => Some((r.at, *client, *txn, *seq, *view)),
            _ => None,
        })
        .collect()
}

/// Every `(seq, digest)` honest replicas disagree on.
///
/// Non-speculative kinds execute only decided entries, so every honest
/// execution counts. Speculative kinds may execute an entry that is later
/// abandoned; there an entry counts once a client completed it, and any
/// honest execution of that slot in a later view must match it.
pub fn check_agreement(trace: &Trace) -> Vec<Violation> {
    let is_honest = honest(trace);
    let mut seen: BTreeMap<u64, BTreeMap<Digest, (BTreeSet<u64>, BTreeSet<ReplicaId>)>> = BTreeMap::new();
    let mut add = |seq: u64, d: Digest, view: u64, r: Option<ReplicaId>| {
        let e = seen.entry(seq).or_default().entry(d).or_default();
        e.0.insert(view);
        if let Some(r) = r {
            e.1.insert(r);
        }
    };
    if !trace.header.protocol.is_speculative() {
        for (_, r, e) in trace.replica_events() {
            if let ReplicaEvent::Executed { view, seq, digest, .. } = e {
                if is_honest(r) {
                    add(*seq, *digest, *view, Some(r));
                }
            }
        }
    } else {
        // digest of each (txn, seq) as executed by anyone
        let mut digest_of: BTreeMap<(TxnId, u64), Digest> = BTreeMap::new();
        let mut executions = Vec::new();
        for (at, r, e) in trace.replica_events() {
            if let ReplicaEvent::Executed { view, seq, digest, txn } = e {
                digest_of.entry((*txn, *seq)).or_insert(*digest);
                if is_honest(r) {
                    executions.push((at, r, *view, *seq, *digest));
                }
            }
        }
        let mut decided: BTreeMap<u64, (u64, Digest)> = BTreeMap::new();
        for (_, _, txn, seq, view) in completions(trace) {
            if let Some(d) = digest_of.get(&(txn, seq)) {
                add(seq, *d, view, None);
                let slot = decided.entry(seq).or_insert((view, *d));
                slot.0 = slot.0.min(view);
            }
        }
        for (_, r, view, seq, d) in executions {
            if let Some((v0, d0)) = decided.get(&seq) {
                if d == *d0 || view > *v0 {
                    add(seq, d, view, Some(r));
                }
            }
        }
    }
    let mut out: Vec<Violation> = seen
        .into_iter()
        .filter(|(_, ds)| ds.len() > 1)
        .map(|(seq, ds)| {
            let mut views = BTreeSet::new();
            let mut replicas = BTreeSet::new();
            for (vs, rs) in ds.values() {
                views.extend(vs);
                replicas.extend(rs);
            }
            Violation {
                kind: ViolationKind::Agreement,
                seq,
                views: views.into_iter().collect(),
                replicas: replicas.into_iter().collect(),
                digests: ds.keys().map(|d| d.hex()).collect(),
            }
        })
        .collect();
    let mut divergent = BTreeMap::<u64, BTreeSet<ReplicaId>>::new();
    for (_, r, e) in trace.replica_events() {
        if let ReplicaEvent::Divergence { seq } = e {
            if is_honest(r) {
                divergent.entry(*seq).or_default().insert(r);
            }
        }
    }
    out.extend(divergent.into_iter().map(|(seq, rs)| Violation {
        kind: ViolationKind::Divergence,
        seq,
        views: vec![],
        replicas: rs.into_iter().collect(),
        digests: vec![],
    }));
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Blocked {
    /// Fewer matching responses than the completion quorum reached the client.
    InsufficientResponses { got: u32, need: u32 },
    /// A view change started and never finished.
    PendingViewChange,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct TxnLiveness {
    pub client: ClientId,
    pub txn: TxnId,
    pub completed: bool,
    /// Executed by at least one honest replica.
    pub committed: bool,
    pub blocked: Option<Blocked>,
}

/// Per submitted transaction, whether it completed before the horizon and,
/// if not, why. Response counts need recorded traffic.
pub fn check_rsm_liveness(trace: &Trace) -> Vec<TxnLiveness> {
    let is_honest = honest(trace);
    let completed: BTreeSet<TxnId> = completions(trace).into_iter().map(|c| c.2).collect();
    let mut committed = BTreeSet::new();
    let mut vc_open: BTreeMap<ReplicaId, bool> = BTreeMap::new();
    for (_, r, e) in trace.replica_events() {
        match e {
            ReplicaEvent::Executed { txn, .. } if is_honest(r) => {
                committed.insert(*txn);
            }
            ReplicaEvent::ViewChangeStarted { .. } => {
                vc_open.insert(r, true);
            }
            ReplicaEvent::NewViewInstalled { .. } => {
                vc_open.insert(r, false);
            }
            _ => {}
        }
    }
    let pending_vc = vc_open.iter().any(|(r, open)| *open && is_honest(*r));
    // replicas whose responses reached each client, per seq
    let mut responders: BTreeMap<ClientId, BTreeMap<u64, BTreeSet<ReplicaId>>> = BTreeMap::new();
    for r in &trace.records {
        if let TraceEvent::Deliver { from: NodeId::Replica(src), to: NodeId::Client(c), msg } = &r.event {
            if msg.kind == MsgKind::Response {
                responders.entry(*c).or_default().entry(msg.seq.unwrap_or(0)).or_default().insert(*src);
            }
        }
    }
    let need = trace.header.protocol.completion_quorum(trace.header.f);
    let mut out = Vec::new();
    let mut seen = BTreeSet::new();
    for r in &trace.records {
        let TraceEvent::Submitted { client, txn } = &r.event else { continue };
        if !seen.insert(*txn) {
            continue;
        }
        let done = completed.contains(txn);
        let blocked = (!done).then(|| {
            if pending_vc {
                Blocked::PendingViewChange
            } else {
                let got = responders
                    .get(client)
                    .map(|m| m.values().map(|s| s.len()).max().unwrap_or(0))
                    .unwrap_or(0) as u32;
                Blocked::InsufficientResponses { got, need }
            }
        });
        out.push(TxnLiveness { client: *client, txn: *txn, completed: done, committed: committed.contains(txn), blocked });
    }
    out
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct Stats {
    pub completed_batches: u64,
    pub completed_txns: u64,
    pub makespan_us: u64,
    pub tps: f64,
    pub mean_latency_us: f64,
    /// All component calls, per replica.
    pub trusted_calls: Vec<u64>,
    /// Calls excluding counter provisioning.
    pub consensus_calls: Vec<u64>,
    pub proposals: Vec<u64>,
    pub max_in_flight: u32,
    pub view_changes: u64,
    pub rollbacks: u64,
}

pub fn measure(trace: &Trace) -> Stats {
    let n = trace.header.n as usize;
    let mut s = Stats { trusted_calls: vec![0; n], consensus_calls: vec![0; n], proposals: vec![0; n], ..Stats::default() };
    let mut latency = 0u128;
    for r in &trace.records {
        match &r.event {
            TraceEvent::Completed { txns, submitted_at, .. } => {
                s.completed_batches += 1;
                s.completed_txns += *txns as u64;
                s.makespan_us = s.makespan_us.max(r.at);
                latency += (r.at - submitted_at) as u128;
            }
            TraceEvent::Replica { replica, event } => {
                let i = replica.index();
                match event {
                    ReplicaEvent::TrustedCall { op, .. } => {
                        s.trusted_calls[i] += 1;
                        if *op != TrustedOp::Create {
                            s.consensus_calls[i] += 1;
                        }
                    }
                    ReplicaEvent::Proposed { in_flight, .. } => {
                        s.proposals[i] += 1;
                        s.max_in_flight = s.max_in_flight.max(*in_flight);
                    }
                    ReplicaEvent::NewViewInstalled { .. } => s.view_changes += 1,
                    ReplicaEvent::RolledBack { .. } => s.rollbacks += 1,
                    _ => {}
                }
            }
            _ => {}
        }
    }
    if s.makespan_us > 0 {
        s.tps = s.completed_txns as f64 * 1e6 / s.makespan_us as f64;
    }
    if s.completed_batches > 0 {
        s.mean_latency_us = latency as f64 / s.completed_batches as f64;
    }
    s
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Verdict {
    pub safety_ok: bool,
    pub rsm_liveness_ok: bool,
    pub consensus_liveness_ok: bool,
    pub violations: Vec<Violation>,
    pub liveness: Vec<TxnLiveness>,
    pub stats: Stats,
    pub aborted: Option<String>,
}

pub fn verdict(trace: &Trace) -> Verdict {
    let violations = check_agreement(trace);
    let liveness = check_rsm_liveness(trace);
    Verdict {
        safety_ok: !violations.iter().any(|v| v.kind == ViolationKind::Agreement),
        rsm_liveness_ok: liveness.iter().all(|t| t.completed),
        consensus_liveness_ok: liveness.iter().all(|t| t.committed),
        violations,
        liveness,
        stats: measure(trace),
        aborted: trace.aborted().map(str::to_owned),
    }
}

impl Verdict {
    /// Line-oriented rendering: one `key value` line per flag, statistic and
    /// violation.
    pub fn render_text(&self) -> String {
        let mut s = format!(
            "safety_ok {}\nrsm_liveness_ok {}\nconsensus_liveness_ok {}\n",
            self.safety_ok, self.rsm_liveness_ok, self.consensus_liveness_ok
        );
        let st = &self.stats;
        s += &format!(
            "stat tps {:.1}\nstat mean_latency_us {:.1}\nstat completed_txns {}\nstat max_in_flight {}\nstat view_changes {}\nstat rollbacks {}\n",
            st.tps, st.mean_latency_us, st.completed_txns, st.max_in_flight, st.view_changes, st.rollbacks
        );
        for (i, c) in st.trusted_calls.iter().enumerate() {
            s += &format!("stat trusted_calls r{i} {c}\n");
        }
        for v in &self.violations {
            let rs: Vec<String> = v.replicas.iter().map(|r| r.to_string()).collect();
            let ds: Vec<String> = v.digests.iter().map(|d| d[..12].to_string()).collect();
            s += &format!("violation {:?} seq={} replicas=[{}] digests=[{}]\n", v.kind, v.seq, rs.join(","), ds.join(","));
        }
        for t in self.liveness.iter().filter(|t| !t.completed) {
            s += &format!("incomplete {} committed={} blocked={:?}\n", t.txn, t.committed, t.blocked);
        }
        if let Some(a) = &self.aborted {
            s += &format!("aborted {a}\n");
        }
        s
    }

    /// One JSON object per violation and per statistic.
    pub fn render_json_lines(&self) -> String {
        let mut lines = vec![serde_json::json!({
            "record": "flags",
            "safety_ok": self.safety_ok,
            "rsm_liveness_ok": self.rsm_liveness_ok,
            "consensus_liveness_ok": self.consensus_liveness_ok,
            "aborted": self.aborted,
        })];
        lines.push(serde_json::json!({ "record": "stats", "stats": self.stats }));
        for v in &self.violations {
            lines.push(serde_json::json!({ "record": "violation", "violation": v }));
        }
        for t in self.liveness.iter().filter(|t| !t.completed) {
            lines.push(serde_json::json!({ "record": "incomplete", "txn": t }));
        }
        lines.into_iter().map(|l| l.to_string() + "\n").collect()
    }
}

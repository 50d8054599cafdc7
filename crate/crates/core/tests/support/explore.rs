//! Brute-force oracle for the counter-rollback attack at f = 1.
//!
//! The faulty primary r0 binds T to seq 1, rolls its component back (if it
//! can) and binds T' to seq 1 again, then casts its own votes for both. Every
//! message it produced is handed to every honest replica. From there the
//! search plays every delivery order of every in-flight message, including
//! never delivering it, up to a bound on deliveries. Honest replicas run the
//! real protocol code; the network is the adversary. Timers never fire.
//!
//! A schedule is unsafe when two honest replicas execute different batches
//! at one seq, or, for speculative kinds, when two different batches each
//! collect a client completion quorum at one seq (the faulty replica is
//! assumed to vouch for anything).

use std::collections::{BTreeMap, BTreeSet, HashMap};

use flexitrust::message::{MsgKind, ProtocolMessage};
use flexitrust::protocol::{Dest, ProtocolKind, ReplicaConfig, ReplicaState};
use flexitrust::trusted::Persistence;
use flexitrust::types::{Batch, ClientId, Digest, digest_of, KeyRing, NodeId, Op, ReplicaId, SystemConfig, Transaction, TxnId};

#[derive(Debug, Default)]
pub struct Exploration {
    pub states: usize,
    pub unsafe_states: usize,
    /// Deliveries leading to the first unsafe state found.
    pub witness: Option<Vec<String>>,
    /// Whether the rollback was refused by the component.
    pub rollback_refused: bool,
}

type Delivery = (u32, Digest);

#[derive(Clone)]
struct Node {
    replicas: Vec<ReplicaState>,
    pool: BTreeMap<Delivery, (NodeId, ProtocolMessage)>,
    /// Exact duplicates are not redelivered; replicas ignore them anyway.
    delivered: BTreeSet<Delivery>,
    responses: BTreeSet<(u64, u64, TxnId, u32)>,
    path: Vec<String>,
}

fn txn(client: u32, key: u64) -> Batch {
    let c = ClientId(client);
    Batch { client: c, nonce: 0, txns: vec![Transaction { client: c, nonce: 0, op: Op::Put { key, value: key } }] }
}

fn key(node: &Node) -> Digest {
    let mut k = Vec::new();
    for r in &node.replicas[1..] {
        let fp = r.fingerprint();
        k.extend_from_slice(&(fp.len() as u32).to_le_bytes());
        k.extend_from_slice(&fp);
    }
    for (to, d) in node.pool.keys() {
        k.extend_from_slice(&to.to_le_bytes());
        k.extend_from_slice(&d.0);
    }
    k.push(0xff);
    for (to, d) in &node.delivered {
        k.extend_from_slice(&to.to_le_bytes());
        k.extend_from_slice(&d.0);
    }
    k.push(0xff);
    for (v, s, t, r) in &node.responses {
        k.extend_from_slice(&v.to_le_bytes());
        k.extend_from_slice(&s.to_le_bytes());
        k.extend_from_slice(&t.client.0.to_le_bytes());
        k.extend_from_slice(&t.nonce.to_le_bytes());
        k.extend_from_slice(&r.to_le_bytes());
    }
    digest_of(&k)
}

fn is_unsafe(kind: ProtocolKind, f: u32, node: &Node) -> bool {
    if kind.is_speculative() {
        let need = kind.completion_quorum(f) as usize - 1;
        let mut per: BTreeMap<(u64, u64, TxnId), usize> = BTreeMap::new();
        for (v, s, t, _) in &node.responses {
            *per.entry((*v, *s, *t)).or_default() += 1;
        }
        let mut decided: BTreeMap<u64, BTreeSet<TxnId>> = BTreeMap::new();
        for ((_, s, t), c) in per {
            if c >= need {
                decided.entry(s).or_default().insert(t);
            }
        }
        return decided.values().any(|ts| ts.len() > 1);
    }
    let honest = &node.replicas[1..];
    (1..=4).any(|seq| {
        let ds: BTreeSet<Digest> = honest.iter().filter_map(|r| r.executed_digest(seq)).collect();
        ds.len() > 1
    })
}

fn absorb(node: &mut Node, from: ReplicaId, sends: Vec<flexitrust::protocol::Outgoing>, n: u32) {
    for o in sends {
        let targets: Vec<u32> = match o.to {
            Dest::Replica(r) => vec![r.0],
            Dest::Others => (0..n).filter(|&i| i != from.0).collect(),
            Dest::Client(_) => {
                if let ProtocolMessage::Response(r) = &o.msg {
                    node.responses.insert((r.view, r.seq, r.txn, from.0));
                }
                continue;
            }
        };
        let id = o.msg.id_digest();
        for t in targets {
            // the faulty primary reacts to nothing
            if t != 0 && !node.delivered.contains(&(t, id)) {
                node.pool.insert((t, id), (NodeId::Replica(from), o.msg.clone()));
            }
        }
    }
}

pub fn explore_rollback(kind: ProtocolKind, persistence: Persistence, max_deliveries: usize) -> Exploration {
    let f = 1;
    let cfg = SystemConfig::new(f, kind.regime(), 1, 1_000).unwrap();
    let n = cfg.n;
    let keys = KeyRing::new(7, n, 2);
    let rc = ReplicaConfig {
        kind,
        cfg,
        persistence,
        access_latency_us: 1,
        pipeline_width: 4,
        view_change_timeout_us: u64::MAX / 4,
        forward_timeout_us: u64::MAX / 4,
        per_message_us: 0,
        per_verify_us: 0,
    };
    let mut replicas: Vec<ReplicaState> = cfg.replicas().map(|r| ReplicaState::new(r, rc.clone(), &keys)).collect();
    for r in replicas.iter_mut() {
        r.start(0);
    }
    let mut out = Exploration::default();

    let (t, t2) = (txn(0, 1), txn(1, 2));
    let mut forged: Vec<ProtocolMessage> = Vec::new();
    let snap = replicas[0].tc.snapshot();
    let cast = |p: &mut ReplicaState, b: &Batch, forged: &mut Vec<ProtocolMessage>| {
        let Ok(pp) = p.forge_proposal(1, b.clone()) else { return };
        let echo = pp.attestation.clone();
        forged.push(ProtocolMessage::Preprepare(pp));
        if !matches!(kind.family(), flexitrust::protocol::Family::Min) {
            for mk in [MsgKind::Prepare, MsgKind::Commit] {
                let wanted = if mk == MsgKind::Prepare { kind.has_prepare_phase() } else { kind.has_commit_phase() };
                if !wanted {
                    continue;
                }
                if let Ok(v) = p.forge_vote(mk, 1, b.digest(), echo.clone()) {
                    forged.push(if mk == MsgKind::Prepare { ProtocolMessage::Prepare(v) } else { ProtocolMessage::Commit(v) });
                }
            }
        }
    };
    cast(&mut replicas[0], &t, &mut forged);
    out.rollback_refused = replicas[0].tc.adversary_rollback(&snap).is_err();
    cast(&mut replicas[0], &t2, &mut forged);

    let mut root = Node { replicas, pool: BTreeMap::new(), delivered: BTreeSet::new(), responses: BTreeSet::new(), path: Vec::new() };
    for m in forged {
        let id = m.id_digest();
        for to in 1..n {
            root.pool.insert((to, id), (NodeId::Replica(ReplicaId(0)), m.clone()));
        }
    }

    let mut seen = HashMap::new();
    search(kind, f, n, root, BTreeSet::new(), max_deliveries, &mut seen, &mut out);
    out
}

/// Depth-first search with state caching and sleep sets. Deliveries to
/// different replicas commute, so only one order of each such pair is
/// played. A cached state is expanded again only for deliveries that slept
/// on every earlier visit.
#[allow(clippy::too_many_arguments)]
fn search(
    kind: ProtocolKind,
    f: u32,
    n: u32,
    node: Node,
    sleep: BTreeSet<Delivery>,
    max: usize,
    seen: &mut HashMap<Digest, BTreeSet<Delivery>>,
    out: &mut Exploration,
) {
    let k = key(&node);
    let todo: Vec<Delivery> = match seen.get_mut(&k) {
        Some(old) => {
            let wake: Vec<Delivery> = old.difference(&sleep).copied().collect();
            if wake.is_empty() {
                return;
            }
            *old = old.intersection(&sleep).copied().collect();
            wake
        }
        None => {
            out.states += 1;
            if is_unsafe(kind, f, &node) {
                seen.insert(k, BTreeSet::new());
                out.unsafe_states += 1;
                if out.witness.is_none() {
                    out.witness = Some(node.path.clone());
                }
                return;
            }
            seen.insert(k, sleep.clone());
            node.pool.keys().filter(|d| !sleep.contains(d)).copied().collect()
        }
    };
    if node.delivered.len() >= max {
        return;
    }
    let mut done = sleep;
    for d in todo {
        let Some((from, msg)) = node.pool.get(&d).cloned() else { continue };
        let mut next = node.clone();
        next.pool.remove(&d);
        next.delivered.insert(d);
        let fx = next.replicas[d.0 as usize].handle_message(0, from, msg.clone());
        absorb(&mut next, ReplicaId(d.0), fx.sends, n);
        next.path.push(format!("{} {} v={:?} seq={:?} -> r{}", from, msg.kind(), msg.view(), msg.seq(), d.0));
        let child_sleep = done.iter().filter(|s| s.0 != d.0).copied().collect();
        search(kind, f, n, next, child_sleep, max, seen, out);
        done.insert(d);
    }
}

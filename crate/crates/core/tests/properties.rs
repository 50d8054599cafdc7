mod support;

use std::collections::{BTreeMap, BTreeSet};

use proptest::collection::vec;
use proptest::prelude::*;

use flexitrust::codec::{from_bytes, to_bytes};
use flexitrust::message::{Certificate, Checkpoint, MsgKind, NewView, Preprepare, ProtocolMessage, Request, Response, ViewChange, Vote};
use flexitrust::protocol::{ProtocolKind, RejectReason, ReplicaEvent, TrustedOp};
use flexitrust::scenarios::{
    base_config, generate_workload, verdict, workload_for, KeyDistribution, ScenarioName, ScenarioParams, Workload,
};
use flexitrust::sim::{authenticity_audit, AdversaryAction, AdversaryScript, Filter, Simulation};
use flexitrust::state::{AppState, ClientEntry};
use flexitrust::trace::{Trace, TraceEvent};
use flexitrust::trusted::{Attestation, AttestationKind, Persistence};
use flexitrust::types::{Authenticator, Batch, ClientId, ComponentId, Digest, NodeId, Op, Principal, ReplicaId, Transaction, TxnId};

use support::{consensus_calls, honest_params, proposals, run};

// ---- message round trips ----------------------------------------------------

fn digest() -> impl Strategy<Value = Digest> {
    any::<[u8; 32]>().prop_map(Digest)
}

fn principal() -> impl Strategy<Value = Principal> {
    prop_oneof![
        (0u32..8).prop_map(|i| Principal::Replica(ReplicaId(i))),
        (0u32..8).prop_map(|i| Principal::Client(ClientId(i))),
        (0u32..8).prop_map(|i| Principal::Component(ComponentId(i))),
    ]
}

fn auth() -> impl Strategy<Value = Authenticator> {
    (principal(), digest(), vec(any::<u8>(), 0..40))
        .prop_map(|(signer, payload_digest, tag)| Authenticator { signer, payload_digest, tag })
}

fn attestation() -> impl Strategy<Value = Attestation> {
    (
        0u32..8,
        prop_oneof![Just(AttestationKind::CounterBind), Just(AttestationKind::LogAttest), Just(AttestationKind::CounterCreate)],
        any::<u64>(),
        any::<u64>(),
        proptest::option::of(digest()),
        auth(),
    )
        .prop_map(|(c, kind, q, k, x, auth)| Attestation { component: ComponentId(c), kind, q, k, x, auth })
}

fn op() -> impl Strategy<Value = Op> {
    prop_oneof![
        (any::<u64>(), any::<u64>()).prop_map(|(key, value)| Op::Put { key, value }),
        any::<u64>().prop_map(|key| Op::Get { key }),
        Just(Op::Noop),
    ]
}

fn batch() -> impl Strategy<Value = Batch> {
    (0u32..16, any::<u64>(), vec(op(), 0..5)).prop_map(|(c, nonce, ops)| {
        let client = ClientId(c);
        Batch { client, nonce, txns: ops.into_iter().map(|op| Transaction { client, nonce, op }).collect() }
    })
}

fn app_state() -> impl Strategy<Value = AppState> {
    (
        proptest::collection::btree_map(any::<u64>(), any::<u64>(), 0..6),
        proptest::collection::btree_map(
            (0u32..8).prop_map(ClientId),
            (any::<u64>(), any::<u64>(), vec(proptest::option::of(any::<u64>()), 0..3))
                .prop_map(|(nonce, seq, result)| ClientEntry { nonce, seq, result }),
            0..4,
        ),
    )
        .prop_map(|(kv, clients)| AppState { kv, clients })
}

fn preprepare() -> impl Strategy<Value = Preprepare> {
    (any::<u64>(), any::<u64>(), batch(), digest(), proptest::option::of(attestation()), auth())
        .prop_map(|(view, seq, batch, digest, attestation, auth)| Preprepare { view, seq, batch, digest, attestation, auth })
}

fn vote() -> impl Strategy<Value = Vote> {
    (any::<u64>(), any::<u64>(), digest(), 0u32..8, proptest::option::of(attestation()), auth()).prop_map(
        |(view, seq, digest, r, attestation, auth)| Vote { view, seq, digest, replica: ReplicaId(r), attestation, auth },
    )
}

fn view_change() -> impl Strategy<Value = ViewChange> {
    (
        any::<u64>(),
        0u32..8,
        any::<u64>(),
        app_state(),
        vec(preprepare(), 0..3),
        vec(vec(vote(), 0..3).prop_map(|votes| Certificate { votes }), 0..2),
        auth(),
    )
        .prop_map(|(new_view, r, stable_seq, stable_state, prepared, certs, auth)| ViewChange {
            new_view,
            replica: ReplicaId(r),
            stable_seq,
            stable_state,
            prepared,
            certs,
            auth,
        })
}

fn message() -> impl Strategy<Value = ProtocolMessage> {
    prop_oneof![
        (batch(), auth()).prop_map(|(batch, auth)| ProtocolMessage::Request(Request { batch, auth })),
        preprepare().prop_map(ProtocolMessage::Preprepare),
        vote().prop_map(ProtocolMessage::Prepare),
        vote().prop_map(ProtocolMessage::Commit),
        (any::<u64>(), any::<u64>(), 0u32..8, any::<u64>(), vec(proptest::option::of(any::<u64>()), 0..4), 0u32..8, auth())
            .prop_map(|(view, seq, c, nonce, result, r, auth)| {
                ProtocolMessage::Response(Response {
                    view,
                    seq,
                    txn: TxnId { client: ClientId(c), nonce },
                    result,
                    replica: ReplicaId(r),
                    auth,
                })
            }),
        (any::<u64>(), digest(), 0u32..8, vec(attestation(), 0..3), app_state(), auth()).prop_map(
            |(seq, state_digest, r, proof, state, auth)| ProtocolMessage::Checkpoint(Checkpoint {
                seq,
                state_digest,
                replica: ReplicaId(r),
                proof,
                state,
                auth
            })
        ),
        view_change().prop_map(ProtocolMessage::ViewChange),
        (
            any::<u64>(),
            0u32..8,
            vec(view_change(), 0..3),
            vec((any::<u64>(), digest()), 0..4),
            proptest::option::of(attestation()),
            auth()
        )
            .prop_map(|(new_view, r, view_changes, repropose, counter_cert, auth)| {
                ProtocolMessage::NewView(NewView {
                    new_view,
                    replica: ReplicaId(r),
                    view_changes,
                    repropose,
                    counter_cert,
                    auth,
                })
            }),
    ]
}

proptest! {
    #[test]
    fn every_message_round_trips(m in message()) {
        let bytes = to_bytes(&m);
        let back: ProtocolMessage = from_bytes(&bytes).unwrap();
        prop_assert_eq!(&back, &m);
        prop_assert_eq!(to_bytes(&back), bytes);
    }

    #[test]
    fn truncated_messages_are_refused(m in message(), cut in any::<proptest::sample::Index>()) {
        let bytes = to_bytes(&m);
        let at = cut.index(bytes.len());
        prop_assert!(from_bytes::<ProtocolMessage>(&bytes[..at]).is_err());
    }
}

// ---- runs -----------------------------------------------------------------

fn kind() -> impl Strategy<Value = ProtocolKind> {
    proptest::sample::select(ProtocolKind::ALL.to_vec())
}

fn scenario() -> impl Strategy<Value = ScenarioName> {
    proptest::sample::select(ScenarioName::ALL.to_vec())
}

fn persistence() -> impl Strategy<Value = Persistence> {
    prop_oneof![Just(Persistence::Persistent), Just(Persistence::Volatile)]
}

fn small(seed: u64, p: Persistence) -> ScenarioParams {
    ScenarioParams { seed, persistence: p, txns: 12, clients: 2, jitter_us: 700, checkpoint_period: 4, ..ScenarioParams::default() }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn runs_are_pure_functions_of_their_inputs(k in kind(), s in scenario(), seed in 0u64..1_000, p in persistence()) {
        let params = small(seed, p);
        let (a, _) = run(s, k, &params);
        let (b, _) = run(s, k, &params);
        prop_assert_eq!(a.to_bytes(), b.to_bytes());
    }

    #[test]
    fn traces_round_trip(k in kind(), s in scenario(), seed in 0u64..1_000, p in persistence()) {
        let (t, _) = run(s, k, &small(seed, p));
        prop_assert_eq!(Trace::from_bytes(&t.to_bytes()).unwrap(), t);
    }

    #[test]
    fn no_delivery_impersonates_an_honest_node(k in kind(), s in scenario(), seed in 0u64..1_000, p in persistence()) {
        let (t, _) = run(s, k, &small(seed, p));
        prop_assert_eq!(authenticity_audit(&t), vec![]);
    }

    #[test]
    fn honest_messages_are_well_formed_everywhere(k in kind(), seed in 0u64..10_000) {
        let (t, _) = run(ScenarioName::Honest, k, &honest_params(seed, 20));
        for (_, r, e) in t.replica_events() {
            let bad = matches!(e, ReplicaEvent::Rejected { reason: RejectReason::Malformed(_), .. });
            prop_assert!(!bad, "{} rejected {:?}", r, e);
        }
    }

    #[test]
    fn persistent_components_never_repeat_a_slot(k in kind(), s in scenario(), seed in 0u64..1_000) {
        let (t, _) = run(s, k, &small(seed, Persistence::Persistent));
        let mut last: BTreeMap<(ComponentId, AttestationKind, u64), u64> = BTreeMap::new();
        for a in t.attestation_registry() {
            let a = a.attestation;
            if let Some(prev) = last.insert((a.component, a.kind, a.q), a.k) {
                prop_assert!(a.k > prev, "{:?} q={} k={} after {}", a.kind, a.q, a.k, prev);
            }
        }
    }

    #[test]
    fn volatile_duplicates_need_a_rollback(k in kind(), s in scenario(), seed in 0u64..1_000) {
        let (t, _) = run(s, k, &small(seed, Persistence::Volatile));
        let mut seen = BTreeSet::new();
        let dup = t.attestation_registry().iter().any(|a| {
            let a = &a.attestation;
            !seen.insert((a.component, a.kind, a.q, a.k))
        });
        let rolled_back = t.records.iter().any(|r| matches!(&r.event, TraceEvent::Adversary { text } if text.starts_with("roll back")));
        prop_assert!(!dup || rolled_back);
    }

    #[test]
    fn each_trusted_access_costs_its_latency(k in kind(), seed in 0u64..1_000, access in 1u64..5_000) {
        let mut p = honest_params(seed, 16);
        p.access_latency_us = access;
        let (t, _) = run(ScenarioName::Honest, k, &p);
        let mut at: BTreeMap<ReplicaId, Vec<u64>> = BTreeMap::new();
        for (time, r, e) in t.replica_events() {
            if matches!(e, ReplicaEvent::TrustedCall { .. }) {
                at.entry(r).or_default().push(time);
            }
        }
        for (r, mut times) in at {
            times.sort();
            prop_assert!(times[0] >= access, "{} first call at {}", r, times[0]);
            for w in times.windows(2) {
                prop_assert!(w[1] - w[0] >= access, "{} calls at {} and {}", r, w[0], w[1]);
            }
        }
    }

    #[test]
    fn flexi_primary_alone_calls_once_per_batch(
        k in proptest::sample::select(vec![ProtocolKind::FlexiBft, ProtocolKind::FlexiZZ, ProtocolKind::OFlexiBft, ProtocolKind::OFlexiZZ]),
        seed in 0u64..10_000,
    ) {
        let (t, v) = run(ScenarioName::Honest, k, &honest_params(seed, 30));
        prop_assert!(v.rsm_liveness_ok);
        let calls = consensus_calls(&t);
        let props = proposals(&t);
        prop_assert_eq!(calls[0], props[0]);
        prop_assert!(calls[1..].iter().all(|&c| c == 0), "{:?}", calls);
    }

    #[test]
    fn completions_are_backed_by_sent_responses(k in kind(), seed in 0u64..1_000) {
        let mut p = honest_params(seed, 12);
        p.record_traffic = true;
        let (t, _) = run(ScenarioName::Honest, k, &p);
        let mut sent: BTreeSet<(NodeId, ReplicaId, u64, u64)> = BTreeSet::new();
        for r in &t.records {
            if let TraceEvent::Send { from: NodeId::Replica(from), to, msg } = &r.event {
                if msg.kind == MsgKind::Response {
                    sent.insert((*to, *from, msg.view.unwrap(), msg.seq.unwrap()));
                }
            }
        }
        let need = k.completion_quorum(1) as usize;
        for r in &t.records {
            if let TraceEvent::Completed { client, quorum, seq, view, .. } = &r.event {
                let distinct: BTreeSet<_> = quorum.iter().collect();
                prop_assert!(distinct.len() >= need && distinct.len() == quorum.len());
                for q in quorum {
                    let matched = if k.is_flexi() && !k.is_speculative() {
                        sent.iter().any(|&(to, from, _, s)| to == NodeId::Client(*client) && from == *q && s == *seq)
                    } else {
                        sent.contains(&(NodeId::Client(*client), *q, *view, *seq))
                    };
                    prop_assert!(matched, "{} never answered {} at seq {}", q, client, seq);
                }
            }
        }
    }

    #[test]
    fn pre_gst_losses_do_not_stop_large_quorum_protocols(
        k in proptest::sample::select(vec![ProtocolKind::Pbft, ProtocolKind::FlexiBft, ProtocolKind::FlexiZZ, ProtocolKind::OFlexiBft, ProtocolKind::OFlexiZZ]),
        seed in 0u64..1_000,
        from in proptest::sample::subsequence(vec![0u32, 1, 2, 3], 1..=4),
        to in proptest::sample::subsequence(vec![0u32, 1, 2, 3], 1..=4),
        gst_rounds in 1u64..20,
    ) {
        let p = ScenarioParams { seed, txns: 6, clients: 2, jitter_us: 300, ..ScenarioParams::default() };
        let mut c = base_config(k, &p, ScenarioName::Honest).unwrap();
        let delta = c.round_bound(2);
        c.network.gst_us = gst_rounds * delta;
        c.horizon_us = 2 * c.network.gst_us + 400 * delta;
        let r = |i: &u32| NodeId::Replica(ReplicaId(*i));
        let script = AdversaryScript::none().at(0, AdversaryAction::DropMatching {
            filter: Filter::any().from(from.iter().map(r)).to(to.iter().map(r)),
        });
        let mut sim = Simulation::new(c, workload_for(&p), script).unwrap();
        sim.run();
        let v = verdict(sim.trace());
        prop_assert!(v.safety_ok);
        prop_assert!(v.rsm_liveness_ok, "{}", v.render_text());
    }
}

#[test]
fn f_silent_replicas_do_not_stop_large_quorum_protocols() {
    for k in [ProtocolKind::Pbft, ProtocolKind::FlexiBft, ProtocolKind::FlexiZZ, ProtocolKind::OFlexiBft, ProtocolKind::OFlexiZZ] {
        for f in [1u32, 2] {
            let p = ScenarioParams { f, txns: 10, clients: 2, jitter_us: 400, ..ScenarioParams::default() };
            let c = base_config(k, &p, ScenarioName::Honest).unwrap();
            let n = c.cfg.n;
            let mut script = AdversaryScript::none();
            for i in (n - f)..n {
                script = script.at(0, AdversaryAction::Crash { replica: ReplicaId(i) });
            }
            let mut sim = Simulation::new(c, workload_for(&p), script).unwrap();
            sim.run();
            let v = verdict(sim.trace());
            assert!(v.safety_ok && v.rsm_liveness_ok, "{k} f={f}\n{}", v.render_text());
        }
    }
}

#[test]
fn sequential_kinds_keep_one_proposal_open() {
    for k in ProtocolKind::ALL {
        let p = ScenarioParams { clients: 8, txns: 64, access_latency_us: 2_000, ..ScenarioParams::default() };
        let (_, v) = run(ScenarioName::Honest, k, &p);
        assert!(v.rsm_liveness_ok, "{k}");
        if k.is_sequential() {
            assert_eq!(v.stats.max_in_flight, 1, "{k}");
        } else {
            assert!(v.stats.max_in_flight > 1, "{k}");
        }
    }
}

#[test]
fn rollback_breaks_safety_only_for_small_quorums_that_forget() {
    for k in ProtocolKind::ALL {
        for pers in [Persistence::Persistent, Persistence::Volatile] {
            let p = ScenarioParams { persistence: pers, ..ScenarioParams::default() };
            let (_, v) = run(ScenarioName::RollbackAttack, k, &p);
            let expected = ScenarioName::RollbackAttack.violation_expected(k, pers);
            assert_eq!(!v.safety_ok, expected, "{k} {pers:?}\n{}", v.render_text());
            if pers == Persistence::Persistent && k.family() != flexitrust::protocol::Family::Pbft {
                assert!(v.aborted.as_deref().is_some_and(|a| a.starts_with("RollbackForbidden")), "{k}");
            }
        }
    }
}

// ---- speculative undo -------------------------------------------------------

fn kv_batch(client: u32, nonce: u64, ops: Vec<(bool, u64, u64)>) -> Batch {
    let c = ClientId(client);
    let txns = ops
        .into_iter()
        .map(|(put, key, value)| Transaction { client: c, nonce, op: if put { Op::Put { key, value } } else { Op::Get { key } } })
        .collect();
    Batch { client: c, nonce, txns }
}

fn batches(n: usize) -> impl Strategy<Value = Vec<Batch>> {
    vec((0u32..3, vec((any::<bool>(), 0u64..6, any::<u64>()), 1..4)), 0..n).prop_map(|v| {
        let mut nonces = [0u64; 3];
        v.into_iter()
            .map(|(c, ops)| {
                nonces[c as usize] += 1;
                kv_batch(c, nonces[c as usize], ops)
            })
            .collect()
    })
}

proptest! {
    #[test]
    fn undoing_speculation_matches_a_fresh_replay(stable in batches(5), spec in batches(5), adopted in batches(5)) {
        let mut base = AppState::default();
        for (i, b) in stable.iter().enumerate() {
            base.apply(b, i as u64 + 1);
        }
        let checkpoint = base.clone();
        let mut undo = Vec::new();
        for (i, b) in spec.iter().enumerate() {
            undo.push(base.apply(b, (stable.len() + i) as u64 + 1).1);
        }
        for u in undo.into_iter().rev() {
            base.revert(u);
        }
        prop_assert_eq!(&base, &checkpoint);
        let mut fresh = checkpoint.clone();
        for (i, b) in adopted.iter().enumerate() {
            let s = (stable.len() + i) as u64 + 1;
            base.apply(b, s);
            fresh.apply(b, s);
        }
        prop_assert_eq!(base, fresh);
    }
}

// ---- workload -----------------------------------------------------------------

/// Pearson's statistic against the exact truncated Zipf pmf, 19 degrees of
/// freedom; 43.82 is the 0.999 quantile.
#[test]
fn zipf_keys_follow_the_analytic_pmf() {
    for theta in [0.6, 0.99, 1.3] {
        let n = 20u64;
        let draws = 200_000;
        let w = Workload {
            n_records: n,
            n_txns: draws,
            read_fraction: 1.0,
            distribution: KeyDistribution::Zipf { theta },
            seed: 11,
        };
        let mut counts = vec![0u64; n as usize];
        for op in generate_workload(&w) {
            let Op::Get { key } = op else { panic!("read-only stream") };
            counts[key as usize] += 1;
        }
        let norm: f64 = (1..=n).map(|r| (r as f64).powf(-theta)).sum();
        let chi2: f64 = counts
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let e = draws as f64 * ((i + 1) as f64).powf(-theta) / norm;
                (c as f64 - e).powi(2) / e
            })
            .sum();
        assert!(chi2 < 43.82, "theta={theta} chi2={chi2:.2}");
    }
}

#[test]
fn uniform_keys_cover_the_range_evenly() {
    let w = Workload { n_records: 10, n_txns: 100_000, read_fraction: 0.3, distribution: KeyDistribution::Uniform, seed: 5 };
    let ops = generate_workload(&w);
    let mut counts = [0u64; 10];
    let mut reads = 0;
    for op in &ops {
        match op {
            Op::Get { key } => {
                reads += 1;
                counts[*key as usize] += 1
            }
            Op::Put { key, .. } => counts[*key as usize] += 1,
            Op::Noop => unreachable!(),
        }
    }
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - 10_000.0).powi(2) / 10_000.0).sum();
    assert!(chi2 < 27.88, "chi2={chi2:.2}");
    assert!((reads as f64 / 100_000.0 - 0.3).abs() < 0.01);
}

#[test]
fn consensus_calls_exclude_provisioning() {
    let (t, _) = run(ScenarioName::Honest, ProtocolKind::MinBft, &ScenarioParams { txns: 0, ..ScenarioParams::default() });
    assert!(t.replica_events().all(|(_, _, e)| matches!(e, ReplicaEvent::TrustedCall { op: TrustedOp::Create, .. })));
    assert_eq!(consensus_calls(&t), vec![0, 0, 0]);
}

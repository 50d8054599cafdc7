use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, HashSet, VecDeque};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::client::{ClientAction, ClientSession};
use crate::codec::to_bytes;
use crate::message::{MsgKind, ProtocolMessage, VerifyContext};
use crate::protocol::{Dest, Effects, ProtocolKind, ReplicaConfig, ReplicaEvent, ReplicaState, TimerKind, TimerOp};
use crate::sim::adversary::{AdversaryAction, AdversaryScript, Filter, Forgery};
use crate::sim::network::NetworkModel;
use crate::trace::{MsgInfo, Trace, TraceEvent, TraceHeader};
use crate::trusted::{Attestation, Persistence, Snapshot, TrustedError};
use crate::types::{digest_of, Batch, ClientId, ConfigError, Digest, KeyRing, NodeId, Principal, ReplicaId, SystemConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Timeouts {
    pub view_change_us: u64,
    pub forward_us: u64,
    pub client_retry_us: u64,
}

#[derive(Clone, Debug)]
pub struct SimConfig {
    pub kind: ProtocolKind,
    pub cfg: SystemConfig,
    pub persistence: Persistence,
    pub access_latency_us: u64,
    pub pipeline_width: u32,
    pub network: NetworkModel,
    pub per_message_us: u64,
    pub per_verify_us: u64,
    /// Derived from the load when absent, see [`SimConfig::default_timeouts`].
    pub timeouts: Option<Timeouts>,
    pub completion_quorum: Option<u32>,
    pub horizon_us: u64,
    pub seed: u64,
    /// Record every send and delivery. Needed for the authenticity audit,
    /// costly for long throughput runs.
    pub record_traffic: bool,
    /// Key material for clients that only the adversary drives.
    pub extra_clients: u32,
    pub scenario: String,
}

impl SimConfig {
    pub fn new(kind: ProtocolKind, f: u32) -> Result<Self, ConfigError> {
        let cfg = SystemConfig::new(f, kind.regime(), 1, 16)?;
        Ok(SimConfig {
            kind,
            cfg,
            persistence: Persistence::Persistent,
            access_latency_us: 0,
            pipeline_width: 64,
            network: NetworkModel::uniform(500, 0),
            per_message_us: 0,
            per_verify_us: 0,
            timeouts: None,
            completion_quorum: None,
            horizon_us: 10_000_000,
            seed: 0,
            record_traffic: true,
            extra_clients: 0,
            scenario: "custom".into(),
        })
    }

    /// One bound on how long an honest round may take under this load.
    pub fn round_bound(&self, clients: u32) -> u64 {
        let accesses = self.kind.serial_accesses() as u64 * self.access_latency_us;
        let per_msg = (self.per_message_us + 2 * self.per_verify_us) * 4 * self.cfg.n as u64;
        self.network.max_delay() + (clients as u64 + 1) * (accesses + per_msg)
    }

    pub fn default_timeouts(&self, clients: u32) -> Timeouts {
        let d = self.round_bound(clients).max(1);
        Timeouts { view_change_us: 10 * d, forward_us: 10 * d, client_retry_us: 8 * d }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SimError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0} faulty replicas exceed the budget of {1}")]
    ByzantineBudget(usize, u32),
    #[error("replica {0} does not exist")]
    UnknownReplica(ReplicaId),
}

#[derive(Clone, Debug)]
enum Pending {
    Deliver { from: NodeId, to: NodeId, msg: ProtocolMessage },
    Timer { node: NodeId, id: u64, kind: TimerKind },
    Adversary(usize),
    ClientNext(ClientId),
}

#[derive(Debug)]
struct Queued {
    at: u64,
    tiebreak: u64,
    ev: Pending,
}

impl PartialEq for Queued {
    fn eq(&self, o: &Self) -> bool {
        (self.at, self.tiebreak) == (o.at, o.tiebreak)
    }
}
impl Eq for Queued {}
impl PartialOrd for Queued {
    fn partial_cmp(&self, o: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(o))
    }
}
impl Ord for Queued {
    fn cmp(&self, o: &Self) -> std::cmp::Ordering {
        (self.at, self.tiebreak).cmp(&(o.at, o.tiebreak))
    }
}

struct ClientSlot {
    session: ClientSession,
    work: VecDeque<Batch>,
    retry_timer: Option<u64>,
}

enum FilterAction {
    Delay(u64),
    Drop,
}

pub struct Simulation {
    pub config: SimConfig,
    timeouts: Timeouts,
    keys: KeyRing,
    verifier: VerifyContext,
    replicas: Vec<ReplicaState>,
    clients: Vec<ClientSlot>,
    script: AdversaryScript,
    queue: BinaryHeap<Reverse<Queued>>,
    tiebreak: u64,
    rng: ChaCha8Rng,
    filters: Vec<(Filter, FilterAction)>,
    snapshots: BTreeMap<String, Snapshot>,
    crashed: BTreeSet<ReplicaId>,
    cancelled: HashSet<(NodeId, u64)>,
    issued: HashSet<Digest>,
    last_forged: BTreeMap<(ReplicaId, u64), Attestation>,
    next_client_timer: u64,
    trace: Trace,
    now: u64,
    started: bool,
    halted: bool,
}

impl Simulation {
    /// `workload[i]` is the closed-loop batch sequence of client `i`.
    pub fn new(config: SimConfig, workload: Vec<Vec<Batch>>, script: AdversaryScript) -> Result<Self, SimError> {
        let cfg = config.cfg;
        if script.byzantine.len() > cfg.f as usize {
            return Err(SimError::ByzantineBudget(script.byzantine.len(), cfg.f));
        }
        let touched = script.byzantine.iter().copied().chain(script.actions.iter().filter_map(|(_, a)| match a {
            AdversaryAction::SnapshotTC { replica, .. }
            | AdversaryAction::Rollback { replica, .. }
            | AdversaryAction::Crash { replica } => Some(*replica),
            AdversaryAction::SendForged { forgery: Forgery::Proposal { replica, .. } | Forgery::Vote { replica, .. }, .. } => {
                Some(*replica)
            }
            _ => None,
        }));
        for r in touched {
            if r.0 >= cfg.n {
                return Err(SimError::UnknownReplica(r));
            }
        }
        let n_clients = workload.len() as u32;
        let keys = KeyRing::new(config.seed ^ 0x5eed_f1e7, cfg.n, n_clients + config.extra_clients);
        let timeouts = config.timeouts.unwrap_or_else(|| config.default_timeouts(n_clients));
        let rc = ReplicaConfig {
            kind: config.kind,
            cfg,
            persistence: config.persistence,
            access_latency_us: config.access_latency_us,
            pipeline_width: config.pipeline_width,
            view_change_timeout_us: timeouts.view_change_us,
            forward_timeout_us: timeouts.forward_us,
            per_message_us: config.per_message_us,
            per_verify_us: config.per_verify_us,
        };
        let replicas = cfg.replicas().map(|r| ReplicaState::new(r, rc.clone(), &keys)).collect();
        let clients = workload
            .into_iter()
            .enumerate()
            .map(|(i, w)| ClientSlot {
                session: ClientSession::new(ClientId(i as u32), config.kind, cfg, config.completion_quorum, &keys),
                work: w.into(),
                retry_timer: None,
            })
            .collect();
        let header = TraceHeader {
            protocol: config.kind,
            f: cfg.f,
            n: cfg.n,
            seed: config.seed,
            horizon_us: config.horizon_us,
            gst_us: config.network.gst_us,
            scenario: config.scenario.clone(),
            byzantine: script.byzantine.iter().copied().collect(),
            persistence: config.persistence,
            clients: n_clients,
        };
        Ok(Simulation {
            verifier: VerifyContext { keys: keys.clone(), cfg, kind: config.kind },
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            timeouts,
            keys,
            replicas,
            clients,
            script,
            queue: BinaryHeap::new(),
            tiebreak: 0,
            filters: Vec::new(),
            snapshots: BTreeMap::new(),
            crashed: BTreeSet::new(),
            cancelled: HashSet::new(),
            issued: HashSet::new(),
            last_forged: BTreeMap::new(),
            next_client_timer: 0,
            trace: Trace::new(header),
            now: 0,
            started: false,
            halted: false,
            config,
        })
    }

    pub fn timeouts(&self) -> Timeouts {
        self.timeouts
    }

    pub fn keys(&self) -> &KeyRing {
        &self.keys
    }

    pub fn replicas(&self) -> &[ReplicaState] {
        &self.replicas
    }

    pub fn trace(&self) -> &Trace {
        &self.trace
    }

    pub fn into_trace(self) -> Trace {
        self.trace
    }

    pub fn now(&self) -> u64 {
        self.now
    }

    fn push(&mut self, at: u64, ev: Pending) {
        self.tiebreak += 1;
        self.queue.push(Reverse(Queued { at, tiebreak: self.tiebreak, ev }));
    }

    fn start(&mut self) {
        self.started = true;
        for i in 0..self.replicas.len() {
            let fx = self.replicas[i].start(0);
            self.apply(ReplicaId(i as u32), fx);
        }
        for i in 0..self.script.actions.len() {
            let at = self.script.actions[i].0;
            self.push(at, Pending::Adversary(i));
        }
        for c in 0..self.clients.len() {
            self.push(0, Pending::ClientNext(ClientId(c as u32)));
        }
    }

    /// Runs to quiescence, the horizon (exclusive), or an aborting adversary
    /// action.
    pub fn run(&mut self) -> &Trace {
        self.run_until(self.config.horizon_us);
        &self.trace
    }

    pub fn run_until(&mut self, limit: u64) {
        if !self.started {
            self.start();
        }
        let limit = limit.min(self.config.horizon_us);
        while !self.halted {
            match self.queue.peek() {
                Some(Reverse(q)) if q.at < limit => {}
                _ => break,
            }
            let Reverse(q) = self.queue.pop().unwrap();
            self.now = q.at;
            self.step(q.ev);
        }
    }

    pub fn halted(&self) -> bool {
        self.halted
    }

    fn step(&mut self, ev: Pending) {
        match ev {
            Pending::Deliver { from, to, msg } => self.deliver(from, to, msg),
            Pending::Timer { node, id, kind } => self.fire(node, id, kind),
            Pending::Adversary(i) => {
                let action = self.script.actions[i].1.clone();
                self.adversary(action);
            }
            Pending::ClientNext(c) => self.client_next(c),
        }
    }

    fn info(msg: &ProtocolMessage) -> MsgInfo {
        MsgInfo { kind: msg.kind(), signer: msg.signer(), digest: msg.id_digest(), view: msg.view(), seq: msg.seq() }
    }

    fn is_byzantine(&self, node: NodeId) -> bool {
        match node {
            NodeId::Replica(r) => self.script.byzantine.contains(&r),
            NodeId::Client(c) => c.0 >= self.clients.len() as u32,
        }
    }

    fn route(&mut self, at: u64, from: NodeId, to: NodeId, msg: ProtocolMessage) {
        let at = at.max(self.now);
        let traffic = self.config.record_traffic;
        let kind = msg.kind();
        let gst = self.config.network.gst_us;
        let faulty = self.is_byzantine(from);
        let mut hold_until = None;
        for (f, action) in &self.filters {
            if !f.matches(from, to, kind) {
                continue;
            }
            match action {
                FilterAction::Drop if faulty || at < gst => {
                    self.trace.push(at, TraceEvent::Dropped { from, to, msg: Self::info(&msg) });
                    return;
                }
                FilterAction::Delay(until) if at < gst => {
                    let u = (*until).min(gst);
                    hold_until = Some(hold_until.map_or(u, |h: u64| h.max(u)));
                }
                _ => {}
            }
        }
        if traffic {
            self.trace.push(at, TraceEvent::Send { from, to, msg: Self::info(&msg) });
        }
        let mut deliver_at = at + self.config.network.sample(from, to, &mut self.rng);
        if let Some(u) = hold_until {
            if u > deliver_at {
                deliver_at = u;
                if traffic {
                    self.trace.push(at, TraceEvent::Delayed { from, to, msg: Self::info(&msg), until: u });
                }
            }
        }
        self.push(deliver_at, Pending::Deliver { from, to, msg });
    }

    fn apply(&mut self, r: ReplicaId, fx: Effects) {
        for note in fx.notes {
            if let ReplicaEvent::TrustedCall { attestation, .. } = &note.event {
                self.issued.insert(att_key(attestation));
            }
            self.trace.push(note.at, TraceEvent::Replica { replica: r, event: note.event });
        }
        let from = NodeId::Replica(r);
        for out in fx.sends {
            match out.to {
                Dest::Replica(to) => self.route(out.at, from, NodeId::Replica(to), out.msg),
                Dest::Client(c) => self.route(out.at, from, NodeId::Client(c), out.msg),
                Dest::Others => {
                    for to in self.config.cfg.replicas().filter(|x| *x != r) {
                        self.route(out.at, from, NodeId::Replica(to), out.msg.clone());
                    }
                }
            }
        }
        for t in fx.timers {
            match t {
                TimerOp::Set { id, at, kind } => self.push(at.max(self.now), Pending::Timer { node: from, id, kind }),
                TimerOp::Cancel { id } => {
                    self.cancelled.insert((from, id));
                }
            }
        }
    }

    fn deliver(&mut self, from: NodeId, to: NodeId, msg: ProtocolMessage) {
        match to {
            NodeId::Replica(r) => {
                if self.crashed.contains(&r) {
                    return;
                }
                if self.config.record_traffic {
                    self.trace.push(self.now, TraceEvent::Deliver { from, to, msg: Self::info(&msg) });
                }
                let fx = self.replicas[r.index()].handle_message(self.now, from, msg);
                self.apply(r, fx);
            }
            NodeId::Client(c) => {
                let Some(slot) = self.clients.get_mut(c.0 as usize) else { return };
                if self.config.record_traffic {
                    self.trace.push(self.now, TraceEvent::Deliver { from, to, msg: Self::info(&msg) });
                }
                let ProtocolMessage::Response(resp) = msg else { return };
                if self.verifier.check_response(&resp).is_err() {
                    return;
                }
                if let Some(done) = slot.session.on_response(resp, self.now) {
                    if let Some(t) = slot.retry_timer.take() {
                        self.cancelled.insert((to, t));
                    }
                    self.trace.push(
                        self.now,
                        TraceEvent::Completed {
                            client: c,
                            txn: done.txn,
                            txns: done.txns,
                            seq: done.seq,
                            view: done.view,
                            quorum: done.quorum,
                            submitted_at: done.submitted_at,
                        },
                    );
                    self.push(self.now, Pending::ClientNext(c));
                }
            }
        }
    }

    fn arm_client_timer(&mut self, c: ClientId) {
        let id = self.next_client_timer;
        self.next_client_timer += 1;
        self.clients[c.0 as usize].retry_timer = Some(id);
        let at = self.now + self.timeouts.client_retry_us;
        self.push(at, Pending::Timer { node: NodeId::Client(c), id, kind: TimerKind::ClientRetry });
    }

    fn client_next(&mut self, c: ClientId) {
        let slot = &mut self.clients[c.0 as usize];
        if slot.session.pending().is_some() {
            return;
        }
        let Some(batch) = slot.work.pop_front() else { return };
        let txn = batch.id();
        let action = slot.session.submit(batch, self.now);
        self.trace.push(self.now, TraceEvent::Submitted { client: c, txn });
        self.client_send(c, action);
        self.arm_client_timer(c);
    }

    fn client_send(&mut self, c: ClientId, action: ClientAction) {
        let from = NodeId::Client(c);
        match action {
            ClientAction::ToPrimary(r, msg) => self.route(self.now, from, NodeId::Replica(r), msg),
            ClientAction::Broadcast(msg) => {
                for r in self.config.cfg.replicas() {
                    self.route(self.now, from, NodeId::Replica(r), msg.clone());
                }
            }
        }
    }

    fn fire(&mut self, node: NodeId, id: u64, kind: TimerKind) {
        if self.cancelled.remove(&(node, id)) {
            return;
        }
        match node {
            NodeId::Replica(r) => {
                if self.crashed.contains(&r) {
                    return;
                }
                self.trace.push(self.now, TraceEvent::TimerFired { node, kind });
                let fx = self.replicas[r.index()].handle_timer(self.now, id, kind);
                self.apply(r, fx);
            }
            NodeId::Client(c) => {
                let i = c.0 as usize;
                if self.clients[i].retry_timer != Some(id) {
                    return;
                }
                self.clients[i].retry_timer = None;
                if let Some(action) = self.clients[i].session.on_timeout() {
                    self.trace.push(self.now, TraceEvent::TimerFired { node, kind });
                    self.client_send(c, action);
                    self.arm_client_timer(c);
                }
            }
        }
    }

    fn refuse(&mut self, why: String) {
        self.trace.push(self.now, TraceEvent::Adversary { text: format!("refused: {why}") });
    }

    fn adversary(&mut self, action: AdversaryAction) {
        self.trace.push(self.now, TraceEvent::Adversary { text: action.describe() });
        match action {
            AdversaryAction::DelayMatching { filter, until } => self.filters.push((filter, FilterAction::Delay(until))),
            AdversaryAction::DropMatching { filter } => self.filters.push((filter, FilterAction::Drop)),
            AdversaryAction::ClearFilters => self.filters.clear(),
            AdversaryAction::Crash { replica } => {
                self.crashed.insert(replica);
                self.trace.push(self.now, TraceEvent::Crashed { replica });
            }
            AdversaryAction::SnapshotTC { replica, label } => {
                if !self.script.byzantine.contains(&replica) {
                    return self.refuse(format!("{replica} is not faulty"));
                }
                let snap = self.replicas[replica.index()].tc.snapshot();
                self.snapshots.insert(label, snap);
            }
            AdversaryAction::Rollback { replica, label } => {
                if !self.script.byzantine.contains(&replica) {
                    return self.refuse(format!("{replica} is not faulty"));
                }
                let Some(snap) = self.snapshots.get(&label).cloned() else {
                    return self.refuse(format!("no snapshot {label:?}"));
                };
                if let Err(e) = self.replicas[replica.index()].tc.adversary_rollback(&snap) {
                    self.trace.push(self.now, TraceEvent::Aborted { reason: format!("{e:?}: {e}") });
                    self.halted = true;
                }
            }
            AdversaryAction::SendForged { from, to, forgery } => self.forge(from, to, forgery),
        }
    }

    fn forge(&mut self, from: NodeId, to: Vec<NodeId>, forgery: Forgery) {
        if !self.is_byzantine(from) {
            return self.refuse(format!("{from} is not faulty"));
        }
        let msg = match forgery {
            Forgery::Raw(msg) => {
                let signer_ok = match msg.signer() {
                    Principal::Replica(r) => self.script.byzantine.contains(&r),
                    Principal::Component(c) => self.script.byzantine.contains(&ReplicaId(c.0)),
                    Principal::Client(c) => self.is_byzantine(NodeId::Client(c)),
                };
                if !signer_ok {
                    return self.refuse(format!("{} is signed by an honest party", msg.kind()));
                }
                if let Some(a) = msg.attestations().into_iter().find(|a| !self.issued.contains(&att_key(a))) {
                    return self.refuse(format!("attestation (q={},k={}) was never issued", a.q, a.k));
                }
                msg
            }
            Forgery::Proposal { replica, seq, batch } => {
                if !self.script.byzantine.contains(&replica) {
                    return self.refuse(format!("{replica} is not faulty"));
                }
                match self.replicas[replica.index()].forge_proposal(seq, batch) {
                    Ok(pp) => {
                        if let Some(a) = &pp.attestation {
                            self.issued.insert(att_key(a));
                            self.last_forged.insert((replica, seq), a.clone());
                            self.trace.push(self.now, TraceEvent::Forged { replica, attestation: a.clone() });
                        }
                        ProtocolMessage::Preprepare(pp)
                    }
                    Err(e) => return self.refuse(forge_error(e)),
                }
            }
            Forgery::Vote { replica, kind, seq, digest } => {
                if !self.script.byzantine.contains(&replica) {
                    return self.refuse(format!("{replica} is not faulty"));
                }
                let echo = self.last_forged.get(&(replica, seq)).cloned();
                match self.replicas[replica.index()].forge_vote(kind, seq, digest, echo) {
                    Ok(v) => {
                        if let Some(a) = &v.attestation {
                            if self.issued.insert(att_key(a)) {
                                self.trace.push(self.now, TraceEvent::Forged { replica, attestation: a.clone() });
                            }
                        }
                        match kind {
                            MsgKind::Commit => ProtocolMessage::Commit(v),
                            _ => ProtocolMessage::Prepare(v),
                        }
                    }
                    Err(e) => return self.refuse(forge_error(e)),
                }
            }
        };
        for t in to {
            self.route(self.now, from, t, msg.clone());
        }
    }

    /// Clients that still have work or an outstanding request.
    pub fn busy_clients(&self) -> usize {
        self.clients.iter().filter(|c| c.session.pending().is_some() || !c.work.is_empty()).count()
    }

    pub fn kind_of(&self) -> ProtocolKind {
        self.config.kind
    }
}

fn forge_error(e: TrustedError) -> String {
    format!("component refused: {e}")
}

fn att_key(a: &Attestation) -> Digest {
    digest_of(&to_bytes(a))
}

/// Convenience wrapper: build, run and return the trace.
pub fn run(config: SimConfig, workload: Vec<Vec<Batch>>, script: AdversaryScript) -> Result<Trace, SimError> {
    let mut sim = Simulation::new(config, workload, script)?;
    sim.run();
    Ok(sim.into_trace())
}

/// Messages whose claimed honest signer never emitted them, as
/// `(record index, kind)`. Empty when traffic was not recorded.
pub fn authenticity_audit(trace: &Trace) -> Vec<(usize, MsgKind)> {
    let byz: BTreeSet<ReplicaId> = trace.header.byzantine.iter().copied().collect();
    let clients = trace.header.clients;
    let honest = |p: Principal| match p {
        Principal::Replica(r) => !byz.contains(&r),
        Principal::Component(c) => !byz.contains(&ReplicaId(c.0)),
        Principal::Client(c) => c.0 < clients || c == ClientId::NOOP,
    };
    let mut originated: HashSet<(NodeId, Digest)> = HashSet::new();
    let mut bad = Vec::new();
    for (i, r) in trace.records.iter().enumerate() {
        match &r.event {
            TraceEvent::Send { from, msg, .. } => {
                originated.insert((*from, msg.digest));
            }
            TraceEvent::Deliver { msg, .. } if honest(msg.signer) && !originated.contains(&(msg.signer.node(), msg.digest)) => {
                bad.push((i, msg.kind));
            }
            _ => {}
        }
    }
    bad
}

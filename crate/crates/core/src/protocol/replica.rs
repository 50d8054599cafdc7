//! One replica's state machine, shared by every protocol kind.
//!
//! Handlers are pure with respect to the outside world: they take a message
//! or timer and return [`Effects`]. Trusted-component calls advance the
//! replica's local clock, and every message a handler emits is stamped with
//! the clock value at the moment it was produced.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::mem;

use crate::message::{
    log_id, vote_record_digest, Certificate, Checkpoint, MsgKind, NewView, Phase, Preprepare,
    ProtocolMessage, Request, Response, VerifyContext, ViewChange, Vote,
};
use crate::protocol::io::{
    Dest, Effects, Note, Outgoing, RejectReason, ReplicaEvent, TimerKind, TimerOp, TrustedOp,
};
use crate::protocol::viewchange::{select_reproposals, Selection};
use crate::protocol::{Family, ProtocolKind};
use crate::state::{AppState, Outcome, Undo};
use crate::trusted::{Attestation, Persistence, TrustedComponent, TrustedError};
use crate::types::{
    Batch, ClientId, Digest, KeyRing, NodeId, Principal, ReplicaId, Signer, SystemConfig, TxnId,
};

#[derive(Clone, Debug)]
pub struct ReplicaConfig {
    pub kind: ProtocolKind,
    pub cfg: SystemConfig,
    pub persistence: Persistence,
    pub access_latency_us: u64,
    pub pipeline_width: u32,
    pub view_change_timeout_us: u64,
    pub forward_timeout_us: u64,
    /// Fixed handling cost charged for every message received.
    pub per_message_us: u64,
    /// Charged per authenticator or attestation verified.
    pub per_verify_us: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Status {
    Preprepared,
    Prepared,
    Committed,
}

#[derive(Clone, Debug)]
struct Slot {
    pp: Preprepare,
    status: Status,
    prepares: BTreeMap<Digest, BTreeMap<ReplicaId, Vote>>,
    commits: BTreeMap<Digest, BTreeSet<ReplicaId>>,
    /// Our own votes for this slot, kept for retransmission.
    sent: Vec<ProtocolMessage>,
}

/// Votes that arrived before their proposal.
#[derive(Clone, Debug, Default)]
struct EarlyVotes {
    prepares: BTreeMap<Digest, BTreeMap<ReplicaId, Vote>>,
    commits: BTreeMap<Digest, BTreeSet<ReplicaId>>,
}

#[derive(Clone, Debug)]
struct Stable {
    seq: u64,
    state: AppState,
}

#[derive(Clone, Debug)]
pub struct ReplicaState {
    pub id: ReplicaId,
    pub rc: ReplicaConfig,
    ctx: VerifyContext,
    signer: Signer,
    pub tc: TrustedComponent,

    pub view: u64,
    pub in_view_change: bool,
    /// Counter the current view's primary attests proposals with.
    view_counter: u64,

    slots: BTreeMap<u64, Slot>,
    early: BTreeMap<u64, EarlyVotes>,

    pub app: AppState,
    pub watermark: u64,
    executed: BTreeMap<u64, Digest>,
    undo: BTreeMap<u64, Undo>,
    txn_seq: BTreeMap<TxnId, u64>,
    reply_cache: BTreeMap<ClientId, Response>,
    stable: Stable,
    checkpoint_votes: BTreeMap<u64, BTreeMap<ReplicaId, Checkpoint>>,

    // primary side
    next_seq: u64,
    own_counter: Option<u64>,
    queue: VecDeque<Batch>,
    queued: BTreeSet<TxnId>,
    proposed: BTreeSet<TxnId>,
    held: Option<Preprepare>,
    in_flight: BTreeSet<u64>,
    zz_acks: BTreeMap<u64, BTreeSet<ReplicaId>>,

    // backup side
    vote_counter: Option<u64>,
    ea_next: [u64; 2],
    ea_ready: [BTreeSet<u64>; 2],
    forwarded: BTreeMap<TxnId, u64>,

    // view change
    vc_msgs: BTreeMap<u64, BTreeMap<ReplicaId, ViewChange>>,
    vc_timer: Option<u64>,
    vc_timeout: u64,
    new_view_sent: BTreeSet<u64>,
    buffered: Vec<(NodeId, ProtocolMessage)>,

    next_timer: u64,
    clock: u64,
    out: Effects,
}

const MAX_BUFFERED: usize = 4096;

impl ReplicaState {
    pub fn new(id: ReplicaId, rc: ReplicaConfig, keys: &KeyRing) -> Self {
        let ctx = VerifyContext { keys: keys.clone(), cfg: rc.cfg, kind: rc.kind };
        let tc = TrustedComponent::new(id, rc.persistence, rc.access_latency_us, keys);
        ReplicaState {
            id,
            ctx,
            signer: keys.signer(Principal::Replica(id)),
            tc,
            view: 0,
            in_view_change: false,
            view_counter: 0,
            slots: BTreeMap::new(),
            early: BTreeMap::new(),
            app: AppState::default(),
            watermark: 0,
            executed: BTreeMap::new(),
            undo: BTreeMap::new(),
            txn_seq: BTreeMap::new(),
            reply_cache: BTreeMap::new(),
            stable: Stable { seq: 0, state: AppState::default() },
            checkpoint_votes: BTreeMap::new(),
            next_seq: 1,
            own_counter: None,
            queue: VecDeque::new(),
            queued: BTreeSet::new(),
            proposed: BTreeSet::new(),
            held: None,
            in_flight: BTreeSet::new(),
            zz_acks: BTreeMap::new(),
            vote_counter: None,
            ea_next: [1, 1],
            ea_ready: [BTreeSet::new(), BTreeSet::new()],
            forwarded: BTreeMap::new(),
            vc_msgs: BTreeMap::new(),
            vc_timer: None,
            vc_timeout: rc.view_change_timeout_us,
            new_view_sent: BTreeSet::new(),
            buffered: Vec::new(),
            next_timer: 0,
            clock: 0,
            out: Effects::default(),
            rc,
        }
    }

    fn kind(&self) -> ProtocolKind {
        self.rc.kind
    }

    fn f(&self) -> u32 {
        self.rc.cfg.f
    }

    pub fn primary(&self) -> ReplicaId {
        self.rc.cfg.primary(self.view)
    }

    pub fn is_primary(&self) -> bool {
        self.primary() == self.id
    }

    pub fn stable_seq(&self) -> u64 {
        self.stable.seq
    }

    pub fn in_flight(&self) -> usize {
        self.in_flight.len()
    }

    pub fn executed_digest(&self, seq: u64) -> Option<Digest> {
        self.executed.get(&seq).copied()
    }

    /// Fingerprint of the safety-relevant state, for state-space search.
    pub fn fingerprint(&self) -> Vec<u8> {
        let mut e = crate::codec::Encoder::new();
        e.u64(self.view);
        e.u8(self.in_view_change as u8);
        e.u64(self.watermark);
        for (s, slot) in &self.slots {
            e.u64(*s);
            e.put(&slot.pp.digest);
            e.u8(slot.status as u8);
            for (d, vs) in &slot.prepares {
                e.put(d);
                e.u32(vs.len() as u32);
            }
        }
        for (s, d) in &self.executed {
            e.u64(*s);
            e.put(d);
        }
        e.finish()
    }

    fn window(&self) -> usize {
        if self.kind().is_sequential() {
            1
        } else {
            self.rc.pipeline_width.max(1) as usize
        }
    }

    // ---- effect plumbing -------------------------------------------------

    fn begin(&mut self, now: u64) {
        self.clock = self.clock.max(now) + self.rc.per_message_us;
    }

    fn finish(&mut self) -> Effects {
        mem::take(&mut self.out)
    }

    /// Earliest time this replica can start handling another event.
    pub fn busy_until(&self) -> u64 {
        self.clock
    }

    fn note(&mut self, event: ReplicaEvent) {
        self.out.notes.push(Note { at: self.clock, event });
    }

    fn send(&mut self, to: Dest, msg: ProtocolMessage) {
        self.out.sends.push(Outgoing { at: self.clock, to, msg });
    }

    fn set_timer(&mut self, after: u64, kind: TimerKind) -> u64 {
        let id = self.next_timer;
        self.next_timer += 1;
        self.out.timers.push(TimerOp::Set { id, at: self.clock + after, kind });
        id
    }

    fn cancel_timer(&mut self, id: u64) {
        self.out.timers.push(TimerOp::Cancel { id });
    }

    fn trusted<T>(
        &mut self,
        op: TrustedOp,
        call: impl FnOnce(&mut TrustedComponent) -> Result<T, TrustedError>,
        att_of: impl Fn(&T) -> &Attestation,
    ) -> Option<T> {
        match call(&mut self.tc) {
            Ok(v) => {
                self.clock += self.rc.access_latency_us;
                let attestation = att_of(&v).clone();
                self.note(ReplicaEvent::TrustedCall { op, attestation });
                Some(v)
            }
            Err(_) => {
                self.note(ReplicaEvent::Rejected {
                    kind: MsgKind::Preprepare,
                    reason: RejectReason::Refused,
                });
                None
            }
        }
    }

    fn create_counter(&mut self, k0: u64) -> (u64, Attestation) {
        self.trusted(TrustedOp::Create, |tc| Ok(tc.create(k0)), |(_, a)| a).unwrap()
    }

    fn append_f(&mut self, q: u64, x: Digest) -> Option<(u64, Attestation)> {
        self.trusted(TrustedOp::AppendF, |tc| tc.append_f(q, x), |(_, a)| a)
    }

    fn log_append(&mut self, q: u64, k: u64, x: Digest) -> Option<Attestation> {
        self.tc.ensure_log(q);
        self.trusted(TrustedOp::LogAppend, |tc| tc.log_append(q, Some(k), x), |a| a)
    }

    // ---- entry points ----------------------------------------------------

    /// Provisioning at time zero: the first primary's proposal counter and,
    /// where backups attest with counters, their vote counters.
    pub fn start(&mut self, now: u64) -> Effects {
        self.clock = now;
        let family = self.kind().family();
        if matches!(family, Family::Min | Family::Flexi) && self.is_primary() {
            let (q, _) = self.create_counter(0);
            self.own_counter = Some(q);
            self.view_counter = q;
        }
        if self.kind() == ProtocolKind::MinBft && !self.is_primary() {
            let (q, _) = self.create_counter(0);
            self.vote_counter = Some(q);
        }
        self.finish()
    }

    pub fn handle_message(&mut self, now: u64, from: NodeId, msg: ProtocolMessage) -> Effects {
        self.begin(now);
        self.clock += self.rc.per_verify_us * (1 + msg.attestations().len() as u64);
        match self.ctx.check_well_formed(&msg) {
            Ok(()) => self.dispatch(from, msg),
            Err(reason) => self.note(ReplicaEvent::Rejected {
                kind: msg.kind(),
                reason: RejectReason::Malformed(reason),
            }),
        }
        self.finish()
    }

    pub fn handle_timer(&mut self, now: u64, id: u64, kind: TimerKind) -> Effects {
        self.begin(now);
        match kind {
            TimerKind::RequestForwarded(txn) => {
                if self.forwarded.get(&txn) == Some(&id) {
                    self.forwarded.remove(&txn);
                    let done = self.app.executed(txn.client, txn.nonce);
                    if !done && !self.in_view_change {
                        self.start_view_change(self.view + 1);
                    }
                }
            }
            TimerKind::ViewChange(target) => {
                if self.vc_timer == Some(id) {
                    self.vc_timer = None;
                    if self.in_view_change && self.view == target {
                        self.start_view_change(target + 1);
                    }
                }
            }
            TimerKind::ClientRetry => {}
        }
        self.finish()
    }

    fn dispatch(&mut self, from: NodeId, msg: ProtocolMessage) {
        if let Some(v) = msg.view() {
            let normal_msg = matches!(
                msg.kind(),
                MsgKind::Preprepare | MsgKind::Prepare | MsgKind::Commit | MsgKind::Response
            );
            if normal_msg {
                if v < self.view {
                    return;
                }
                if v > self.view || self.in_view_change {
                    if msg.kind() != MsgKind::Response && self.buffered.len() < MAX_BUFFERED {
                        self.buffered.push((from, msg));
                    }
                    return;
                }
            }
        }
        match msg {
            ProtocolMessage::Request(m) => self.on_request(from, m),
            ProtocolMessage::Preprepare(m) => self.on_preprepare(m),
            ProtocolMessage::Prepare(m) => self.on_prepare(m),
            ProtocolMessage::Commit(m) => self.on_commit(m),
            ProtocolMessage::Response(m) => self.on_response(m),
            ProtocolMessage::Checkpoint(m) => self.on_checkpoint(m),
            ProtocolMessage::ViewChange(m) => self.on_view_change(m),
            ProtocolMessage::NewView(m) => self.on_new_view(m),
        }
    }

    // ---- client requests ---------------------------------------------------

    fn on_request(&mut self, from: NodeId, req: Request) {
        let id = req.batch.id();
        if self.app.executed(id.client, id.nonce) {
            let cached = self.reply_cache.get(&id.client).filter(|r| r.txn == id).cloned();
            // state adopted from a checkpoint carries the result without a cached reply
            let r = cached.or_else(|| {
                let e = self.app.cached(id.client, id.nonce)?.clone();
                Some(Response::new(self.view, e.seq, id, e.result, self.id, &self.signer))
            });
            if let Some(r) = r {
                self.send(Dest::Client(id.client), ProtocolMessage::Response(r));
            }
            if self.kind().is_speculative() {
                self.relay_proposal(id);
            } else {
                self.retransmit(id);
            }
            return;
        }
        if self.in_view_change {
            if self.rc.cfg.primary(self.view) == self.id {
                self.enqueue(req.batch);
            }
            return;
        }
        if self.is_primary() {
            let retry = self.txn_seq.contains_key(&id);
            self.enqueue(req.batch);
            self.try_propose();
            if retry {
                self.retransmit(id);
            }
        } else if matches!(from, NodeId::Client(_)) {
            let primary = self.primary();
            self.send(Dest::Replica(primary), ProtocolMessage::Request(req));
            self.retransmit(id);
            // armed until execution: an accepted slot can still be starved of votes
            if !self.forwarded.contains_key(&id) {
                let t = self.set_timer(self.rc.forward_timeout_us, TimerKind::RequestForwarded(id));
                self.forwarded.insert(id, t);
            }
        }
    }

    /// Resends what we already said about the slot holding `id`: the
    /// proposal if we made it, and our votes. Covers losses before GST.
    fn retransmit(&mut self, id: TxnId) {
        let Some(slot) = self.txn_seq.get(&id).and_then(|s| self.slots.get(s)) else { return };
        if slot.pp.view != self.view {
            return;
        }
        let mut out = slot.sent.clone();
        if self.rc.cfg.primary(slot.pp.view) == self.id {
            out.insert(0, ProtocolMessage::Preprepare(slot.pp.clone()));
        }
        for m in out {
            self.send(Dest::Others, m);
        }
    }

    /// Speculative replicas pass a proposal they executed on to everyone,
    /// so replicas the primary skipped can still execute it.
    fn relay_proposal(&mut self, id: TxnId) {
        let pp = self
            .txn_seq
            .get(&id)
            .and_then(|s| self.slots.get(s))
            .filter(|slot| slot.pp.view == self.view)
            .map(|slot| slot.pp.clone());
        if let Some(pp) = pp {
            self.send(Dest::Others, ProtocolMessage::Preprepare(pp));
        }
    }

    fn enqueue(&mut self, batch: Batch) {
        let id = batch.id();
        if !self.queued.contains(&id) && !self.proposed.contains(&id) {
            self.queued.insert(id);
            self.queue.push_back(batch);
        }
    }

    fn next_batch(&mut self) -> Option<Batch> {
        while let Some(b) = self.queue.pop_front() {
            let id = b.id();
            self.queued.remove(&id);
            if !self.app.executed(id.client, id.nonce) && !self.proposed.contains(&id) {
                return Some(b);
            }
        }
        None
    }

    /// Byzantine use only: binds `batch` to `seq` through this replica's
    /// component without touching any protocol bookkeeping.
    pub fn forge_proposal(&mut self, seq: u64, batch: Batch) -> Result<Preprepare, TrustedError> {
        let record = vote_record_digest(Phase::Preprepare, self.view, seq, batch.digest());
        let attestation = match self.kind().family() {
            Family::Pbft => None,
            Family::Ea => {
                let q = log_id(self.view, Phase::Preprepare);
                self.tc.ensure_log(q);
                Some(self.tc.log_append(q, Some(seq), record)?)
            }
            Family::Min | Family::Flexi => {
                let q = self.own_counter.ok_or(TrustedError::UnknownCounter(self.view_counter))?;
                Some(self.tc.append_f(q, record)?.1)
            }
        };
        Ok(Preprepare::new(self.view, seq, batch, attestation, &self.signer))
    }

    /// Byzantine use only: a vote for `digest` at `seq`, attested the way
    /// this protocol attests votes. Flexi votes echo `echo`.
    pub fn forge_vote(
        &mut self,
        kind: MsgKind,
        seq: u64,
        digest: Digest,
        echo: Option<Attestation>,
    ) -> Result<Vote, TrustedError> {
        let phase = if kind == MsgKind::Commit { Phase::Commit } else { Phase::Prepare };
        let record = vote_record_digest(phase, self.view, seq, digest);
        let attestation = match self.kind().family() {
            Family::Pbft => None,
            Family::Flexi => echo,
            Family::Ea => {
                let q = log_id(self.view, phase);
                self.tc.ensure_log(q);
                Some(self.tc.log_append(q, Some(seq), record)?)
            }
            Family::Min => {
                let q = self.vote_counter.or(self.own_counter).ok_or(TrustedError::UnknownCounter(0))?;
                Some(self.tc.append_f(q, record)?.1)
            }
        };
        Ok(Vote::new(kind, self.view, seq, digest, self.id, attestation, &self.signer))
    }

    // ---- primary -----------------------------------------------------------

    fn make_proposal(&mut self, batch: Batch) -> Option<Preprepare> {
        let seq = self.next_seq;
        let digest = batch.digest();
        let record = vote_record_digest(Phase::Preprepare, self.view, seq, digest);
        let attestation = match self.kind().family() {
            Family::Pbft => None,
            Family::Ea => Some(self.log_append(log_id(self.view, Phase::Preprepare), seq, record)?),
            Family::Min | Family::Flexi => {
                let q = self.own_counter?;
                let (k, att) = self.append_f(q, record)?;
                if k != seq {
                    // the counter moved underneath us; the binding is unusable
                    self.next_seq = k + 1;
                    return None;
                }
                Some(att)
            }
        };
        self.next_seq += 1;
        self.proposed.insert(batch.id());
        Some(Preprepare::new(self.view, seq, batch, attestation, &self.signer))
    }

    fn issue(&mut self, pp: Preprepare) {
        let (view, seq, digest, txn) = (pp.view, pp.seq, pp.digest, pp.batch.id());
        self.in_flight.insert(seq);
        let in_flight = self.in_flight.len() as u32;
        self.note(ReplicaEvent::Proposed { view, seq, digest, txn, in_flight });
        self.send(Dest::Others, ProtocolMessage::Preprepare(pp.clone()));
        self.accept(pp);
    }

    fn try_propose(&mut self) {
        if !self.is_primary() || self.in_view_change {
            return;
        }
        while self.in_flight.len() < self.window() {
            let pp = match self.held.take() {
                Some(pp) => pp,
                None => match self.next_batch() {
                    Some(b) => match self.make_proposal(b) {
                        Some(pp) => pp,
                        None => continue,
                    },
                    None => break,
                },
            };
            self.issue(pp);
        }
        // Bind the next proposal while waiting, so the trusted access
        // overlaps with the current round instead of following it.
        if self.held.is_none() && self.kind().primary_attests() {
            if let Some(b) = self.next_batch() {
                self.held = self.make_proposal(b);
            }
        }
    }

    fn release(&mut self, seq: u64) {
        if self.in_flight.remove(&seq) {
            self.zz_acks.remove(&seq);
            self.try_propose();
        }
    }

    fn on_response(&mut self, r: Response) {
        if !self.kind().is_speculative() || !self.is_primary() || r.replica == self.id {
            return;
        }
        let matches = self
            .slots
            .get(&r.seq)
            .is_some_and(|s| s.pp.view == r.view && s.pp.batch.id() == r.txn);
        if matches && self.in_flight.contains(&r.seq) {
            let acks = self.zz_acks.entry(r.seq).or_default();
            acks.insert(r.replica);
            if acks.len() as u32 + 1 >= self.kind().completion_quorum(self.f()) {
                self.release(r.seq);
            }
        }
    }

    // ---- agreement -----------------------------------------------------------

    fn on_preprepare(&mut self, pp: Preprepare) {
        if pp.seq <= self.stable.seq {
            return;
        }
        if pp.auth.signer == Principal::Replica(self.id) {
            return;
        }
        if matches!(self.kind().family(), Family::Min | Family::Flexi)
            && pp.attestation.as_ref().is_some_and(|a| a.q != self.view_counter)
        {
            self.note(ReplicaEvent::Rejected { kind: MsgKind::Preprepare, reason: RejectReason::WrongCounter });
            return;
        }
        if let Some(slot) = self.slots.get(&pp.seq) {
            if slot.pp.digest != pp.digest {
                self.note(ReplicaEvent::Rejected {
                    kind: MsgKind::Preprepare,
                    reason: RejectReason::Conflict,
                });
            }
            return;
        }
        let id = pp.batch.id();
        if let Some(t) = self.forwarded.remove(&id) {
            self.cancel_timer(t);
        }
        let seq = pp.seq;
        self.accept(pp);
        self.vote_prepare(seq);
        self.progress(seq);
        self.execute_ready();
    }

    /// Records a proposal in its slot, folding in any early votes.
    fn accept(&mut self, pp: Preprepare) {
        let (view, seq, digest) = (pp.view, pp.seq, pp.digest);
        let early = self.early.remove(&seq).unwrap_or_default();
        self.slots.insert(
            seq,
            Slot { pp, status: Status::Preprepared, prepares: early.prepares, commits: early.commits, sent: Vec::new() },
        );
        self.note(ReplicaEvent::Preprepared { view, seq, digest });
        if self.kind().is_speculative() {
            self.execute_ready();
        }
    }

    fn vote_prepare(&mut self, seq: u64) {
        if !self.kind().has_prepare_phase() || self.is_primary() {
            return;
        }
        let Some(slot) = self.slots.get(&seq) else { return };
        let (view, digest) = (slot.pp.view, slot.pp.digest);
        let attestation = match self.kind().family() {
            Family::Pbft => None,
            Family::Flexi => slot.pp.attestation.clone(),
            Family::Min => {
                let q = match self.vote_counter {
                    Some(q) => q,
                    None => {
                        let (q, _) = self.create_counter(0);
                        self.vote_counter = Some(q);
                        q
                    }
                };
                let record = vote_record_digest(Phase::Prepare, view, seq, digest);
                let Some((_, att)) = self.append_f(q, record) else { return };
                Some(att)
            }
            Family::Ea => {
                self.ea_enqueue(0, seq);
                return;
            }
        };
        self.cast(MsgKind::Prepare, seq, attestation);
    }

    fn cast(&mut self, kind: MsgKind, seq: u64, attestation: Option<crate::trusted::Attestation>) {
        let Some(slot) = self.slots.get(&seq) else { return };
        let (view, digest) = (slot.pp.view, slot.pp.digest);
        let v = Vote::new(kind, view, seq, digest, self.id, attestation, &self.signer);
        let slot = self.slots.get_mut(&seq).unwrap();
        let msg = if kind == MsgKind::Prepare {
            slot.prepares.entry(digest).or_default().insert(self.id, v.clone());
            ProtocolMessage::Prepare(v)
        } else {
            slot.commits.entry(digest).or_default().insert(self.id);
            ProtocolMessage::Commit(v)
        };
        slot.sent.push(msg.clone());
        self.send(Dest::Others, msg);
    }

    /// Trusted logs refuse a slot below their last one, so log-attested
    /// votes of one phase go out strictly in sequence order.
    fn ea_enqueue(&mut self, phase: usize, seq: u64) {
        self.ea_ready[phase].insert(seq);
        loop {
            let next = self.ea_next[phase];
            if !self.ea_ready[phase].remove(&next) {
                break;
            }
            self.ea_next[phase] = next + 1;
            let Some(slot) = self.slots.get(&next) else { continue };
            let (view, digest) = (slot.pp.view, slot.pp.digest);
            let (p, kind) = if phase == 0 {
                (Phase::Prepare, MsgKind::Prepare)
            } else {
                (Phase::Commit, MsgKind::Commit)
            };
            let record = vote_record_digest(p, view, next, digest);
            if let Some(att) = self.log_append(log_id(view, p), next, record) {
                self.cast(kind, next, Some(att));
                self.progress(next);
            }
        }
    }

    fn on_prepare(&mut self, v: Vote) {
        if v.seq <= self.stable.seq {
            return;
        }
        let (seq, digest) = (v.seq, v.digest);
        match self.slots.get_mut(&seq) {
            Some(slot) => {
                slot.prepares.entry(digest).or_default().insert(v.replica, v);
            }
            None => {
                let e = self.early.entry(seq).or_default();
                e.prepares.entry(digest).or_default().insert(v.replica, v);
            }
        }
        self.progress(seq);
        self.execute_ready();
    }

    fn on_commit(&mut self, v: Vote) {
        if v.seq <= self.stable.seq {
            return;
        }
        let seq = v.seq;
        match self.slots.get_mut(&seq) {
            Some(slot) => {
                slot.commits.entry(v.digest).or_default().insert(v.replica);
            }
            None => {
                self.early.entry(seq).or_default().commits.entry(v.digest).or_default().insert(v.replica);
            }
        }
        self.progress(seq);
        self.execute_ready();
    }

    fn prepare_votes(&self, slot: &Slot) -> u32 {
        let primary = self.rc.cfg.primary(slot.pp.view);
        let backups = slot
            .prepares
            .get(&slot.pp.digest)
            .map(|m| m.keys().filter(|r| **r != primary).count())
            .unwrap_or(0);
        backups as u32 + 1
    }

    fn progress(&mut self, seq: u64) {
        let kind = self.kind();
        let f = self.f();
        let Some(slot) = self.slots.get(&seq) else { return };
        let (view, digest) = (slot.pp.view, slot.pp.digest);
        if kind.has_prepare_phase()
            && slot.status == Status::Preprepared
            && self.prepare_votes(slot) >= kind.prepare_quorum(f)
        {
            if kind.has_commit_phase() {
                self.slots.get_mut(&seq).unwrap().status = Status::Prepared;
                self.note(ReplicaEvent::Prepared { view, seq, digest });
                if kind.family() == Family::Ea {
                    self.ea_enqueue(1, seq);
                } else {
                    self.cast(MsgKind::Commit, seq, None);
                }
            } else {
                self.commit(seq);
                return;
            }
        }
        let Some(slot) = self.slots.get(&seq) else { return };
        if kind.has_commit_phase() && slot.status == Status::Prepared {
            let n = slot.commits.get(&digest).map_or(0, |c| c.len()) as u32;
            if n >= kind.commit_quorum(f) {
                self.commit(seq);
            }
        }
    }

    fn commit(&mut self, seq: u64) {
        let slot = self.slots.get_mut(&seq).unwrap();
        slot.status = Status::Committed;
        let (view, digest) = (slot.pp.view, slot.pp.digest);
        self.note(ReplicaEvent::Committed { view, seq, digest });
        if let Some(d) = self.executed.get(&seq) {
            if *d != digest {
                self.note(ReplicaEvent::Divergence { seq });
            }
        }
        if self.is_primary() {
            self.release(seq);
        }
    }

    // ---- execution -------------------------------------------------------------

    fn execute_ready(&mut self) {
        let speculative = self.kind().is_speculative();
        loop {
            let s = self.watermark + 1;
            let Some(slot) = self.slots.get(&s) else { break };
            if !speculative && slot.status != Status::Committed {
                break;
            }
            let pp = slot.pp.clone();
            self.execute(pp);
        }
    }

    fn execute(&mut self, pp: Preprepare) {
        let seq = pp.seq;
        let (outcome, undo) = self.app.apply(&pp.batch, seq);
        let txn = pp.batch.id();
        self.watermark = seq;
        self.executed.insert(seq, pp.digest);
        if self.kind().is_speculative() {
            self.undo.insert(seq, undo);
        }
        self.txn_seq.insert(txn, seq);
        self.note(ReplicaEvent::Executed { view: self.view, seq, digest: pp.digest, txn });
        let answer = match outcome {
            Outcome::Applied(r) => Some((seq, r)),
            Outcome::Duplicate(Some(e)) => Some((e.seq, e.result)),
            Outcome::Duplicate(None) | Outcome::Noop => None,
        };
        let primary = self.primary();
        if let Some((at_seq, result)) = answer {
            let r = Response::new(self.view, at_seq, txn, result, self.id, &self.signer);
            self.reply_cache.insert(txn.client, r.clone());
            self.send(Dest::Client(txn.client), ProtocolMessage::Response(r.clone()));
            if self.kind().is_speculative() && primary != self.id {
                self.send(Dest::Replica(primary), ProtocolMessage::Response(r));
            }
        } else if self.kind().is_speculative() && primary != self.id {
            // no client to answer, but the primary still counts the execution
            let r = Response::new(self.view, seq, txn, Vec::new(), self.id, &self.signer);
            self.send(Dest::Replica(primary), ProtocolMessage::Response(r));
        }
        if seq.is_multiple_of(self.rc.cfg.checkpoint_period) {
            self.make_checkpoint(seq);
        }
    }

    // ---- checkpoints -------------------------------------------------------------

    fn make_checkpoint(&mut self, seq: u64) {
        let proof = match self.kind().family() {
            Family::Pbft => Vec::new(),
            Family::Ea => {
                let record = vote_record_digest(Phase::Checkpoint, 0, seq, self.app.digest(seq));
                self.log_append(log_id(0, Phase::Checkpoint), seq, record).into_iter().collect()
            }
            Family::Min | Family::Flexi => {
                self.slots.get(&seq).and_then(|s| s.pp.attestation.clone()).into_iter().collect()
            }
        };
        let cp = Checkpoint::new(seq, self.app.clone(), self.id, proof, &self.signer);
        self.send(Dest::Others, ProtocolMessage::Checkpoint(cp.clone()));
        self.checkpoint_votes.entry(seq).or_default().insert(self.id, cp);
        self.check_stable(seq);
    }

    fn on_checkpoint(&mut self, cp: Checkpoint) {
        if cp.seq <= self.stable.seq {
            return;
        }
        let seq = cp.seq;
        self.checkpoint_votes.entry(seq).or_default().insert(cp.replica, cp);
        self.check_stable(seq);
    }

    fn check_stable(&mut self, seq: u64) {
        let quorum = self.kind().checkpoint_quorum(self.f()) as usize;
        let Some(votes) = self.checkpoint_votes.get(&seq) else { return };
        let mut by_digest: BTreeMap<Digest, Vec<&Checkpoint>> = BTreeMap::new();
        for cp in votes.values() {
            by_digest.entry(cp.state_digest).or_default().push(cp);
        }
        let winner = by_digest.values().find(|v| v.len() >= quorum).map(|v| v[0].clone());
        let Some(cp) = winner else { return };
        if by_digest.len() > 1 {
            self.note(ReplicaEvent::Divergence { seq });
        }
        self.stabilize(cp);
    }

    fn stabilize(&mut self, cp: Checkpoint) {
        let seq = cp.seq;
        if seq <= self.stable.seq {
            return;
        }
        self.note(ReplicaEvent::CheckpointStable { seq, digest: cp.state_digest });
        if self.watermark < seq {
            self.app = cp.state.clone();
            self.watermark = seq;
            self.note(ReplicaEvent::StateAdopted { seq });
        }
        self.stable = Stable { seq, state: cp.state };
        self.truncate(seq);
        if self.is_primary() {
            self.next_seq = self.next_seq.max(seq + 1);
            let done: Vec<u64> = self.in_flight.range(..=seq).copied().collect();
            for s in done {
                self.release(s);
            }
        }
        self.execute_ready();
    }

    fn truncate(&mut self, seq: u64) {
        let keep = seq + 1;
        self.slots = self.slots.split_off(&keep);
        self.early = self.early.split_off(&keep);
        self.executed = self.executed.split_off(&keep);
        self.undo = self.undo.split_off(&keep);
        self.checkpoint_votes = self.checkpoint_votes.split_off(&keep);
        self.txn_seq.retain(|_, s| *s > seq);
        for phase in 0..2 {
            self.ea_next[phase] = self.ea_next[phase].max(keep);
            self.ea_ready[phase] = self.ea_ready[phase].split_off(&keep);
        }
        if self.kind().family() == Family::Ea {
            for p in [Phase::Prepare, Phase::Commit, Phase::Preprepare] {
                self.tc.truncate_log(log_id(self.view, p), seq);
            }
        }
        // keep the ordering loop moving past anything the checkpoint covered
        for phase in 0..2 {
            if let Some(&s) = self.ea_ready[phase].iter().next() {
                self.ea_enqueue(phase, s);
            }
        }
    }

    // ---- view change ---------------------------------------------------------------

    fn start_view_change(&mut self, target: u64) {
        if target <= self.view {
            return;
        }
        self.view = target;
        self.in_view_change = true;
        for (_, t) in mem::take(&mut self.forwarded) {
            self.cancel_timer(t);
        }
        if let Some(t) = self.vc_timer.take() {
            self.cancel_timer(t);
        }
        if let Some(pp) = self.held.take() {
            self.proposed.remove(&pp.batch.id());
            self.enqueue(pp.batch);
        }
        self.in_flight.clear();
        self.zz_acks.clear();
        self.own_counter = None;

        let prepared: Vec<Preprepare> =
            self.slots.values().filter(|s| s.pp.seq > self.stable.seq).map(|s| s.pp.clone()).collect();
        let certs = if self.kind().is_speculative() {
            Vec::new()
        } else {
            let quorum = self.kind().prepare_quorum(self.f());
            self.slots
                .values()
                .filter(|s| s.pp.seq > self.stable.seq && self.prepare_votes(s) >= quorum)
                .map(|s| {
                    let primary = self.rc.cfg.primary(s.pp.view);
                    Certificate {
                        votes: s.prepares[&s.pp.digest]
                            .values()
                            .filter(|v| v.replica != primary)
                            .cloned()
                            .collect(),
                    }
                })
                .collect()
        };
        let vc = ViewChange {
            new_view: target,
            replica: self.id,
            stable_seq: self.stable.seq,
            stable_state: self.stable.state.clone(),
            prepared,
            certs,
            auth: crate::message::placeholder(),
        }
        .sign(&self.signer);
        self.note(ReplicaEvent::ViewChangeStarted { view: target });
        self.send(Dest::Others, ProtocolMessage::ViewChange(vc.clone()));
        self.vc_msgs.entry(target).or_default().insert(self.id, vc);
        let t = self.set_timer(self.vc_timeout, TimerKind::ViewChange(target));
        self.vc_timer = Some(t);
        self.vc_timeout = self.vc_timeout.saturating_mul(2);
        if self.rc.cfg.primary(target) == self.id {
            self.try_assemble(target);
        }
    }

    fn on_view_change(&mut self, vc: ViewChange) {
        if vc.new_view < self.view || (vc.new_view == self.view && !self.in_view_change) {
            return;
        }
        let v = vc.new_view;
        self.vc_msgs.entry(v).or_default().insert(vc.replica, vc);
        // join once f+1 replicas back views above ours
        let mut highest: BTreeMap<ReplicaId, u64> = BTreeMap::new();
        for (view, msgs) in self.vc_msgs.range(self.view + 1..) {
            for r in msgs.keys() {
                highest.insert(*r, *view);
            }
        }
        let mut views: Vec<u64> = highest.values().copied().collect();
        views.sort_unstable_by(|a, b| b.cmp(a));
        let support = self.f() as usize + 1;
        if views.len() >= support {
            self.start_view_change(views[support - 1]);
        }
        if self.in_view_change && self.rc.cfg.primary(self.view) == self.id {
            self.try_assemble(self.view);
        }
    }

    fn try_assemble(&mut self, target: u64) {
        if self.new_view_sent.contains(&target) || !self.in_view_change || self.view != target {
            return;
        }
        let quorum = self.kind().view_change_quorum(self.f()) as usize;
        let Some(msgs) = self.vc_msgs.get(&target) else { return };
        if msgs.len() < quorum {
            return;
        }
        let chosen: Vec<ViewChange> = msgs.values().take(quorum).cloned().collect();
        let sel = select_reproposals(&chosen);
        let counter_cert = if matches!(self.kind().family(), Family::Min | Family::Flexi) {
            let (q, att) = self.create_counter(sel.base);
            self.own_counter = Some(q);
            Some(att)
        } else {
            None
        };
        self.new_view_sent.insert(target);
        let nv = NewView {
            new_view: target,
            replica: self.id,
            view_changes: chosen,
            repropose: sel.digests(),
            counter_cert,
            auth: crate::message::placeholder(),
        }
        .sign(&self.signer);
        self.send(Dest::Others, ProtocolMessage::NewView(nv.clone()));
        self.install(nv, sel);
    }

    fn on_new_view(&mut self, nv: NewView) {
        if nv.new_view < self.view || (nv.new_view == self.view && !self.in_view_change) {
            return;
        }
        let quorum = self.kind().view_change_quorum(self.f()) as usize;
        let senders: BTreeSet<ReplicaId> = nv.view_changes.iter().map(|v| v.replica).collect();
        let sel = select_reproposals(&nv.view_changes);
        let cert_ok = nv.counter_cert.as_ref().is_none_or(|c| c.k == sel.base);
        if senders.len() < quorum || senders.len() != nv.view_changes.len() || sel.digests() != nv.repropose || !cert_ok {
            self.note(ReplicaEvent::Rejected { kind: MsgKind::NewView, reason: RejectReason::InvalidNewView });
            return;
        }
        self.view = nv.new_view;
        self.in_view_change = true;
        self.install(nv, sel);
    }

    fn install(&mut self, nv: NewView, sel: Selection) {
        self.view = nv.new_view;
        self.in_view_change = false;
        if let Some(t) = self.vc_timer.take() {
            self.cancel_timer(t);
        }
        self.vc_timeout = self.rc.view_change_timeout_us;
        if let Some(c) = &nv.counter_cert {
            self.view_counter = c.q;
        }
        if self.kind().is_speculative() {
            let floor = sel.base.max(self.stable.seq);
            while self.watermark > floor {
                let s = self.watermark;
                let Some(u) = self.undo.remove(&s) else { break };
                self.app.revert(u);
                let digest = self.executed.remove(&s).unwrap_or_default();
                self.note(ReplicaEvent::RolledBack { seq: s, digest });
                self.watermark = s - 1;
            }
            self.reply_cache.retain(|_, r| r.seq <= floor);
        }
        if sel.base > self.stable.seq {
            if self.watermark < sel.base {
                self.app = sel.base_state.clone();
                self.watermark = sel.base;
                self.note(ReplicaEvent::StateAdopted { seq: sel.base });
            }
            self.stable = Stable { seq: sel.base, state: sel.base_state.clone() };
            self.truncate(sel.base);
        }
        self.slots.clear();
        self.early.clear();
        self.proposed.clear();
        self.in_flight.clear();
        self.zz_acks.clear();
        self.held = None;
        self.ea_next = [sel.base + 1; 2];
        self.ea_ready = [BTreeSet::new(), BTreeSet::new()];
        self.vc_msgs = self.vc_msgs.split_off(&(self.view + 1));
        self.note(ReplicaEvent::NewViewInstalled {
            view: self.view,
            base: sel.base,
            reproposed: nv.repropose.clone(),
        });
        if self.is_primary() {
            self.next_seq = sel.base + 1;
            for (_, batch) in sel.entries {
                if let Some(pp) = self.make_proposal(batch) {
                    self.issue(pp);
                }
            }
            self.try_propose();
        }
        self.execute_ready();
        let (now, later): (Vec<_>, Vec<_>) = mem::take(&mut self.buffered)
            .into_iter()
            .partition(|(_, m)| m.view() == Some(self.view));
        self.buffered = later.into_iter().filter(|(_, m)| m.view() > Some(self.view)).collect();
        for (from, m) in now {
            self.dispatch(from, m);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{Op, Transaction};

    fn setup(kind: ProtocolKind) -> (Vec<ReplicaState>, KeyRing) {
        let cfg = SystemConfig::new(1, kind.regime(), 1, 100).unwrap();
        let keys = KeyRing::new(11, cfg.n, 2);
        let rc = ReplicaConfig {
            kind,
            cfg,
            persistence: Persistence::Persistent,
            access_latency_us: 10,
            pipeline_width: 64,
            view_change_timeout_us: 1000,
            forward_timeout_us: 1000,
            per_message_us: 0,
            per_verify_us: 0,
        };
        let mut rs: Vec<ReplicaState> =
            cfg.replicas().map(|r| ReplicaState::new(r, rc.clone(), &keys)).collect();
        for r in &mut rs {
            r.start(0);
        }
        (rs, keys)
    }

    fn request(keys: &KeyRing, nonce: u64) -> Request {
        let c = ClientId(0);
        let batch = Batch { client: c, nonce, txns: vec![Transaction { client: c, nonce, op: Op::Put { key: nonce, value: 1 } }] };
        Request::new(batch, &keys.signer(Principal::Client(c)))
    }

    fn broadcast_of(fx: &Effects, kind: MsgKind) -> Vec<ProtocolMessage> {
        fx.sends.iter().filter(|o| o.to == Dest::Others && o.msg.kind() == kind).map(|o| o.msg.clone()).collect()
    }

    fn calls(fx: &Effects) -> usize {
        fx.notes.iter().filter(|n| matches!(n.event, ReplicaEvent::TrustedCall { .. })).count()
    }

    #[test]
    fn flexi_backup_prepares_without_trusted_call() {
        let (mut rs, keys) = setup(ProtocolKind::FlexiBft);
        let fx = rs[0].handle_message(0, NodeId::Client(ClientId(0)), ProtocolMessage::Request(request(&keys, 1)));
        let pps = broadcast_of(&fx, MsgKind::Preprepare);
        assert_eq!(pps.len(), 1);
        let ProtocolMessage::Preprepare(pp) = &pps[0] else { unreachable!() };
        assert_eq!(pp.seq, 1);
        assert_eq!(pp.attestation.as_ref().unwrap().k, 1);
        let fx = rs[1].handle_message(0, NodeId::Replica(ReplicaId(0)), pps[0].clone());
        assert_eq!(broadcast_of(&fx, MsgKind::Prepare).len(), 1);
        assert_eq!(calls(&fx), 0);
    }

    #[test]
    fn sequential_primary_holds_second_proposal() {
        let (mut rs, keys) = setup(ProtocolKind::MinZZ);
        let from = NodeId::Client(ClientId(0));
        let fx = rs[0].handle_message(0, from, ProtocolMessage::Request(request(&keys, 1)));
        assert_eq!(broadcast_of(&fx, MsgKind::Preprepare).len(), 1);
        let fx = rs[0].handle_message(1, from, ProtocolMessage::Request(request(&keys, 2)));
        assert!(broadcast_of(&fx, MsgKind::Preprepare).is_empty());
        assert_eq!(rs[0].in_flight(), 1);
    }

    #[test]
    fn parallel_primary_proposes_immediately() {
        let (mut rs, keys) = setup(ProtocolKind::Pbft);
        let from = NodeId::Client(ClientId(0));
        rs[0].handle_message(0, from, ProtocolMessage::Request(request(&keys, 1)));
        let fx = rs[0].handle_message(1, from, ProtocolMessage::Request(request(&keys, 2)));
        let pps = broadcast_of(&fx, MsgKind::Preprepare);
        assert_eq!(pps.len(), 1);
        assert_eq!(pps[0].seq(), Some(2));
    }

    #[test]
    fn pbft_needs_commit_quorum_after_prepare_quorum() {
        let (mut rs, keys) = setup(ProtocolKind::Pbft);
        let fx = rs[0].handle_message(0, NodeId::Client(ClientId(0)), ProtocolMessage::Request(request(&keys, 1)));
        let pp = broadcast_of(&fx, MsgKind::Preprepare).remove(0);
        let mut prepares = Vec::new();
        for i in 1..4 {
            let fx = rs[i].handle_message(0, NodeId::Replica(ReplicaId(0)), pp.clone());
            prepares.extend(broadcast_of(&fx, MsgKind::Prepare));
        }
        // replica 1 sees two backup prepares plus the proposal
        let mut commits = Vec::new();
        for p in &prepares[1..] {
            let fx = rs[1].handle_message(0, NodeId::Replica(ReplicaId(2)), p.clone());
            commits.extend(broadcast_of(&fx, MsgKind::Commit));
        }
        assert_eq!(commits.len(), 1);
        assert_eq!(rs[1].watermark, 0);
        for i in [2, 3] {
            for p in &prepares {
                rs[i].handle_message(0, NodeId::Replica(ReplicaId(1)), p.clone());
            }
        }
        let fx = rs[2].handle_message(0, NodeId::Replica(ReplicaId(1)), commits[0].clone());
        assert!(broadcast_of(&fx, MsgKind::Commit).is_empty());
        assert_eq!(rs[2].watermark, 0);
    }

    #[test]
    fn speculative_backup_queues_out_of_order_proposal() {
        let (mut rs, keys) = setup(ProtocolKind::FlexiZZ);
        let from = NodeId::Client(ClientId(0));
        let fx1 = rs[0].handle_message(0, from, ProtocolMessage::Request(request(&keys, 1)));
        let fx2 = rs[0].handle_message(0, from, ProtocolMessage::Request(request(&keys, 2)));
        let p1 = broadcast_of(&fx1, MsgKind::Preprepare).remove(0);
        let p2 = broadcast_of(&fx2, MsgKind::Preprepare).remove(0);
        let fx = rs[1].handle_message(0, NodeId::Replica(ReplicaId(0)), p2);
        assert!(fx.sends.iter().all(|o| o.msg.kind() != MsgKind::Response));
        let fx = rs[1].handle_message(0, NodeId::Replica(ReplicaId(0)), p1);
        assert_eq!(fx.sends.iter().filter(|o| matches!(o.to, Dest::Client(_))).count(), 2);
        assert_eq!(rs[1].watermark, 2);
    }

    #[test]
    fn conflicting_proposal_is_rejected() {
        let (mut rs, keys) = setup(ProtocolKind::Pbft);
        let from = NodeId::Client(ClientId(0));
        let fx = rs[0].handle_message(0, from, ProtocolMessage::Request(request(&keys, 1)));
        let pp = broadcast_of(&fx, MsgKind::Preprepare).remove(0);
        rs[1].handle_message(0, NodeId::Replica(ReplicaId(0)), pp);
        let other = request(&keys, 9).batch;
        let forged = Preprepare::new(0, 1, other, None, &keys.signer(Principal::Replica(ReplicaId(0))));
        let fx = rs[1].handle_message(0, NodeId::Replica(ReplicaId(0)), ProtocolMessage::Preprepare(forged));
        assert!(fx.notes.iter().any(|n| n.event == ReplicaEvent::Rejected { kind: MsgKind::Preprepare, reason: RejectReason::Conflict }));
    }

    #[test]
    fn trusted_access_delays_outgoing_messages() {
        let (mut rs, keys) = setup(ProtocolKind::MinBft);
        let fx = rs[0].handle_message(100, NodeId::Client(ClientId(0)), ProtocolMessage::Request(request(&keys, 1)));
        let pp = fx.sends.iter().find(|o| o.msg.kind() == MsgKind::Preprepare).unwrap();
        assert_eq!(pp.at, 110);
    }
}

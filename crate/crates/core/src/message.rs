//! Protocol messages, their signing payloads and well-formedness checks.

use std::collections::BTreeSet;
use std::fmt;

use crate::codec::{to_bytes, CodecError, Decoder, Encoder, Wire};
use crate::protocol::{Family, ProtocolKind};
use crate::state::{AppState, TxnResult};
use crate::trusted::{verify_attestation, Attestation, AttestationKind};
use crate::types::{
    digest_parts, wire_struct, Authenticator, Batch, ClientId, ComponentId, Digest, KeyRing,
    Principal, ReplicaId, Signer, SystemConfig, TxnId,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Phase {
    Preprepare,
    Prepare,
    Commit,
    Checkpoint,
    ViewChange,
}

impl Phase {
    pub fn index(self) -> u64 {
        self as u64
    }
}

/// The value a trusted component binds when attesting a protocol vote.
pub fn vote_record_digest(phase: Phase, view: u64, seq: u64, digest: Digest) -> Digest {
    digest_parts(&[
        b"vote",
        &[phase as u8],
        &view.to_le_bytes(),
        &seq.to_le_bytes(),
        &digest.0,
    ])
}

/// Trusted log id for a (view, phase) pair.
pub fn log_id(view: u64, phase: Phase) -> u64 {
    view * 8 + phase.index()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Request {
    pub batch: Batch,
    pub auth: Authenticator,
}
wire_struct!(Request { batch, auth });

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Preprepare {
    pub view: u64,
    pub seq: u64,
    pub batch: Batch,
    pub digest: Digest,
    pub attestation: Option<Attestation>,
    pub auth: Authenticator,
}
wire_struct!(Preprepare { view, seq, batch, digest, attestation, auth });

/// A Prepare or a Commit vote.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vote {
    pub view: u64,
    pub seq: u64,
    pub digest: Digest,
    pub replica: ReplicaId,
    pub attestation: Option<Attestation>,
    pub auth: Authenticator,
}
wire_struct!(Vote { view, seq, digest, replica, attestation, auth });

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Response {
    pub view: u64,
    pub seq: u64,
    pub txn: TxnId,
    pub result: TxnResult,
    pub replica: ReplicaId,
    pub auth: Authenticator,
}
wire_struct!(Response { view, seq, txn, result, replica, auth });

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Checkpoint {
    pub seq: u64,
    pub state_digest: Digest,
    pub replica: ReplicaId,
    pub proof: Vec<Attestation>,
    pub state: AppState,
    pub auth: Authenticator,
}
wire_struct!(Checkpoint { seq, state_digest, replica, proof, state, auth });

/// Prepare votes that reached the prepare quorum for one proposal.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Certificate {
    pub votes: Vec<Vote>,
}
wire_struct!(Certificate { votes });

impl Certificate {
    pub fn key(&self) -> Option<(u64, u64, Digest)> {
        self.votes.first().map(|v| (v.view, v.seq, v.digest))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ViewChange {
    pub new_view: u64,
    pub replica: ReplicaId,
    pub stable_seq: u64,
    pub stable_state: AppState,
    pub prepared: Vec<Preprepare>,
    pub certs: Vec<Certificate>,
    pub auth: Authenticator,
}
wire_struct!(ViewChange { new_view, replica, stable_seq, stable_state, prepared, certs, auth });

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NewView {
    pub new_view: u64,
    pub replica: ReplicaId,
    pub view_changes: Vec<ViewChange>,
    pub repropose: Vec<(u64, Digest)>,
    pub counter_cert: Option<Attestation>,
    pub auth: Authenticator,
}
wire_struct!(NewView { new_view, replica, view_changes, repropose, counter_cert, auth });

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ProtocolMessage {
    Request(Request),
    Preprepare(Preprepare),
    Prepare(Vote),
    Commit(Vote),
    Response(Response),
    Checkpoint(Checkpoint),
    ViewChange(ViewChange),
    NewView(NewView),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum MsgKind {
    Request,
    Preprepare,
    Prepare,
    Commit,
    Response,
    Checkpoint,
    ViewChange,
    NewView,
}

impl MsgKind {
    pub const ALL: [MsgKind; 8] = [
        MsgKind::Request,
        MsgKind::Preprepare,
        MsgKind::Prepare,
        MsgKind::Commit,
        MsgKind::Response,
        MsgKind::Checkpoint,
        MsgKind::ViewChange,
        MsgKind::NewView,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MsgKind::Request => "Request",
            MsgKind::Preprepare => "Preprepare",
            MsgKind::Prepare => "Prepare",
            MsgKind::Commit => "Commit",
            MsgKind::Response => "Response",
            MsgKind::Checkpoint => "Checkpoint",
            MsgKind::ViewChange => "ViewChange",
            MsgKind::NewView => "NewView",
        }
    }

    pub fn parse(s: &str) -> Option<MsgKind> {
        MsgKind::ALL.iter().copied().find(|k| k.name().eq_ignore_ascii_case(s))
    }
}

impl fmt::Display for MsgKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl Wire for MsgKind {
    fn encode(&self, enc: &mut Encoder) {
        enc.u8(*self as u8)
    }
    fn decode(dec: &mut Decoder<'_>) -> Result<Self, CodecError> {
        let tag = dec.u8()?;
        MsgKind::ALL.get(tag as usize).copied().ok_or(CodecError::BadTag { what: "message kind", tag })
    }
}

impl Wire for ProtocolMessage {
    fn encode(&self, enc: &mut Encoder) {
        enc.put(&self.kind());
        match self {
            ProtocolMessage::Request(m) => enc.put(m),
            ProtocolMessage::Preprepare(m) => enc.put(m),
            ProtocolMessage::Prepare(m) | ProtocolMessage::Commit(m) => enc.put(m),
            ProtocolMessage::Response(m) => enc.put(m),
            ProtocolMessage::Checkpoint(m) => enc.put(m),
            ProtocolMessage::ViewChange(m) => enc.put(m),
            ProtocolMessage::NewView(m) => enc.put(m),
        }
    }
    fn decode(dec: &mut Decoder<'_>) -> Result<Self, CodecError> {
        Ok(match dec.get::<MsgKind>()? {
            MsgKind::Request => ProtocolMessage::Request(dec.get()?),
            MsgKind::Preprepare => ProtocolMessage::Preprepare(dec.get()?),
            MsgKind::Prepare => ProtocolMessage::Prepare(dec.get()?),
            MsgKind::Commit => ProtocolMessage::Commit(dec.get()?),
            MsgKind::Response => ProtocolMessage::Response(dec.get()?),
            MsgKind::Checkpoint => ProtocolMessage::Checkpoint(dec.get()?),
            MsgKind::ViewChange => ProtocolMessage::ViewChange(dec.get()?),
            MsgKind::NewView => ProtocolMessage::NewView(dec.get()?),
        })
    }
}

/// Digest over every field except the authenticator, prefixed by the kind.
fn payload_of(kind: MsgKind, write: impl FnOnce(&mut Encoder)) -> Digest {
    let mut e = Encoder::new();
    e.put(&kind);
    write(&mut e);
    digest_parts(&[b"msg", &e.finish()])
}

impl Request {
    pub fn payload(&self) -> Digest {
        payload_of(MsgKind::Request, |e| e.put(&self.batch))
    }

    pub fn new(batch: Batch, signer: &Signer) -> Self {
        let mut r = Request { batch, auth: placeholder() };
        r.auth = signer.sign(r.payload());
        r
    }
}

impl Preprepare {
    pub fn payload(&self) -> Digest {
        payload_of(MsgKind::Preprepare, |e| {
            e.u64(self.view);
            e.u64(self.seq);
            e.put(&self.batch);
            e.put(&self.digest);
            e.put(&self.attestation);
        })
    }

    pub fn new(
        view: u64,
        seq: u64,
        batch: Batch,
        attestation: Option<Attestation>,
        signer: &Signer,
    ) -> Self {
        let digest = batch.digest();
        let mut m = Preprepare { view, seq, batch, digest, attestation, auth: placeholder() };
        m.auth = signer.sign(m.payload());
        m
    }
}

impl Vote {
    pub fn payload(&self, kind: MsgKind) -> Digest {
        payload_of(kind, |e| {
            e.u64(self.view);
            e.u64(self.seq);
            e.put(&self.digest);
            e.put(&self.replica);
            e.put(&self.attestation);
        })
    }

    pub fn new(
        kind: MsgKind,
        view: u64,
        seq: u64,
        digest: Digest,
        replica: ReplicaId,
        attestation: Option<Attestation>,
        signer: &Signer,
    ) -> Self {
        let mut m = Vote { view, seq, digest, replica, attestation, auth: placeholder() };
        m.auth = signer.sign(m.payload(kind));
        m
    }
}

impl Response {
    pub fn payload(&self) -> Digest {
        payload_of(MsgKind::Response, |e| {
            e.u64(self.view);
            e.u64(self.seq);
            e.put(&self.txn);
            e.put(&self.result);
            e.put(&self.replica);
        })
    }

    pub fn new(
        view: u64,
        seq: u64,
        txn: TxnId,
        result: TxnResult,
        replica: ReplicaId,
        signer: &Signer,
    ) -> Self {
        let mut m = Response { view, seq, txn, result, replica, auth: placeholder() };
        m.auth = signer.sign(m.payload());
        m
    }
}

impl Checkpoint {
    pub fn payload(&self) -> Digest {
        payload_of(MsgKind::Checkpoint, |e| {
            e.u64(self.seq);
            e.put(&self.state_digest);
            e.put(&self.replica);
            e.put(&self.proof);
            e.put(&self.state);
        })
    }

    pub fn new(
        seq: u64,
        state: AppState,
        replica: ReplicaId,
        proof: Vec<Attestation>,
        signer: &Signer,
    ) -> Self {
        let state_digest = state.digest(seq);
        let mut m = Checkpoint { seq, state_digest, replica, proof, state, auth: placeholder() };
        m.auth = signer.sign(m.payload());
        m
    }
}

impl ViewChange {
    pub fn payload(&self) -> Digest {
        payload_of(MsgKind::ViewChange, |e| {
            e.u64(self.new_view);
            e.put(&self.replica);
            e.u64(self.stable_seq);
            e.put(&self.stable_state);
            e.put(&self.prepared);
            e.put(&self.certs);
        })
    }

    pub fn sign(mut self, signer: &Signer) -> Self {
        self.auth = signer.sign(self.payload());
        self
    }
}

impl NewView {
    pub fn payload(&self) -> Digest {
        payload_of(MsgKind::NewView, |e| {
            e.u64(self.new_view);
            e.put(&self.replica);
            e.put(&self.view_changes);
            e.put(&self.repropose);
            e.put(&self.counter_cert);
        })
    }

    pub fn sign(mut self, signer: &Signer) -> Self {
        self.auth = signer.sign(self.payload());
        self
    }
}

/// An unsigned authenticator, replaced before a message leaves its builder.
pub fn placeholder() -> Authenticator {
    Authenticator {
        signer: Principal::Client(ClientId::NOOP),
        payload_digest: Digest::default(),
        tag: Vec::new(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Malformed {
    BadSignature,
    UnknownSigner,
    AttestationMismatch,
    BadAttestation,
    DigestMismatch,
    MissingAttestation,
    UnexpectedAttestation,
    InvalidField,
}

impl fmt::Display for Malformed {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// Everything a receiver needs to judge a message.
#[derive(Clone, Debug)]
pub struct VerifyContext {
    pub keys: KeyRing,
    pub cfg: SystemConfig,
    pub kind: ProtocolKind,
}

impl VerifyContext {
    fn auth(&self, auth: &Authenticator, expect: Principal, payload: Digest) -> Result<(), Malformed> {
        if !self.keys.knows(auth.signer) || !self.keys.knows(expect) {
            return Err(Malformed::UnknownSigner);
        }
        if auth.signer != expect || !self.keys.verify(auth, payload) {
            return Err(Malformed::BadSignature);
        }
        Ok(())
    }

    fn attestation(
        &self,
        att: &Attestation,
        kind: AttestationKind,
        component: ReplicaId,
        record: Digest,
        seq: Option<u64>,
    ) -> Result<(), Malformed> {
        if !verify_attestation(att, &self.keys) {
            return Err(Malformed::BadAttestation);
        }
        if att.kind != kind || att.component != ComponentId(component.0) {
            return Err(Malformed::BadAttestation);
        }
        if att.x != Some(record) || seq.is_some_and(|s| att.k != s) {
            return Err(Malformed::AttestationMismatch);
        }
        Ok(())
    }

    fn primary_attestation_kind(&self) -> AttestationKind {
        match self.kind.family() {
            Family::Ea => AttestationKind::LogAttest,
            _ => AttestationKind::CounterBind,
        }
    }

    pub fn check_preprepare(&self, m: &Preprepare) -> Result<(), Malformed> {
        let primary = self.cfg.primary(m.view);
        self.auth(&m.auth, Principal::Replica(primary), m.payload())?;
        if m.seq == 0 || !self.keys.knows(Principal::Client(m.batch.client)) {
            return Err(Malformed::InvalidField);
        }
        if m.batch.txns.iter().any(|t| t.client != m.batch.client) {
            return Err(Malformed::InvalidField);
        }
        if m.digest != m.batch.digest() {
            return Err(Malformed::DigestMismatch);
        }
        match (&m.attestation, self.kind.primary_attests()) {
            (None, true) => Err(Malformed::MissingAttestation),
            (Some(_), false) => Err(Malformed::UnexpectedAttestation),
            (None, false) => Ok(()),
            (Some(att), true) => self.attestation(
                att,
                self.primary_attestation_kind(),
                primary,
                vote_record_digest(Phase::Preprepare, m.view, m.seq, m.digest),
                Some(m.seq),
            ),
        }
    }

    pub fn check_vote(&self, m: &Vote, kind: MsgKind) -> Result<(), Malformed> {
        if m.replica.0 >= self.cfg.n {
            return Err(Malformed::UnknownSigner);
        }
        self.auth(&m.auth, Principal::Replica(m.replica), m.payload(kind))?;
        let allowed = match kind {
            MsgKind::Prepare => self.kind.has_prepare_phase(),
            _ => self.kind.has_commit_phase(),
        };
        if !allowed || m.seq == 0 {
            return Err(Malformed::InvalidField);
        }
        let phase = if kind == MsgKind::Prepare { Phase::Prepare } else { Phase::Commit };
        let record = vote_record_digest(phase, m.view, m.seq, m.digest);
        let expected = match self.kind.family() {
            Family::Pbft => None,
            Family::Ea => Some((AttestationKind::LogAttest, m.replica, record, Some(m.seq))),
            Family::Min => Some((AttestationKind::CounterBind, m.replica, record, None)),
            Family::Flexi => Some((
                AttestationKind::CounterBind,
                self.cfg.primary(m.view),
                vote_record_digest(Phase::Preprepare, m.view, m.seq, m.digest),
                Some(m.seq),
            )),
        };
        match (&m.attestation, expected) {
            (None, Some(_)) => Err(Malformed::MissingAttestation),
            (Some(_), None) => Err(Malformed::UnexpectedAttestation),
            (None, None) => Ok(()),
            (Some(att), Some((k, comp, rec, seq))) => self.attestation(att, k, comp, rec, seq),
        }
    }

    pub fn check_response(&self, m: &Response) -> Result<(), Malformed> {
        if m.replica.0 >= self.cfg.n {
            return Err(Malformed::UnknownSigner);
        }
        self.auth(&m.auth, Principal::Replica(m.replica), m.payload())
    }

    pub fn check_checkpoint(&self, m: &Checkpoint) -> Result<(), Malformed> {
        if m.replica.0 >= self.cfg.n {
            return Err(Malformed::UnknownSigner);
        }
        self.auth(&m.auth, Principal::Replica(m.replica), m.payload())?;
        if m.state_digest != m.state.digest(m.seq) {
            return Err(Malformed::DigestMismatch);
        }
        if m.proof.iter().any(|a| !verify_attestation(a, &self.keys)) {
            return Err(Malformed::BadAttestation);
        }
        Ok(())
    }

    pub fn check_certificate(&self, c: &Certificate) -> Result<(), Malformed> {
        let (view, seq, digest) = c.key().ok_or(Malformed::InvalidField)?;
        let primary = self.cfg.primary(view);
        let mut voters = BTreeSet::new();
        for v in &c.votes {
            self.check_vote(v, MsgKind::Prepare)?;
            if (v.view, v.seq, v.digest) != (view, seq, digest) || v.replica == primary {
                return Err(Malformed::InvalidField);
            }
            voters.insert(v.replica);
        }
        // the proposal itself stands in for the primary's vote
        if (voters.len() as u32) + 1 < self.kind.prepare_quorum(self.cfg.f) {
            return Err(Malformed::InvalidField);
        }
        Ok(())
    }

    pub fn check_view_change(&self, m: &ViewChange) -> Result<(), Malformed> {
        if m.replica.0 >= self.cfg.n {
            return Err(Malformed::UnknownSigner);
        }
        self.auth(&m.auth, Principal::Replica(m.replica), m.payload())?;
        for pp in &m.prepared {
            self.check_preprepare(pp)?;
            if pp.view >= m.new_view || pp.seq <= m.stable_seq {
                return Err(Malformed::InvalidField);
            }
        }
        if self.kind.is_speculative() && !m.certs.is_empty() {
            return Err(Malformed::InvalidField);
        }
        for c in &m.certs {
            self.check_certificate(c)?;
            let (view, seq, digest) = c.key().unwrap();
            if !m.prepared.iter().any(|p| (p.view, p.seq, p.digest) == (view, seq, digest)) {
                return Err(Malformed::InvalidField);
            }
        }
        Ok(())
    }

    pub fn check_new_view(&self, m: &NewView) -> Result<(), Malformed> {
        let primary = self.cfg.primary(m.new_view);
        if m.replica != primary {
            return Err(Malformed::InvalidField);
        }
        self.auth(&m.auth, Principal::Replica(primary), m.payload())?;
        for vc in &m.view_changes {
            self.check_view_change(vc)?;
            if vc.new_view != m.new_view {
                return Err(Malformed::InvalidField);
            }
        }
        match (&m.counter_cert, self.kind.primary_attests() && self.kind.family() != Family::Ea) {
            (None, true) => Err(Malformed::MissingAttestation),
            (Some(_), false) => Err(Malformed::UnexpectedAttestation),
            (None, false) => Ok(()),
            (Some(att), true) => {
                if !verify_attestation(att, &self.keys) {
                    return Err(Malformed::BadAttestation);
                }
                if att.kind != AttestationKind::CounterCreate
                    || att.component != ComponentId(primary.0)
                {
                    return Err(Malformed::BadAttestation);
                }
                Ok(())
            }
        }
    }

    pub fn check_request(&self, m: &Request) -> Result<(), Malformed> {
        if m.batch.is_noop() || m.batch.txns.iter().any(|t| t.client != m.batch.client) {
            return Err(Malformed::InvalidField);
        }
        self.auth(&m.auth, Principal::Client(m.batch.client), m.payload())
    }

    pub fn check_well_formed(&self, msg: &ProtocolMessage) -> Result<(), Malformed> {
        match msg {
            ProtocolMessage::Request(m) => self.check_request(m),
            ProtocolMessage::Preprepare(m) => self.check_preprepare(m),
            ProtocolMessage::Prepare(m) => self.check_vote(m, MsgKind::Prepare),
            ProtocolMessage::Commit(m) => self.check_vote(m, MsgKind::Commit),
            ProtocolMessage::Response(m) => self.check_response(m),
            ProtocolMessage::Checkpoint(m) => self.check_checkpoint(m),
            ProtocolMessage::ViewChange(m) => self.check_view_change(m),
            ProtocolMessage::NewView(m) => self.check_new_view(m),
        }
    }

    pub fn is_well_formed(&self, msg: &ProtocolMessage) -> bool {
        self.check_well_formed(msg).is_ok()
    }
}

impl ProtocolMessage {
    pub fn kind(&self) -> MsgKind {
        match self {
            ProtocolMessage::Request(_) => MsgKind::Request,
            ProtocolMessage::Preprepare(_) => MsgKind::Preprepare,
            ProtocolMessage::Prepare(_) => MsgKind::Prepare,
            ProtocolMessage::Commit(_) => MsgKind::Commit,
            ProtocolMessage::Response(_) => MsgKind::Response,
            ProtocolMessage::Checkpoint(_) => MsgKind::Checkpoint,
            ProtocolMessage::ViewChange(_) => MsgKind::ViewChange,
            ProtocolMessage::NewView(_) => MsgKind::NewView,
        }
    }

    pub fn auth(&self) -> &Authenticator {
        match self {
            ProtocolMessage::Request(m) => &m.auth,
            ProtocolMessage::Preprepare(m) => &m.auth,
            ProtocolMessage::Prepare(m) | ProtocolMessage::Commit(m) => &m.auth,
            ProtocolMessage::Response(m) => &m.auth,
            ProtocolMessage::Checkpoint(m) => &m.auth,
            ProtocolMessage::ViewChange(m) => &m.auth,
            ProtocolMessage::NewView(m) => &m.auth,
        }
    }

    pub fn signer(&self) -> Principal {
        self.auth().signer
    }

    /// The signed payload digest, which identifies the message content.
    pub fn id_digest(&self) -> Digest {
        self.auth().payload_digest
    }

    pub fn view(&self) -> Option<u64> {
        match self {
            ProtocolMessage::Preprepare(m) => Some(m.view),
            ProtocolMessage::Prepare(m) | ProtocolMessage::Commit(m) => Some(m.view),
            ProtocolMessage::Response(m) => Some(m.view),
            ProtocolMessage::ViewChange(m) => Some(m.new_view),
            ProtocolMessage::NewView(m) => Some(m.new_view),
            _ => None,
        }
    }

    pub fn seq(&self) -> Option<u64> {
        match self {
            ProtocolMessage::Preprepare(m) => Some(m.seq),
            ProtocolMessage::Prepare(m) | ProtocolMessage::Commit(m) => Some(m.seq),
            ProtocolMessage::Response(m) => Some(m.seq),
            ProtocolMessage::Checkpoint(m) => Some(m.seq),
            _ => None,
        }
    }

    /// Attestations carried directly by the message.
    pub fn attestations(&self) -> Vec<&Attestation> {
        match self {
            ProtocolMessage::Preprepare(m) => m.attestation.iter().collect(),
            ProtocolMessage::Prepare(m) | ProtocolMessage::Commit(m) => m.attestation.iter().collect(),
            ProtocolMessage::Checkpoint(m) => m.proof.iter().collect(),
            ProtocolMessage::NewView(m) => m.counter_cert.iter().collect(),
            _ => Vec::new(),
        }
    }

    pub fn encoded_len(&self) -> usize {
        to_bytes(self).len()
    }
}

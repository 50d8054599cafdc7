//! The record of one simulation run, its binary form and text rendering.

use std::fmt::Write as _;

use crate::codec::{from_bytes, to_bytes, CodecError, Decoder, Encoder, Wire};
use crate::message::{Malformed, MsgKind};
use crate::protocol::{ProtocolKind, RejectReason, ReplicaEvent, TimerKind, TrustedOp};
use crate::trusted::{Attestation, Persistence};
use crate::types::{wire_struct, ClientId, Digest, NodeId, Principal, ReplicaId, TxnId};

const MAGIC: &[u8; 8] = b"FTTRACE1";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TraceHeader {
    pub protocol: ProtocolKind,
    pub f: u32,
    pub n: u32,
    pub seed: u64,
    pub horizon_us: u64,
    pub gst_us: u64,
    pub scenario: String,
    pub byzantine: Vec<ReplicaId>,
    pub persistence: Persistence,
    pub clients: u32,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MsgInfo {
    pub kind: MsgKind,
    pub signer: Principal,
    pub digest: Digest,
    pub view: Option<u64>,
    pub seq: Option<u64>,
}
wire_struct!(MsgInfo { kind, signer, digest, view, seq });

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum TraceEvent {
    Send { from: NodeId, to: NodeId, msg: MsgInfo },
    Deliver { from: NodeId, to: NodeId, msg: MsgInfo },
    Dropped { from: NodeId, to: NodeId, msg: MsgInfo },
    Delayed { from: NodeId, to: NodeId, msg: MsgInfo, until: u64 },
    TimerFired { node: NodeId, kind: TimerKind },
    Replica { replica: ReplicaId, event: ReplicaEvent },
    Submitted { client: ClientId, txn: TxnId },
    Completed { client: ClientId, txn: TxnId, txns: u32, seq: u64, view: u64, quorum: Vec<ReplicaId>, submitted_at: u64 },
    Adversary { text: String },
    /// An attestation minted by the adversary through a faulty replica's component.
    Forged { replica: ReplicaId, attestation: Attestation },
    Crashed { replica: ReplicaId },
    Aborted { reason: String },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TraceRecord {
    pub at: u64,
    pub event: TraceEvent,
}
wire_struct!(TraceRecord { at, event });

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Trace {
    pub header: TraceHeader,
    pub records: Vec<TraceRecord>,
}

/// Every attestation issued during a run, in issuance order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IssuedAttestation {
    pub at: u64,
    pub replica: ReplicaId,
    pub op: Option<TrustedOp>,
    pub attestation: Attestation,
}

impl Trace {
    pub fn new(header: TraceHeader) -> Self {
        Trace { header, records: Vec::new() }
    }

    pub fn push(&mut self, at: u64, event: TraceEvent) {
        self.records.push(TraceRecord { at, event });
    }

    pub fn is_byzantine(&self, r: ReplicaId) -> bool {
        self.header.byzantine.contains(&r)
    }

    pub fn attestation_registry(&self) -> Vec<IssuedAttestation> {
        self.records
            .iter()
            .filter_map(|r| match &r.event {
                TraceEvent::Replica { replica, event: ReplicaEvent::TrustedCall { op, attestation } } => {
                    Some(IssuedAttestation { at: r.at, replica: *replica, op: Some(*op), attestation: attestation.clone() })
                }
                TraceEvent::Forged { replica, attestation } => {
                    Some(IssuedAttestation { at: r.at, replica: *replica, op: None, attestation: attestation.clone() })
                }
                _ => None,
            })
            .collect()
    }

    pub fn replica_events(&self) -> impl Iterator<Item = (u64, ReplicaId, &ReplicaEvent)> {
        self.records.iter().filter_map(|r| match &r.event {
            TraceEvent::Replica { replica, event } => Some((r.at, *replica, event)),
            _ => None,
        })
    }

    pub fn aborted(&self) -> Option<&str> {
        self.records.iter().find_map(|r| match &r.event {
            TraceEvent::Aborted { reason } => Some(reason.as_str()),
            _ => None,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut e = Encoder::new();
        e.raw(MAGIC);
        e.put(&self.header);
        e.put(&self.records);
        e.finish()
    }

    pub fn from_bytes(b: &[u8]) -> Result<Trace, CodecError> {
        if b.len() < MAGIC.len() || &b[..MAGIC.len()] != MAGIC {
            return Err(CodecError::BadMagic);
        }
        let mut d = Decoder::new(&b[MAGIC.len()..]);
        let header = d.get()?;
        let records = d.get()?;
        d.finish()?;
        Ok(Trace { header, records })
    }

    pub fn render_header(&self) -> String {
        let h = &self.header;
        let byz: Vec<String> = h.byzantine.iter().map(|r| r.to_string()).collect();
        format!(
            "# protocol={} f={} n={} seed={} horizon_us={} gst_us={} scenario={} byzantine=[{}] persistence={:?} clients={}\n",
            h.protocol, h.f, h.n, h.seed, h.horizon_us, h.gst_us, h.scenario, byz.join(","), h.persistence, h.clients
        )
    }

    pub fn render_text(&self) -> String {
        let mut s = self.render_header();
        let mut ordered: Vec<&TraceRecord> = self.records.iter().collect();
        ordered.sort_by_key(|r| r.at);
        for r in ordered {
            let _ = writeln!(s, "{}", render_record(r));
        }
        s
    }
}

fn fmt_msg(m: &MsgInfo) -> String {
    let mut s = m.kind.to_string();
    if let Some(v) = m.view {
        let _ = write!(s, " v={v}");
    }
    if let Some(q) = m.seq {
        let _ = write!(s, " seq={q}");
    }
    let _ = write!(s, " signer={} id={}", m.signer, m.digest);
    s
}

fn fmt_att(a: &Attestation) -> String {
    let x = a.x.map(|d| d.to_string()).unwrap_or_else(|| "-".into());
    format!("{:?}(q={},k={},x={}) by {}", a.kind, a.q, a.k, x, a.component)
}

pub fn render_event(e: &ReplicaEvent) -> String {
    use ReplicaEvent::*;
    match e {
        TrustedCall { op, attestation } => format!("trusted {:?} -> {}", op, fmt_att(attestation)),
        Proposed { view, seq, digest, txn, in_flight } => {
            format!("proposed v={view} seq={seq} d={digest} txn={txn} in_flight={in_flight}")
        }
        Preprepared { view, seq, digest } => format!("preprepared v={view} seq={seq} d={digest}"),
        Prepared { view, seq, digest } => format!("prepared v={view} seq={seq} d={digest}"),
        Committed { view, seq, digest } => format!("committed v={view} seq={seq} d={digest}"),
        Executed { view, seq, digest, txn } => format!("executed v={view} seq={seq} d={digest} txn={txn}"),
        RolledBack { seq, digest } => format!("rolled back seq={seq} d={digest}"),
        ViewChangeStarted { view } => format!("view change to v={view}"),
        NewViewInstalled { view, base, reproposed } => {
            let list: Vec<String> = reproposed.iter().map(|(s, d)| format!("{s}:{d}")).collect();
            format!("new view v={view} base={base} repropose=[{}]", list.join(","))
        }
        CheckpointStable { seq, digest } => format!("checkpoint stable seq={seq} d={digest}"),
        StateAdopted { seq } => format!("state adopted seq={seq}"),
        Divergence { seq } => format!("DIVERGENCE seq={seq}"),
        Rejected { kind, reason } => format!("rejected {kind}: {reason:?}"),
    }
}

pub fn render_record(r: &TraceRecord) -> String {
    use TraceEvent::*;
    let body = match &r.event {
        Send { from, to, msg } => format!("{from} send {} -> {to}", fmt_msg(msg)),
        Deliver { from, to, msg } => format!("{to} recv {} <- {from}", fmt_msg(msg)),
        Dropped { from, to, msg } => format!("{from} DROPPED {} -> {to}", fmt_msg(msg)),
        Delayed { from, to, msg, until } => format!("{from} delayed {} -> {to} until {until}", fmt_msg(msg)),
        TimerFired { node, kind } => format!("{node} timer {kind:?}"),
        Replica { replica, event } => format!("{replica} {}", render_event(event)),
        Submitted { client, txn } => format!("{client} submit {txn}"),
        Completed { client, txn, txns, seq, view, quorum, submitted_at } => {
            let q: Vec<String> = quorum.iter().map(|r| r.to_string()).collect();
            format!(
                "{client} COMPLETED {txn} size={txns} seq={seq} v={view} quorum=[{}] latency_us={}",
                q.join(","),
                r.at - submitted_at
            )
        }
        Adversary { text } => format!("adversary {text}"),
        Forged { replica, attestation } => format!("adversary forged via {replica}: {}", fmt_att(attestation)),
        Crashed { replica } => format!("{replica} CRASHED"),
        Aborted { reason } => format!("ABORTED {reason}"),
    };
    format!("{:>12} {}", r.at, body)
}

impl TraceRecord {
    /// Replica the record is about, for filtering.
    pub fn actor(&self) -> Option<NodeId> {
        use TraceEvent::*;
        match &self.event {
            Send { from, .. } | Dropped { from, .. } | Delayed { from, .. } => Some(*from),
            Deliver { to, .. } => Some(*to),
            TimerFired { node, .. } => Some(*node),
            Replica { replica, .. } | Forged { replica, .. } | Crashed { replica } => Some(NodeId::Replica(*replica)),
            Submitted { client, .. } | Completed { client, .. } => Some(NodeId::Client(*client)),
            Adversary { .. } | Aborted { .. } => None,
        }
    }

    pub fn seq(&self) -> Option<u64> {
        use ReplicaEvent as R;
        use TraceEvent::*;
        match &self.event {
            Send { msg, .. } | Deliver { msg, .. } | Dropped { msg, .. } | Delayed { msg, .. } => msg.seq,
            Completed { seq, .. } => Some(*seq),
            Forged { attestation, .. } => Some(attestation.k),
            Replica { event, .. } => match event {
                R::TrustedCall { attestation, .. } => Some(attestation.k),
                R::Proposed { seq, .. }
                | R::Preprepared { seq, .. }
                | R::Prepared { seq, .. }
                | R::Committed { seq, .. }
                | R::Executed { seq, .. }
                | R::RolledBack { seq, .. }
                | R::CheckpointStable { seq, .. }
                | R::StateAdopted { seq }
                | R::Divergence { seq } => Some(*seq),
                _ => None,
            },
            _ => None,
        }
    }

    pub fn msg_kind(&self) -> Option<MsgKind> {
        use TraceEvent::*;
        match &self.event {
            Send { msg, .. } | Deliver { msg, .. } | Dropped { msg, .. } | Delayed { msg, .. } => Some(msg.kind),
            Replica { event: ReplicaEvent::Rejected { kind, .. }, .. } => Some(*kind),
            _ => None,
        }
    }
}

// ---- binary layout ---------------------------------------------------------

impl Wire for Persistence {
    fn encode(&self, enc: &mut Encoder) {
        enc.u8(match self {
            Persistence::Persistent => 0,
            Persistence::Volatile => 1,
        })
    }
    fn decode(dec: &mut Decoder<'_>) -> Result<Self, CodecError> {
        match dec.u8()? {
            0 => Ok(Persistence::Persistent),
            1 => Ok(Persistence::Volatile),
            tag => Err(CodecError::BadTag { what: "persistence", tag }),
        }
    }
}

wire_struct!(TraceHeader { protocol, f, n, seed, horizon_us, gst_us, scenario, byzantine, persistence, clients });

impl Wire for TimerKind {
    fn encode(&self, enc: &mut Encoder) {
        match self {
            TimerKind::ClientRetry => enc.u8(0),
            TimerKind::RequestForwarded(t) => {
                enc.u8(1);
                enc.put(t)
            }
            TimerKind::ViewChange(v) => {
                enc.u8(2);
                enc.u64(*v)
            }
        }
    }
    fn decode(dec: &mut Decoder<'_>) -> Result<Self, CodecError> {
        match dec.u8()? {
            0 => Ok(TimerKind::ClientRetry),
            1 => Ok(TimerKind::RequestForwarded(dec.get()?)),
            2 => Ok(TimerKind::ViewChange(dec.u64()?)),
            tag => Err(CodecError::BadTag { what: "timer", tag }),
        }
    }
}

impl Wire for TrustedOp {
    fn encode(&self, enc: &mut Encoder) {
        enc.u8(*self as u8)
    }
    fn decode(dec: &mut Decoder<'_>) -> Result<Self, CodecError> {
        match dec.u8()? {
            0 => Ok(TrustedOp::AppendF),
            1 => Ok(TrustedOp::Create),
            2 => Ok(TrustedOp::LogAppend),
            tag => Err(CodecError::BadTag { what: "trusted op", tag }),
        }
    }
}

const MALFORMED: [Malformed; 8] = [
    Malformed::BadSignature,
    Malformed::UnknownSigner,
    Malformed::AttestationMismatch,
    Malformed::BadAttestation,
    Malformed::DigestMismatch,
    Malformed::MissingAttestation,
    Malformed::UnexpectedAttestation,
    Malformed::InvalidField,
];

impl Wire for RejectReason {
    fn encode(&self, enc: &mut Encoder) {
        match self {
            RejectReason::Malformed(m) => {
                enc.u8(0);
                enc.u8(MALFORMED.iter().position(|x| x == m).unwrap() as u8)
            }
            RejectReason::Conflict => enc.u8(1),
            RejectReason::WrongCounter => enc.u8(2),
            RejectReason::InvalidNewView => enc.u8(3),
            RejectReason::Refused => enc.u8(4),
        }
    }
    fn decode(dec: &mut Decoder<'_>) -> Result<Self, CodecError> {
        match dec.u8()? {
            0 => {
                let tag = dec.u8()?;
                MALFORMED
                    .get(tag as usize)
                    .map(|m| RejectReason::Malformed(*m))
                    .ok_or(CodecError::BadTag { what: "malformed", tag })
            }
            1 => Ok(RejectReason::Conflict),
            2 => Ok(RejectReason::WrongCounter),
            3 => Ok(RejectReason::InvalidNewView),
            4 => Ok(RejectReason::Refused),
            tag => Err(CodecError::BadTag { what: "reject reason", tag }),
        }
    }
}

impl Wire for ReplicaEvent {
    fn encode(&self, e: &mut Encoder) {
        use ReplicaEvent::*;
        match self {
            TrustedCall { op, attestation } => {
                e.u8(0);
                e.put(op);
                e.put(attestation);
            }
            Proposed { view, seq, digest, txn, in_flight } => {
                e.u8(1);
                e.u64(*view);
                e.u64(*seq);
                e.put(digest);
                e.put(txn);
                e.u32(*in_flight);
            }
            Preprepared { view, seq, digest } | Prepared { view, seq, digest } | Committed { view, seq, digest } => {
                e.u8(match self {
                    Preprepared { .. } => 2,
                    Prepared { .. } => 3,
                    _ => 4,
                });
                e.u64(*view);
                e.u64(*seq);
                e.put(digest);
            }
            Executed { view, seq, digest, txn } => {
                e.u8(5);
                e.u64(*view);
                e.u64(*seq);
                e.put(digest);
                e.put(txn);
            }
            RolledBack { seq, digest } => {
                e.u8(6);
                e.u64(*seq);
                e.put(digest);
            }
            ViewChangeStarted { view } => {
                e.u8(7);
                e.u64(*view);
            }
            NewViewInstalled { view, base, reproposed } => {
                e.u8(8);
                e.u64(*view);
                e.u64(*base);
                e.put(reproposed);
            }
            CheckpointStable { seq, digest } => {
                e.u8(9);
                e.u64(*seq);
                e.put(digest);
            }
            StateAdopted { seq } => {
                e.u8(10);
                e.u64(*seq);
            }
            Divergence { seq } => {
                e.u8(11);
                e.u64(*seq);
            }
            Rejected { kind, reason } => {
                e.u8(12);
                e.put(kind);
                e.put(reason);
            }
        }
    }
    fn decode(d: &mut Decoder<'_>) -> Result<Self, CodecError> {
        use ReplicaEvent::*;
        Ok(match d.u8()? {
            0 => TrustedCall { op: d.get()?, attestation: d.get()? },
            1 => Proposed { view: d.u64()?, seq: d.u64()?, digest: d.get()?, txn: d.get()?, in_flight: d.u32()? },
            2 => Preprepared { view: d.u64()?, seq: d.u64()?, digest: d.get()? },
            3 => Prepared { view: d.u64()?, seq: d.u64()?, digest: d.get()? },
            4 => Committed { view: d.u64()?, seq: d.u64()?, digest: d.get()? },
            5 => Executed { view: d.u64()?, seq: d.u64()?, digest: d.get()?, txn: d.get()? },
            6 => RolledBack { seq: d.u64()?, digest: d.get()? },
            7 => ViewChangeStarted { view: d.u64()? },
            8 => NewViewInstalled { view: d.u64()?, base: d.u64()?, reproposed: d.get()? },
            9 => CheckpointStable { seq: d.u64()?, digest: d.get()? },
            10 => StateAdopted { seq: d.u64()? },
            11 => Divergence { seq: d.u64()? },
            12 => Rejected { kind: d.get()?, reason: d.get()? },
            tag => return Err(CodecError::BadTag { what: "replica event", tag }),
        })
    }
}

impl Wire for TraceEvent {
    fn encode(&self, e: &mut Encoder) {
        use TraceEvent::*;
        match self {
            Send { from, to, msg } | Deliver { from, to, msg } | Dropped { from, to, msg } => {
                e.u8(match self {
                    Send { .. } => 0,
                    Deliver { .. } => 1,
                    _ => 2,
                });
                e.put(from);
                e.put(to);
                e.put(msg);
            }
            Delayed { from, to, msg, until } => {
                e.u8(3);
                e.put(from);
                e.put(to);
                e.put(msg);
                e.u64(*until);
            }
            TimerFired { node, kind } => {
                e.u8(4);
                e.put(node);
                e.put(kind);
            }
            Replica { replica, event } => {
                e.u8(5);
                e.put(replica);
                e.put(event);
            }
            Submitted { client, txn } => {
                e.u8(6);
                e.put(client);
                e.put(txn);
            }
            Completed { client, txn, txns, seq, view, quorum, submitted_at } => {
                e.u8(7);
                e.put(client);
                e.put(txn);
                e.u32(*txns);
                e.u64(*seq);
                e.u64(*view);
                e.put(quorum);
                e.u64(*submitted_at);
            }
            Adversary { text } => {
                e.u8(8);
                e.put(text);
            }
            Forged { replica, attestation } => {
                e.u8(9);
                e.put(replica);
                e.put(attestation);
            }
            Crashed { replica } => {
                e.u8(10);
                e.put(replica);
            }
            Aborted { reason } => {
                e.u8(11);
                e.put(reason);
            }
        }
    }
    fn decode(d: &mut Decoder<'_>) -> Result<Self, CodecError> {
        use TraceEvent::*;
        Ok(match d.u8()? {
            0 => Send { from: d.get()?, to: d.get()?, msg: d.get()? },
            1 => Deliver { from: d.get()?, to: d.get()?, msg: d.get()? },
            2 => Dropped { from: d.get()?, to: d.get()?, msg: d.get()? },
            3 => Delayed { from: d.get()?, to: d.get()?, msg: d.get()?, until: d.u64()? },
            4 => TimerFired { node: d.get()?, kind: d.get()? },
            5 => Replica { replica: d.get()?, event: d.get()? },
            6 => Submitted { client: d.get()?, txn: d.get()? },
            7 => Completed {
                client: d.get()?,
                txn: d.get()?,
                txns: d.u32()?,
                seq: d.u64()?,
                view: d.u64()?,
                quorum: d.get()?,
                submitted_at: d.u64()?,
            },
            8 => Adversary { text: d.get()? },
            9 => Forged { replica: d.get()?, attestation: d.get()? },
            10 => Crashed { replica: d.get()? },
            11 => Aborted { reason: d.get()? },
            tag => return Err(CodecError::BadTag { what: "trace event", tag }),
        })
    }
}

impl Wire for Trace {
    fn encode(&self, enc: &mut Encoder) {
        enc.raw(&self.to_bytes())
    }
    fn decode(dec: &mut Decoder<'_>) -> Result<Self, CodecError> {
        let rest = dec.raw(dec.remaining())?;
        Trace::from_bytes(rest)
    }
}

/// Round-trips a trace through its binary form; used by tests and tools.
pub fn reencode(t: &Trace) -> Result<Trace, CodecError> {
    from_bytes(&to_bytes(t))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn header() -> TraceHeader {
        TraceHeader {
            protocol: ProtocolKind::FlexiBft,
            f: 1,
            n: 4,
            seed: 9,
            horizon_us: 100,
            gst_us: 0,
            scenario: "unit".into(),
            byzantine: vec![ReplicaId(0)],
            persistence: Persistence::Volatile,
            clients: 1,
        }
    }

    #[test]
    fn empty_trace_renders_header_only() {
        let t = Trace::new(header());
        let text = t.render_text();
        assert_eq!(text.lines().count(), 1);
        assert!(text.starts_with("# protocol=FlexiBft"));
    }

    #[test]
    fn binary_form_round_trips() {
        let mut t = Trace::new(header());
        t.push(3, TraceEvent::Replica { replica: ReplicaId(1), event: ReplicaEvent::StateAdopted { seq: 4 } });
        t.push(5, TraceEvent::Aborted { reason: "x".into() });
        assert_eq!(Trace::from_bytes(&t.to_bytes()).unwrap(), t);
        assert_eq!(reencode(&t).unwrap(), t);
        assert_eq!(Trace::from_bytes(b"nonsense"), Err(CodecError::BadMagic));
    }
}

//! What a replica handler consumes and produces.

use crate::message::{Malformed, MsgKind, ProtocolMessage};
use crate::trusted::Attestation;
use crate::types::{ClientId, Digest, ReplicaId, TxnId};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dest {
    Replica(ReplicaId),
    /// Every replica except the sender.
    Others,
    Client(ClientId),
}

#[derive(Clone, Debug)]
pub struct Outgoing {
    /// Local time at which the message leaves the sender.
    pub at: u64,
    pub to: Dest,
    pub msg: ProtocolMessage,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum TimerKind {
    ClientRetry,
    RequestForwarded(TxnId),
    ViewChange(u64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TimerOp {
    Set { id: u64, at: u64, kind: TimerKind },
    Cancel { id: u64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum TrustedOp {
    AppendF,
    Create,
    LogAppend,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum RejectReason {
    Malformed(Malformed),
    /// A second proposal for an occupied slot.
    Conflict,
    /// Attested under a counter that is not the view's.
    WrongCounter,
    InvalidNewView,
    /// A trusted component refused the operation.
    Refused,
}

/// State transitions a replica reports for the trace.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ReplicaEvent {
    TrustedCall { op: TrustedOp, attestation: Attestation },
    Proposed { view: u64, seq: u64, digest: Digest, txn: TxnId, in_flight: u32 },
    Preprepared { view: u64, seq: u64, digest: Digest },
    Prepared { view: u64, seq: u64, digest: Digest },
    Committed { view: u64, seq: u64, digest: Digest },
    Executed { view: u64, seq: u64, digest: Digest, txn: TxnId },
    RolledBack { seq: u64, digest: Digest },
    ViewChangeStarted { view: u64 },
    NewViewInstalled { view: u64, base: u64, reproposed: Vec<(u64, Digest)> },
    CheckpointStable { seq: u64, digest: Digest },
    StateAdopted { seq: u64 },
    Divergence { seq: u64 },
    Rejected { kind: MsgKind, reason: RejectReason },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Note {
    pub at: u64,
    pub event: ReplicaEvent,
}

#[derive(Clone, Debug, Default)]
pub struct Effects {
    pub sends: Vec<Outgoing>,
    pub timers: Vec<TimerOp>,
    pub notes: Vec<Note>,
}

impl Effects {
    pub fn is_empty(&self) -> bool {
        self.sends.is_empty() && self.timers.is_empty() && self.notes.is_empty()
    }
}

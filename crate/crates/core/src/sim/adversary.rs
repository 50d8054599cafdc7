//! Scripted faults: message filters, forgeries through faulty replicas and
//! trusted-component rollback.

use std::collections::BTreeSet;

use crate::message::{MsgKind, ProtocolMessage};
use crate::types::{Batch, Digest, NodeId, ReplicaId};

/// Matches messages by sender, recipient and kind; `None` matches anything.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Filter {
    pub from: Option<BTreeSet<NodeId>>,
    pub to: Option<BTreeSet<NodeId>>,
    pub kinds: Option<BTreeSet<MsgKind>>,
}

impl Filter {
    pub fn any() -> Self {
        Filter::default()
    }

    pub fn from<I: IntoIterator<Item = NodeId>>(mut self, nodes: I) -> Self {
        self.from = Some(nodes.into_iter().collect());
        self
    }

    pub fn to<I: IntoIterator<Item = NodeId>>(mut self, nodes: I) -> Self {
        self.to = Some(nodes.into_iter().collect());
        self
    }

    pub fn kinds<I: IntoIterator<Item = MsgKind>>(mut self, kinds: I) -> Self {
        self.kinds = Some(kinds.into_iter().collect());
        self
    }

    pub fn matches(&self, from: NodeId, to: NodeId, kind: MsgKind) -> bool {
        self.from.as_ref().is_none_or(|s| s.contains(&from))
            && self.to.as_ref().is_none_or(|s| s.contains(&to))
            && self.kinds.as_ref().is_none_or(|s| s.contains(&kind))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Forgery {
    /// A message built by the adversary. Its signer must be faulty and every
    /// attestation it carries must already have been issued.
    Raw(ProtocolMessage),
    /// A faulty replica binds `batch` to `seq` with a fresh call to its own
    /// component and signs the proposal.
    Proposal { replica: ReplicaId, seq: u64, batch: Batch },
    /// A faulty replica votes for `digest`, attesting through its component
    /// where the protocol requires it.
    Vote { replica: ReplicaId, kind: MsgKind, seq: u64, digest: Digest },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum AdversaryAction {
    /// Matching messages sent from now on arrive no earlier than `until`.
    DelayMatching { filter: Filter, until: u64 },
    /// Matching messages sent from now on are lost.
    DropMatching { filter: Filter },
    ClearFilters,
    SendForged { from: NodeId, to: Vec<NodeId>, forgery: Forgery },
    SnapshotTC { replica: ReplicaId, label: String },
    Rollback { replica: ReplicaId, label: String },
    /// Crash-stop: no further deliveries or timers.
    Crash { replica: ReplicaId },
}

impl AdversaryAction {
    pub fn describe(&self) -> String {
        match self {
            AdversaryAction::DelayMatching { filter, until } => format!("delay {} until {until}", describe_filter(filter)),
            AdversaryAction::DropMatching { filter } => format!("drop {}", describe_filter(filter)),
            AdversaryAction::ClearFilters => "clear filters".into(),
            AdversaryAction::SendForged { from, to, forgery } => {
                let what = match forgery {
                    Forgery::Raw(m) => m.kind().to_string(),
                    Forgery::Proposal { replica, seq, batch } => {
                        format!("proposal by {replica} seq={seq} d={}", batch.digest())
                    }
                    Forgery::Vote { replica, kind, seq, digest } => format!("{kind} by {replica} seq={seq} d={digest}"),
                };
                let to: Vec<String> = to.iter().map(|n| n.to_string()).collect();
                format!("forge {what} from {from} to [{}]", to.join(","))
            }
            AdversaryAction::SnapshotTC { replica, label } => format!("snapshot component of {replica} as {label:?}"),
            AdversaryAction::Rollback { replica, label } => format!("roll back component of {replica} to {label:?}"),
            AdversaryAction::Crash { replica } => format!("crash {replica}"),
        }
    }
}

fn describe_filter(f: &Filter) -> String {
    fn set<T: ToString>(s: &Option<BTreeSet<T>>) -> String {
        match s {
            None => "*".into(),
            Some(s) => {
                let v: Vec<String> = s.iter().map(|x| x.to_string()).collect();
                format!("{{{}}}", v.join(","))
            }
        }
    }
    format!("{} {} -> {}", set(&f.kinds), set(&f.from), set(&f.to))
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct AdversaryScript {
    pub byzantine: BTreeSet<ReplicaId>,
    /// Applied in order of `(at, position)`.
    pub actions: Vec<(u64, AdversaryAction)>,
}

impl AdversaryScript {
    pub fn none() -> Self {
        AdversaryScript::default()
    }

    pub fn at(mut self, at: u64, action: AdversaryAction) -> Self {
        self.actions.push((at, action));
        self
    }
}

//! Filtered text timelines over a recorded trace.

use std::fmt::Write as _;

use thiserror::Error;

use crate::message::MsgKind;
use crate::trace::{render_record, Trace, TraceRecord};
use crate::types::{NodeId, ReplicaId};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum FilterError {
    #[error("unknown filter key {0:?} (expected replica, seq or kind)")]
    UnknownKey(String),
    #[error("filter {0:?} is not of the form key=value")]
    Shape(String),
    #[error("bad value for {key}: {value:?}")]
    Value { key: &'static str, value: String },
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TraceFilter {
    pub replicas: Vec<ReplicaId>,
    pub seqs: Vec<u64>,
    pub kinds: Vec<MsgKind>,
}

impl TraceFilter {
    /// Adds one `key=value` clause. Repeating a key widens that key; distinct
    /// keys must all match.
    pub fn add(&mut self, clause: &str) -> Result<(), FilterError> {
        let (k, v) = clause.split_once('=').ok_or_else(|| FilterError::Shape(clause.into()))?;
        let v = v.trim();
        match k.trim() {
            "replica" => {
                let id = v.trim_start_matches(['r', 'R']);
                let r = id.parse().map_err(|_| FilterError::Value { key: "replica", value: v.into() })?;
                self.replicas.push(ReplicaId(r));
            }
            "seq" => self.seqs.push(v.parse().map_err(|_| FilterError::Value { key: "seq", value: v.into() })?),
            "kind" => self.kinds.push(MsgKind::parse(v).ok_or(FilterError::Value { key: "kind", value: v.into() })?),
            other => return Err(FilterError::UnknownKey(other.into())),
        }
        Ok(())
    }

    pub fn parse<'a>(clauses: impl IntoIterator<Item = &'a str>) -> Result<Self, FilterError> {
        let mut f = TraceFilter::default();
        for c in clauses {
            f.add(c)?;
        }
        Ok(f)
    }

    pub fn matches(&self, r: &TraceRecord) -> bool {
        let replica_ok = self.replicas.is_empty()
            || r.actor().is_some_and(|a| matches!(a, NodeId::Replica(x) if self.replicas.contains(&x)));
        let seq_ok = self.seqs.is_empty() || r.seq().is_some_and(|s| self.seqs.contains(&s));
        let kind_ok = self.kinds.is_empty() || r.msg_kind().is_some_and(|k| self.kinds.contains(&k));
        replica_ok && seq_ok && kind_ok
    }
}

/// Header, then matching records grouped per replica in time order; records
/// with no replica actor (clients, adversary) go last.
pub fn explain_trace(trace: &Trace, filter: &TraceFilter) -> String {
    let mut s = trace.render_header();
    let mut hits: Vec<&TraceRecord> = trace.records.iter().filter(|r| filter.matches(r)).collect();
    hits.sort_by_key(|r| r.at);
    for i in 0..trace.header.n {
        let mine: Vec<&&TraceRecord> =
            hits.iter().filter(|r| r.actor() == Some(NodeId::Replica(ReplicaId(i)))).collect();
        if mine.is_empty() {
            continue;
        }
        let _ = writeln!(s, "== replica {}", ReplicaId(i));
        for r in mine {
            let _ = writeln!(s, "{}", render_record(r));
        }
    }
    let rest: Vec<&&TraceRecord> = hits.iter().filter(|r| !matches!(r.actor(), Some(NodeId::Replica(_)))).collect();
    if !rest.is_empty() {
        let _ = writeln!(s, "== other");
        for r in rest {
            let _ = writeln!(s, "{}", render_record(r));
        }
    }
    s
}

//! The replicated key-value application and its undo records.

use std::collections::BTreeMap;

use crate::codec::to_bytes;
use crate::types::{digest_parts, wire_struct, Batch, ClientId, Digest, Op};

pub type TxnResult = Vec<Option<u64>>;

/// Last executed nonce and its result, per client.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash)]
pub struct ClientEntry {
    pub nonce: u64,
    /// Sequence number the batch was first executed at.
    pub seq: u64,
    pub result: TxnResult,
}
wire_struct!(ClientEntry { nonce, seq, result });

#[derive(Clone, Debug, Default, PartialEq, Eq, Hash)]
pub struct AppState {
    pub kv: BTreeMap<u64, u64>,
    pub clients: BTreeMap<ClientId, ClientEntry>,
}
wire_struct!(AppState { kv, clients });

/// What executing one batch changed, enough to revert it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Undo {
    keys: Vec<(u64, Option<u64>)>,
    client: Option<(ClientId, Option<ClientEntry>)>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Outcome {
    /// Fresh execution.
    Applied(TxnResult),
    /// Already executed at an earlier sequence number; the cached entry.
    Duplicate(Option<ClientEntry>),
    Noop,
}

impl AppState {
    pub fn digest(&self, seq: u64) -> Digest {
        digest_parts(&[b"state", &seq.to_le_bytes(), &to_bytes(self)])
    }

    pub fn executed(&self, client: ClientId, nonce: u64) -> bool {
        self.clients.get(&client).is_some_and(|e| e.nonce >= nonce)
    }

    pub fn cached(&self, client: ClientId, nonce: u64) -> Option<&ClientEntry> {
        self.clients.get(&client).filter(|e| e.nonce == nonce)
    }

    pub fn apply(&mut self, batch: &Batch, seq: u64) -> (Outcome, Undo) {
        let mut undo = Undo { keys: Vec::new(), client: None };
        if batch.is_noop() {
            return (Outcome::Noop, undo);
        }
        if self.executed(batch.client, batch.nonce) {
            let cached = self.cached(batch.client, batch.nonce).cloned();
            return (Outcome::Duplicate(cached), undo);
        }
        let mut result = Vec::with_capacity(batch.txns.len());
        for t in &batch.txns {
            match t.op {
                Op::Put { key, value } => {
                    let prev = self.kv.insert(key, value);
                    undo.keys.push((key, prev));
                    result.push(None);
                }
                Op::Get { key } => result.push(self.kv.get(&key).copied()),
                Op::Noop => result.push(None),
            }
        }
        let prev = self
            .clients
            .insert(batch.client, ClientEntry { nonce: batch.nonce, seq, result: result.clone() });
        undo.client = Some((batch.client, prev));
        (Outcome::Applied(result), undo)
    }

    pub fn revert(&mut self, undo: Undo) {
        for (key, prev) in undo.keys.into_iter().rev() {
            match prev {
                Some(v) => self.kv.insert(key, v),
                None => self.kv.remove(&key),
            };
        }
        if let Some((c, prev)) = undo.client {
            match prev {
                Some(e) => self.clients.insert(c, e),
                None => self.clients.remove(&c),
            };
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::Transaction;

    fn batch(client: u32, nonce: u64, ops: Vec<Op>) -> Batch {
        let client = ClientId(client);
        Batch {
            client,
            nonce,
            txns: ops.into_iter().map(|op| Transaction { client, nonce, op }).collect(),
        }
    }

    #[test]
    fn get_sees_earlier_put() {
        let mut s = AppState::default();
        s.apply(&batch(0, 1, vec![Op::Put { key: 1, value: 5 }]), 1);
        let (out, _) = s.apply(&batch(0, 2, vec![Op::Get { key: 1 }, Op::Get { key: 2 }]), 2);
        assert_eq!(out, Outcome::Applied(vec![Some(5), None]));
    }

    #[test]
    fn noop_and_duplicate_leave_state_alone() {
        let mut s = AppState::default();
        s.apply(&batch(0, 1, vec![Op::Put { key: 1, value: 5 }]), 1);
        let before = s.clone();
        assert_eq!(s.apply(&Batch::noop(3), 3).0, Outcome::Noop);
        let (out, _) = s.apply(&batch(0, 1, vec![Op::Put { key: 1, value: 9 }]), 4);
        assert_eq!(out, Outcome::Duplicate(Some(ClientEntry { nonce: 1, seq: 1, result: vec![None] })));
        assert_eq!(s, before);
    }

    #[test]
    fn revert_restores_exactly() {
        let mut s = AppState::default();
        s.apply(&batch(0, 1, vec![Op::Put { key: 1, value: 5 }]), 1);
        let before = s.clone();
        let (_, u1) = s.apply(&batch(0, 2, vec![Op::Put { key: 1, value: 6 }, Op::Put { key: 2, value: 7 }]), 2);
        let (_, u2) = s.apply(&batch(1, 1, vec![Op::Put { key: 1, value: 8 }]), 3);
        s.revert(u2);
        s.revert(u1);
        assert_eq!(s, before);
    }
}

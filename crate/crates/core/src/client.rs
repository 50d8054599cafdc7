//! Closed-loop client sessions and their completion rule.

use std::collections::BTreeMap;

use crate::message::{ProtocolMessage, Request, Response};
use crate::protocol::ProtocolKind;
use crate::state::TxnResult;
use crate::types::{Batch, ClientId, KeyRing, Principal, ReplicaId, Signer, SystemConfig, TxnId};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Completion {
    pub txn: TxnId,
    pub seq: u64,
    pub view: u64,
    pub result: TxnResult,
    /// Transactions in the completed batch.
    pub txns: u32,
    pub submitted_at: u64,
    pub completed_at: u64,
    /// Replicas whose matching responses formed the quorum.
    pub quorum: Vec<ReplicaId>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ClientAction {
    /// Send to the believed primary.
    ToPrimary(ReplicaId, ProtocolMessage),
    /// Send to every replica.
    Broadcast(ProtocolMessage),
}

#[derive(Clone, Debug)]
struct Pending {
    request: Request,
    submitted_at: u64,
    responses: BTreeMap<ReplicaId, Response>,
}

#[derive(Clone, Debug)]
pub struct ClientSession {
    pub id: ClientId,
    kind: ProtocolKind,
    cfg: SystemConfig,
    pub completion_quorum: u32,
    signer: Signer,
    view_hint: u64,
    pending: Option<Pending>,
    /// Responses that disagreed with the quorum, kept as evidence.
    pub conflicting: Vec<Response>,
}

impl ClientSession {
    pub fn new(
        id: ClientId,
        kind: ProtocolKind,
        cfg: SystemConfig,
        completion_quorum: Option<u32>,
        keys: &KeyRing,
    ) -> Self {
        ClientSession {
            id,
            kind,
            cfg,
            completion_quorum: completion_quorum.unwrap_or(kind.completion_quorum(cfg.f)),
            signer: keys.signer(Principal::Client(id)),
            view_hint: 0,
            pending: None,
            conflicting: Vec::new(),
        }
    }

    pub fn pending(&self) -> Option<TxnId> {
        self.pending.as_ref().map(|p| p.request.batch.id())
    }

    pub fn submit(&mut self, batch: Batch, now: u64) -> ClientAction {
        debug_assert_eq!(batch.client, self.id);
        let request = Request::new(batch, &self.signer);
        self.pending = Some(Pending { request: request.clone(), submitted_at: now, responses: BTreeMap::new() });
        ClientAction::ToPrimary(self.cfg.primary(self.view_hint), ProtocolMessage::Request(request))
    }

    /// Retransmission to all replicas; `None` when nothing is outstanding.
    pub fn on_timeout(&mut self) -> Option<ClientAction> {
        let p = self.pending.as_ref()?;
        Some(ClientAction::Broadcast(ProtocolMessage::Request(p.request.clone())))
    }

    fn key(&self, r: &Response) -> (TxnResult, u64, Option<u64>) {
        let view = self.kind.is_speculative().then_some(r.view);
        (r.result.clone(), r.seq, view)
    }

    /// Assumes `resp` already passed the well-formedness check.
    pub fn on_response(&mut self, resp: Response, now: u64) -> Option<Completion> {
        self.view_hint = self.view_hint.max(resp.view);
        let quorum = self.completion_quorum as usize;
        let key = self.key(&resp);
        let pending = self.pending.as_mut()?;
        if resp.txn != pending.request.batch.id() {
            return None;
        }
        pending.responses.insert(resp.replica, resp);
        let matching: Vec<ReplicaId> = pending
            .responses
            .iter()
            .filter(|(_, r)| {
                let view = self.kind.is_speculative().then_some(r.view);
                (r.result.clone(), r.seq, view) == key
            })
            .map(|(id, _)| *id)
            .collect();
        if matching.len() < quorum {
            return None;
        }
        let p = self.pending.take().unwrap();
        let (result, seq, _) = key;
        let view = matching.iter().map(|r| p.responses[r].view).max().unwrap_or(0);
        for (id, r) in p.responses {
            if !matching.contains(&id) {
                self.conflicting.push(r);
            }
        }
        Some(Completion {
            txn: p.request.batch.id(),
            seq,
            view,
            result,
            txns: p.request.batch.txns.len() as u32,
            submitted_at: p.submitted_at,
            completed_at: now,
            quorum: matching,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{Op, Transaction};

    fn session(kind: ProtocolKind) -> (ClientSession, KeyRing) {
        let cfg = SystemConfig::new(1, kind.regime(), 1, 10).unwrap();
        let keys = KeyRing::new(5, cfg.n, 1);
        (ClientSession::new(ClientId(0), kind, cfg, None, &keys), keys)
    }

    fn batch(nonce: u64) -> Batch {
        let c = ClientId(0);
        Batch { client: c, nonce, txns: vec![Transaction { client: c, nonce, op: Op::Get { key: 1 } }] }
    }

    fn resp(keys: &KeyRing, r: u32, view: u64, nonce: u64) -> Response {
        let txn = TxnId { client: ClientId(0), nonce };
        Response::new(view, 1, txn, vec![None], ReplicaId(r), &keys.signer(Principal::Replica(ReplicaId(r))))
    }

    #[test]
    fn first_submit_goes_to_replica_zero() {
        let (mut c, _) = session(ProtocolKind::Pbft);
        assert!(matches!(c.submit(batch(0), 0), ClientAction::ToPrimary(ReplicaId(0), _)));
    }

    #[test]
    fn flexi_bft_completes_with_f_plus_one() {
        let (mut c, keys) = session(ProtocolKind::FlexiBft);
        c.submit(batch(0), 0);
        assert!(c.on_response(resp(&keys, 1, 0, 0), 5).is_none());
        let done = c.on_response(resp(&keys, 2, 0, 0), 7).unwrap();
        assert_eq!((done.seq, done.completed_at), (1, 7));
    }

    #[test]
    fn flexi_zz_needs_two_f_plus_one_in_one_view() {
        let (mut c, keys) = session(ProtocolKind::FlexiZZ);
        c.submit(batch(0), 0);
        assert!(c.on_response(resp(&keys, 0, 0, 0), 1).is_none());
        assert!(c.on_response(resp(&keys, 1, 0, 0), 1).is_none());
        assert!(c.on_response(resp(&keys, 2, 1, 0), 1).is_none());
        assert!(c.on_response(resp(&keys, 3, 0, 0), 1).is_some());
    }

    #[test]
    fn non_speculative_match_ignores_view() {
        let (mut c, keys) = session(ProtocolKind::FlexiBft);
        c.submit(batch(0), 0);
        c.on_response(resp(&keys, 1, 0, 0), 1);
        assert!(c.on_response(resp(&keys, 2, 1, 0), 1).is_some());
    }

    #[test]
    fn completion_is_recorded_once() {
        let (mut c, keys) = session(ProtocolKind::FlexiBft);
        c.submit(batch(0), 0);
        c.on_response(resp(&keys, 1, 0, 0), 1);
        assert!(c.on_response(resp(&keys, 2, 0, 0), 1).is_some());
        assert!(c.on_response(resp(&keys, 3, 0, 0), 1).is_none());
        assert!(c.on_timeout().is_none());
    }

    #[test]
    fn primary_hint_follows_views() {
        let (mut c, keys) = session(ProtocolKind::FlexiBft);
        c.submit(batch(0), 0);
        c.on_response(resp(&keys, 1, 1, 0), 1);
        c.on_response(resp(&keys, 2, 1, 0), 1);
        assert!(matches!(c.submit(batch(1), 2), ClientAction::ToPrimary(ReplicaId(1), _)));
    }
}

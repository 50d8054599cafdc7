//! Trusted components: attested counters, attested append-only logs and
//! counter creation, with a rollback hook reserved for the adversary.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::codec::{to_bytes, CodecError, Decoder, Encoder, Wire};
use crate::types::{
    digest_parts, wire_struct, Authenticator, ComponentId, Digest, KeyRing, Principal, ReplicaId,
    Signer,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum Persistence {
    Persistent,
    Volatile,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum AttestationKind {
    CounterBind,
    LogAttest,
    CounterCreate,
}

impl Wire for AttestationKind {
    fn encode(&self, enc: &mut Encoder) {
        enc.u8(match self {
            AttestationKind::CounterBind => 0,
            AttestationKind::LogAttest => 1,
            AttestationKind::CounterCreate => 2,
        })
    }
    fn decode(dec: &mut Decoder<'_>) -> Result<Self, CodecError> {
        match dec.u8()? {
            0 => Ok(AttestationKind::CounterBind),
            1 => Ok(AttestationKind::LogAttest),
            2 => Ok(AttestationKind::CounterCreate),
            tag => Err(CodecError::BadTag { what: "attestation kind", tag }),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Attestation {
    pub component: ComponentId,
    pub kind: AttestationKind,
    pub q: u64,
    pub k: u64,
    pub x: Option<Digest>,
    pub auth: Authenticator,
}
wire_struct!(Attestation { component, kind, q, k, x, auth });

impl Attestation {
    /// The digest the component signs.
    pub fn body_digest(
        component: ComponentId,
        kind: AttestationKind,
        q: u64,
        k: u64,
        x: Option<Digest>,
    ) -> Digest {
        digest_parts(&[
            b"attest",
            &to_bytes(&component),
            &to_bytes(&kind),
            &q.to_le_bytes(),
            &k.to_le_bytes(),
            &to_bytes(&x),
        ])
    }

    pub fn own_body_digest(&self) -> Digest {
        Self::body_digest(self.component, self.kind, self.q, self.k, self.x)
    }
}

/// True iff `att` was issued by the component it names and its fields are
/// consistent with its kind.
pub fn verify_attestation(att: &Attestation, keys: &KeyRing) -> bool {
    let shape_ok = match att.kind {
        AttestationKind::CounterCreate => att.x.is_none(),
        _ => att.x.is_some(),
    };
    shape_ok
        && att.auth.signer == Principal::Component(att.component)
        && keys.verify(&att.auth, att.own_body_digest())
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TrustedError {
    #[error("unknown counter {0}")]
    UnknownCounter(u64),
    #[error("unknown log {0}")]
    UnknownLog(u64),
    #[error("slot {requested} is not above last used slot {last}")]
    StaleSlot { requested: u64, last: u64 },
    #[error("persistent component refuses rollback")]
    RollbackForbidden,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
struct Log {
    last: u64,
    slots: BTreeMap<u64, Digest>,
}

/// Captured component state, restorable only on volatile components.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Snapshot {
    counters: BTreeMap<u64, u64>,
    logs: BTreeMap<u64, Log>,
}

#[derive(Clone, Debug)]
pub struct TrustedComponent {
    pub owner: ReplicaId,
    pub persistence: Persistence,
    /// Microseconds charged to the owner for every mutating call.
    pub access_latency_us: u64,
    counters: BTreeMap<u64, u64>,
    logs: BTreeMap<u64, Log>,
    // survives rollback so ids are never reissued
    next_counter_id: u64,
    signer: Signer,
    calls: u64,
}

impl TrustedComponent {
    pub fn new(
        owner: ReplicaId,
        persistence: Persistence,
        access_latency_us: u64,
        keys: &KeyRing,
    ) -> Self {
        TrustedComponent {
            owner,
            persistence,
            access_latency_us,
            counters: BTreeMap::new(),
            logs: BTreeMap::new(),
            next_counter_id: 0,
            signer: keys.signer(Principal::Component(ComponentId(owner.0))),
            calls: 0,
        }
    }

    pub fn id(&self) -> ComponentId {
        ComponentId(self.owner.0)
    }

    /// Number of mutating calls served so far.
    pub fn calls(&self) -> u64 {
        self.calls
    }

    fn attest(&self, kind: AttestationKind, q: u64, k: u64, x: Option<Digest>) -> Attestation {
        let body = Attestation::body_digest(self.id(), kind, q, k, x);
        Attestation { component: self.id(), kind, q, k, x, auth: self.signer.sign(body) }
    }

    pub fn counter(&self, q: u64) -> Option<u64> {
        self.counters.get(&q).copied()
    }

    pub fn append_f(&mut self, q: u64, x: Digest) -> Result<(u64, Attestation), TrustedError> {
        let slot = self.counters.get_mut(&q).ok_or(TrustedError::UnknownCounter(q))?;
        *slot += 1;
        let k = *slot;
        self.calls += 1;
        Ok((k, self.attest(AttestationKind::CounterBind, q, k, Some(x))))
    }

    pub fn create(&mut self, k0: u64) -> (u64, Attestation) {
        let q = self.next_counter_id;
        self.next_counter_id += 1;
        self.counters.insert(q, k0);
        self.calls += 1;
        (q, self.attest(AttestationKind::CounterCreate, q, k0, None))
    }

    /// Registers an empty log. Provisioning is not an attested operation.
    pub fn ensure_log(&mut self, q: u64) {
        self.logs.entry(q).or_default();
    }

    pub fn has_log(&self, q: u64) -> bool {
        self.logs.contains_key(&q)
    }

    pub fn log_last(&self, q: u64) -> Option<u64> {
        self.logs.get(&q).map(|l| l.last)
    }

    pub fn log_append(
        &mut self,
        q: u64,
        k_new: Option<u64>,
        x: Digest,
    ) -> Result<Attestation, TrustedError> {
        let log = self.logs.get_mut(&q).ok_or(TrustedError::UnknownLog(q))?;
        let slot = match k_new {
            None => log.last + 1,
            Some(k) if k > log.last => k,
            Some(k) => return Err(TrustedError::StaleSlot { requested: k, last: log.last }),
        };
        log.last = slot;
        log.slots.insert(slot, x);
        self.calls += 1;
        Ok(self.attest(AttestationKind::LogAttest, q, slot, Some(x)))
    }

    pub fn log_lookup(&self, q: u64, k: u64) -> Option<Attestation> {
        let x = *self.logs.get(&q)?.slots.get(&k)?;
        Some(self.attest(AttestationKind::LogAttest, q, k, Some(x)))
    }

    /// Drops stored slots at or below `k`; the log keeps refusing them.
    pub fn truncate_log(&mut self, q: u64, k: u64) {
        if let Some(log) = self.logs.get_mut(&q) {
            log.slots = log.slots.split_off(&(k + 1));
        }
    }

    pub fn snapshot(&self) -> Snapshot {
        Snapshot { counters: self.counters.clone(), logs: self.logs.clone() }
    }

    pub fn adversary_rollback(&mut self, to: &Snapshot) -> Result<(), TrustedError> {
        if self.persistence == Persistence::Persistent {
            return Err(TrustedError::RollbackForbidden);
        }
        self.counters = to.counters.clone();
        self.logs = to.logs.clone();
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::digest_of;

    fn tc(p: Persistence) -> (TrustedComponent, KeyRing) {
        let keys = KeyRing::new(1, 3, 1);
        (TrustedComponent::new(ReplicaId(0), p, 0, &keys), keys)
    }

    #[test]
    fn append_f_increments_from_created_value() {
        let (mut t, keys) = tc(Persistence::Persistent);
        let (q, att) = t.create(0);
        assert_eq!((q, att.k), (0, 0));
        let d = digest_of(b"t");
        for want in 1..=3 {
            let (k, a) = t.append_f(q, d).unwrap();
            assert_eq!(k, want);
            assert!(verify_attestation(&a, &keys));
        }
        assert_eq!(t.append_f(7, d), Err(TrustedError::UnknownCounter(7)));
        let (q2, _) = t.create(41);
        assert_ne!(q, q2);
        assert_eq!(t.append_f(q2, d).unwrap().0, 42);
    }

    #[test]
    fn log_slots_skip_and_go_stale() {
        let (mut t, _) = tc(Persistence::Persistent);
        t.ensure_log(5);
        let d = digest_of(b"x");
        assert_eq!(t.log_append(5, None, d).unwrap().k, 1);
        t.log_append(5, Some(3), d).unwrap();
        assert_eq!(t.log_append(5, Some(7), d).unwrap().k, 7);
        assert_eq!(
            t.log_append(5, Some(5), d),
            Err(TrustedError::StaleSlot { requested: 5, last: 7 })
        );
        assert_eq!(
            t.log_append(5, Some(7), d),
            Err(TrustedError::StaleSlot { requested: 7, last: 7 })
        );
        assert!(t.log_lookup(5, 7).is_some_and(|a| a.x == Some(d)));
        assert!(t.log_lookup(5, 5).is_none());
        assert!(t.log_lookup(9, 1).is_none());
        assert_eq!(t.log_append(9, None, d), Err(TrustedError::UnknownLog(9)));
    }

    #[test]
    fn rollback_reissues_only_when_volatile() {
        let (mut t, keys) = tc(Persistence::Volatile);
        let (q, _) = t.create(0);
        let snap = t.snapshot();
        let (_, a) = t.append_f(q, digest_of(b"T")).unwrap();
        t.adversary_rollback(&snap).unwrap();
        let (_, b) = t.append_f(q, digest_of(b"T'")).unwrap();
        assert_eq!((a.q, a.k), (b.q, b.k));
        assert_ne!(a.x, b.x);
        assert!(verify_attestation(&b, &keys));
        // rollback cannot recycle counter ids
        assert_ne!(t.create(0).0, q);

        let (mut p, _) = tc(Persistence::Persistent);
        let snap = p.snapshot();
        assert_eq!(p.adversary_rollback(&snap), Err(TrustedError::RollbackForbidden));
    }

    #[test]
    fn rollback_to_current_state_is_identity() {
        let (mut t, _) = tc(Persistence::Volatile);
        let (q, _) = t.create(3);
        t.append_f(q, digest_of(b"a")).unwrap();
        let snap = t.snapshot();
        t.adversary_rollback(&snap).unwrap();
        assert_eq!(t.snapshot(), snap);
    }

    #[test]
    fn tampered_attestations_fail_verification() {
        let (mut t, keys) = tc(Persistence::Persistent);
        let (q, _) = t.create(0);
        let (_, a) = t.append_f(q, digest_of(b"a")).unwrap();
        let mut m = a.clone();
        m.x = Some(digest_of(b"b"));
        assert!(!verify_attestation(&m, &keys));
        let mut m = a.clone();
        m.k += 1;
        assert!(!verify_attestation(&m, &keys));
        let mut m = a;
        m.component = ComponentId(99);
        assert!(!verify_attestation(&m, &keys));
    }
}

//! Identifiers, configuration, transactions, digests and authenticators.

use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};
use thiserror::Error;

use crate::codec::{to_bytes, CodecError, Decoder, Encoder, Wire};

/// Implements [`Wire`] for a plain struct by encoding its fields in order.
macro_rules! wire_struct {
    ($name:ident { $($field:ident),* $(,)? }) => {
        impl $crate::codec::Wire for $name {
            fn encode(&self, enc: &mut $crate::codec::Encoder) {
                $( $crate::codec::Wire::encode(&self.$field, enc); )*
            }
            fn decode(dec: &mut $crate::codec::Decoder<'_>) -> Result<Self, $crate::codec::CodecError> {
                Ok($name { $( $field: $crate::codec::Wire::decode(dec)?, )* })
            }
        }
    };
}
pub(crate) use wire_struct;

macro_rules! wire_newtype {
    ($name:ident, $inner:ty) => {
        impl $crate::codec::Wire for $name {
            fn encode(&self, enc: &mut $crate::codec::Encoder) {
                $crate::codec::Wire::encode(&self.0, enc)
            }
            fn decode(
                dec: &mut $crate::codec::Decoder<'_>,
            ) -> Result<Self, $crate::codec::CodecError> {
                Ok($name(<$inner as $crate::codec::Wire>::decode(dec)?))
            }
        }
    };
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ReplicaId(pub u32);
wire_newtype!(ReplicaId, u32);

impl ReplicaId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for ReplicaId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "r{}", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ClientId(pub u32);
wire_newtype!(ClientId, u32);

impl ClientId {
    /// Pseudo-client owning the no-op batches a new primary uses to fill gaps.
    pub const NOOP: ClientId = ClientId(u32::MAX);
}

impl fmt::Display for ClientId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if *self == ClientId::NOOP {
            write!(f, "noop")
        } else {
            write!(f, "c{}", self.0)
        }
    }
}

/// A trusted component is identified by the index of the replica hosting it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ComponentId(pub u32);
wire_newtype!(ComponentId, u32);

impl fmt::Display for ComponentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "tc{}", self.0)
    }
}

/// Anything that can sign: a replica, a client or a trusted component.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Principal {
    Replica(ReplicaId),
    Client(ClientId),
    Component(ComponentId),
}

impl Wire for Principal {
    fn encode(&self, enc: &mut Encoder) {
        match self {
            Principal::Replica(r) => {
                enc.u8(0);
                enc.put(r)
            }
            Principal::Client(c) => {
                enc.u8(1);
                enc.put(c)
            }
            Principal::Component(t) => {
                enc.u8(2);
                enc.put(t)
            }
        }
    }
    fn decode(dec: &mut Decoder<'_>) -> Result<Self, CodecError> {
        match dec.u8()? {
            0 => Ok(Principal::Replica(dec.get()?)),
            1 => Ok(Principal::Client(dec.get()?)),
            2 => Ok(Principal::Component(dec.get()?)),
            tag => Err(CodecError::BadTag { what: "principal", tag }),
        }
    }
}

impl fmt::Display for Principal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Principal::Replica(r) => r.fmt(f),
            Principal::Client(c) => c.fmt(f),
            Principal::Component(t) => t.fmt(f),
        }
    }
}

/// A network endpoint.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum NodeId {
    Replica(ReplicaId),
    Client(ClientId),
}

impl Wire for NodeId {
    fn encode(&self, enc: &mut Encoder) {
        match self {
            NodeId::Replica(r) => {
                enc.u8(0);
                enc.put(r)
            }
            NodeId::Client(c) => {
                enc.u8(1);
                enc.put(c)
            }
        }
    }
    fn decode(dec: &mut Decoder<'_>) -> Result<Self, CodecError> {
        match dec.u8()? {
            0 => Ok(NodeId::Replica(dec.get()?)),
            1 => Ok(NodeId::Client(dec.get()?)),
            tag => Err(CodecError::BadTag { what: "node", tag }),
        }
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NodeId::Replica(r) => r.fmt(f),
            NodeId::Client(c) => c.fmt(f),
        }
    }
}

impl Principal {
    /// The endpoint that holds this principal's key.
    pub fn node(self) -> NodeId {
        match self {
            Principal::Replica(r) => NodeId::Replica(r),
            Principal::Client(c) => NodeId::Client(c),
            Principal::Component(t) => NodeId::Replica(ReplicaId(t.0)),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Regime {
    TwoFPlusOne,
    ThreeFPlusOne,
}

impl Regime {
    pub fn replicas(self, f: u32) -> u32 {
        match self {
            Regime::TwoFPlusOne => 2 * f + 1,
            Regime::ThreeFPlusOne => 3 * f + 1,
        }
    }
}

impl Wire for Regime {
    fn encode(&self, enc: &mut Encoder) {
        enc.u8(match self {
            Regime::TwoFPlusOne => 0,
            Regime::ThreeFPlusOne => 1,
        })
    }
    fn decode(dec: &mut Decoder<'_>) -> Result<Self, CodecError> {
        match dec.u8()? {
            0 => Ok(Regime::TwoFPlusOne),
            1 => Ok(Regime::ThreeFPlusOne),
            tag => Err(CodecError::BadTag { what: "regime", tag }),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ConfigError {
    #[error("regime {regime:?} with f={f} requires n={expected}, got n={n}")]
    RegimeMismatch { regime: Regime, f: u32, n: u32, expected: u32 },
    #[error("{0} must be positive")]
    NotPositive(&'static str),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SystemConfig {
    pub f: u32,
    pub n: u32,
    pub regime: Regime,
    pub batch_size: u32,
    pub checkpoint_period: u64,
}

impl SystemConfig {
    pub fn new(
        f: u32,
        regime: Regime,
        batch_size: u32,
        checkpoint_period: u64,
    ) -> Result<Self, ConfigError> {
        Self::with_n(f, regime.replicas(f), regime, batch_size, checkpoint_period)
    }

    pub fn with_n(
        f: u32,
        n: u32,
        regime: Regime,
        batch_size: u32,
        checkpoint_period: u64,
    ) -> Result<Self, ConfigError> {
        if f == 0 {
            return Err(ConfigError::NotPositive("f"));
        }
        let expected = regime.replicas(f);
        if n != expected {
            return Err(ConfigError::RegimeMismatch { regime, f, n, expected });
        }
        if batch_size == 0 {
            return Err(ConfigError::NotPositive("batch_size"));
        }
        if checkpoint_period == 0 {
            return Err(ConfigError::NotPositive("checkpoint_period"));
        }
        Ok(SystemConfig { f, n, regime, batch_size, checkpoint_period })
    }

    pub fn primary(&self, view: u64) -> ReplicaId {
        ReplicaId((view % self.n as u64) as u32)
    }

    pub fn replicas(&self) -> impl Iterator<Item = ReplicaId> {
        (0..self.n).map(ReplicaId)
    }
}

/// Wire sizes reported for the original deployment; only consulted when the
/// network model is given a finite bandwidth.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MessageSizes {
    pub preprepare: u32,
    pub prepare: u32,
    pub commit: u32,
    pub response: u32,
    pub other: u32,
}

impl Default for MessageSizes {
    fn default() -> Self {
        MessageSizes { preprepare: 5392, prepare: 216, commit: 220, response: 2270, other: 256 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Op {
    Put { key: u64, value: u64 },
    Get { key: u64 },
    Noop,
}

impl Wire for Op {
    fn encode(&self, enc: &mut Encoder) {
        match self {
            Op::Put { key, value } => {
                enc.u8(0);
                enc.u64(*key);
                enc.u64(*value);
            }
            Op::Get { key } => {
                enc.u8(1);
                enc.u64(*key);
            }
            Op::Noop => enc.u8(2),
        }
    }
    fn decode(dec: &mut Decoder<'_>) -> Result<Self, CodecError> {
        match dec.u8()? {
            0 => Ok(Op::Put { key: dec.u64()?, value: dec.u64()? }),
            1 => Ok(Op::Get { key: dec.u64()? }),
            2 => Ok(Op::Noop),
            tag => Err(CodecError::BadTag { what: "op", tag }),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Transaction {
    pub client: ClientId,
    pub nonce: u64,
    pub op: Op,
}
wire_struct!(Transaction { client, nonce, op });

/// Identifies a client batch: the unit a sequence number orders.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TxnId {
    pub client: ClientId,
    pub nonce: u64,
}
wire_struct!(TxnId { client, nonce });

impl fmt::Display for TxnId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}#{}", self.client, self.nonce)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Batch {
    pub client: ClientId,
    pub nonce: u64,
    pub txns: Vec<Transaction>,
}
wire_struct!(Batch { client, nonce, txns });

impl Batch {
    pub fn id(&self) -> TxnId {
        TxnId { client: self.client, nonce: self.nonce }
    }

    /// The gap filler a new primary proposes at `seq`; identical at every replica.
    pub fn noop(seq: u64) -> Batch {
        Batch {
            client: ClientId::NOOP,
            nonce: seq,
            txns: vec![Transaction { client: ClientId::NOOP, nonce: seq, op: Op::Noop }],
        }
    }

    pub fn is_noop(&self) -> bool {
        self.client == ClientId::NOOP
    }

    pub fn digest(&self) -> Digest {
        digest_of(&to_bytes(self))
    }
}

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Digest(pub [u8; 32]);

impl Wire for Digest {
    fn encode(&self, enc: &mut Encoder) {
        enc.raw(&self.0)
    }
    fn decode(dec: &mut Decoder<'_>) -> Result<Self, CodecError> {
        Ok(Digest(dec.raw(32)?.try_into().unwrap()))
    }
}

impl Digest {
    pub fn short(&self) -> String {
        self.0[..4].iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn hex(&self) -> String {
        self.0.iter().map(|b| format!("{b:02x}")).collect()
    }
}

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Digest({})", self.short())
    }
}

impl fmt::Display for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.short())
    }
}

pub fn digest_of(content: &[u8]) -> Digest {
    Digest(Sha256::digest(content).into())
}

/// Digest over several parts with length framing, so `("ab","c")` and
/// `("a","bc")` differ.
pub fn digest_parts(parts: &[&[u8]]) -> Digest {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    Digest(h.finalize().into())
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Authenticator {
    pub signer: Principal,
    pub payload_digest: Digest,
    pub tag: Vec<u8>,
}
wire_struct!(Authenticator { signer, payload_digest, tag });

/// Signing capability for exactly one principal.
#[derive(Clone)]
pub struct Signer {
    principal: Principal,
    secret: Digest,
}

impl fmt::Debug for Signer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Signer").field("principal", &self.principal).finish_non_exhaustive()
    }
}

impl Signer {
    pub fn principal(&self) -> Principal {
        self.principal
    }

    pub fn sign(&self, payload: Digest) -> Authenticator {
        Authenticator { signer: self.principal, payload_digest: payload, tag: mac(&self.secret, &payload) }
    }
}

fn mac(secret: &Digest, payload: &Digest) -> Vec<u8> {
    digest_parts(&[b"auth", &secret.0, &payload.0]).0.to_vec()
}

/// Verification context: knows every principal's key and the population
/// sizes used to reject unknown signers.
///
/// Keys are keyed-hash secrets derived from a per-run master key. Replicas
/// and clients only ever receive a [`Signer`] for their own principal, so a
/// party can produce tags for itself alone.
#[derive(Clone, Debug)]
pub struct KeyRing {
    master: Digest,
    pub n: u32,
    pub clients: u32,
}

impl KeyRing {
    pub fn new(master_seed: u64, n: u32, clients: u32) -> Self {
        KeyRing { master: digest_parts(&[b"keyring", &master_seed.to_le_bytes()]), n, clients }
    }

    fn secret(&self, p: Principal) -> Digest {
        digest_parts(&[b"principal", &self.master.0, &to_bytes(&p)])
    }

    pub fn signer(&self, p: Principal) -> Signer {
        Signer { principal: p, secret: self.secret(p) }
    }

    pub fn knows(&self, p: Principal) -> bool {
        match p {
            Principal::Replica(r) => r.0 < self.n,
            Principal::Component(c) => c.0 < self.n,
            Principal::Client(c) => c.0 < self.clients || c == ClientId::NOOP,
        }
    }

    /// True iff `auth` was produced by its claimed signer over `payload`.
    pub fn verify(&self, auth: &Authenticator, payload: Digest) -> bool {
        self.knows(auth.signer)
            && auth.payload_digest == payload
            && auth.tag == mac(&self.secret(auth.signer), &payload)
    }
}

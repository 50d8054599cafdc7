pub mod io;
mod kind;
mod replica;
mod viewchange;

pub use io::{Dest, Effects, Note, Outgoing, RejectReason, ReplicaEvent, TimerKind, TimerOp, TrustedOp};
pub use kind::{Family, Ordering, ProtocolKind};
pub use replica::{ReplicaConfig, ReplicaState, Status};
pub use viewchange::{select_reproposals, Selection};

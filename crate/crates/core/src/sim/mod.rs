//! Deterministic discrete-event simulation of replicas, clients and an
//! adversary over a partially synchronous network.

pub mod adversary;
mod model;
pub mod network;
mod runner;

pub use adversary::{AdversaryAction, AdversaryScript, Filter, Forgery};
pub use model::throughput_model;
pub use network::NetworkModel;
pub use runner::{authenticity_audit, run, SimConfig, SimError, Simulation, Timeouts};

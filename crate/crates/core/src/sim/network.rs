use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::types::NodeId;

/// Point-to-point delays in microseconds.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkModel {
    /// Used for every pair without an entry in `replica_delays`, and for all
    /// client links.
    pub one_way_us: u64,
    /// Optional `[from][to]` matrix over replicas.
    #[serde(default)]
    pub replica_delays: Option<Vec<Vec<u64>>>,
    /// Uniform extra delay in `[0, jitter_us]`, drawn per message.
    #[serde(default)]
    pub jitter_us: u64,
    #[serde(default)]
    pub gst_us: u64,
}

impl NetworkModel {
    pub fn uniform(one_way_us: u64, jitter_us: u64) -> Self {
        NetworkModel { one_way_us, replica_delays: None, jitter_us, gst_us: 0 }
    }

    pub fn base_delay(&self, from: NodeId, to: NodeId) -> u64 {
        match (from, to, &self.replica_delays) {
            (NodeId::Replica(a), NodeId::Replica(b), Some(m)) => {
                m.get(a.index()).and_then(|row| row.get(b.index())).copied().unwrap_or(self.one_way_us)
            }
            _ => self.one_way_us,
        }
    }

    /// Largest delay any message can see once the network is synchronous.
    pub fn max_delay(&self) -> u64 {
        let matrix_max = self.replica_delays.iter().flatten().flatten().copied().max().unwrap_or(0);
        self.one_way_us.max(matrix_max) + self.jitter_us
    }

    pub fn sample(&self, from: NodeId, to: NodeId, rng: &mut ChaCha8Rng) -> u64 {
        let jitter = if self.jitter_us == 0 { 0 } else { rng.random_range(0..=self.jitter_us) };
        self.base_delay(from, to) + jitter
    }
}

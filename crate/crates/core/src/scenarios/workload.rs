//! YCSB-style key-value operation streams.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Zipf};
use serde::{Deserialize, Serialize};

use crate::types::{Batch, ClientId, Op, Transaction};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KeyDistribution {
    Uniform,
    Zipf { theta: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Workload {
    pub n_records: u64,
    pub n_txns: u64,
    pub read_fraction: f64,
    pub distribution: KeyDistribution,
    pub seed: u64,
}

impl Workload {
    pub fn uniform(n_records: u64, n_txns: u64, seed: u64) -> Self {
        Workload { n_records, n_txns, read_fraction: 0.5, distribution: KeyDistribution::Uniform, seed }
    }
}

/// Deterministic in `w.seed`. Keys fall in `[0, n_records)`; the Zipf rank
/// `r` maps to key `r - 1`, so key 0 is the hottest.
pub fn generate_workload(w: &Workload) -> Vec<Op> {
    assert!(w.n_records >= 1, "workload needs at least one record");
    let mut rng = ChaCha8Rng::seed_from_u64(w.seed);
    let zipf = match w.distribution {
        KeyDistribution::Zipf { theta } => Some(Zipf::new(w.n_records as f64, theta).expect("zipf parameters")),
        KeyDistribution::Uniform => None,
    };
    (0..w.n_txns)
        .map(|_| {
            let key = match &zipf {
                Some(z) => (z.sample(&mut rng) as u64 - 1).min(w.n_records - 1),
                None => rng.random_range(0..w.n_records),
            };
            if rng.random_bool(w.read_fraction.clamp(0.0, 1.0)) {
                Op::Get { key }
            } else {
                Op::Put { key, value: rng.random() }
            }
        })
        .collect()
}

/// Splits an operation stream into closed-loop batch queues, dealing batches
/// to clients round-robin. Nonces count up from zero per client.
pub fn into_batches(ops: Vec<Op>, clients: u32, batch_size: u32) -> Vec<Vec<Batch>> {
    let clients = clients.max(1) as usize;
    let size = batch_size.max(1) as usize;
    let mut out: Vec<Vec<Batch>> = vec![Vec::new(); clients];
    for (i, chunk) in ops.chunks(size).enumerate() {
        let q = &mut out[i % clients];
        let client = ClientId((i % clients) as u32);
        let nonce = q.len() as u64;
        let txns = chunk.iter().map(|op| Transaction { client, nonce, op: *op }).collect();
        q.push(Batch { client, nonce, txns });
    }
    out
}

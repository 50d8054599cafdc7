//! Deterministic choice of what a new primary re-proposes.

use std::collections::{BTreeMap, BTreeSet};

use crate::message::ViewChange;
use crate::state::AppState;
use crate::types::{Batch, Digest};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Selection {
    /// Highest stable checkpoint reported; re-proposals start right above it.
    pub base: u64,
    pub base_state: AppState,
    /// Contiguous from `base + 1`, gaps filled with no-ops.
    pub entries: Vec<(u64, Batch)>,
}

impl Selection {
    pub fn digests(&self) -> Vec<(u64, Digest)> {
        self.entries.iter().map(|(s, b)| (*s, b.digest())).collect()
    }
}

/// Per sequence number: certified entries beat uncertified ones, then the
/// higher view wins, then the smaller digest.
pub fn select_reproposals(vcs: &[ViewChange]) -> Selection {
    let mut base = 0;
    let mut base_state = AppState::default();
    for vc in vcs {
        if vc.stable_seq > base {
            base = vc.stable_seq;
            base_state = vc.stable_state.clone();
        }
    }
    let certified: BTreeSet<(u64, u64, Digest)> =
        vcs.iter().flat_map(|vc| vc.certs.iter().filter_map(|c| c.key())).collect();
    let mut best: BTreeMap<u64, ((bool, u64, std::cmp::Reverse<Digest>), &Batch)> = BTreeMap::new();
    for vc in vcs {
        for pp in vc.prepared.iter().filter(|p| p.seq > base) {
            let rank = (
                certified.contains(&(pp.view, pp.seq, pp.digest)),
                pp.view,
                std::cmp::Reverse(pp.digest),
            );
            match best.get(&pp.seq) {
                Some((r, _)) if *r >= rank => {}
                _ => {
                    best.insert(pp.seq, (rank, &pp.batch));
                }
            }
        }
    }
    let top = best.keys().next_back().copied().unwrap_or(base);
    let entries = (base + 1..=top)
        .map(|s| (s, best.get(&s).map(|(_, b)| (*b).clone()).unwrap_or_else(|| Batch::noop(s))))
        .collect();
    Selection { base, base_state, entries }
}

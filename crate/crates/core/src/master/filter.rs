use serde::{Deserialize, Serialize};

/// Feature eviction rule.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FilterPolicy {
    /// Keep at most this many features, evicting least recently updated first.
    MaxParams(usize),
    /// Evict features not updated within this many table epochs.
    MinEpochAge(u64),
}

/// `(epoch, id)` pairs to evict from `entries`, oldest first.
pub fn select_victims(entries: &[(u64, u64)], current_epoch: u64, policy: &FilterPolicy) -> Vec<(u64, u64)> {
    match *policy {
        FilterPolicy::MaxParams(max) => {
            if entries.len() <= max {
                return Vec::new();
            }
            let mut sorted = entries.to_vec();
            sorted.sort_unstable();
            sorted.truncate(entries.len() - max);
            sorted
        }
        FilterPolicy::MinEpochAge(age) => {
            let mut out: Vec<_> = entries
                .iter()
                .copied()
                .filter(|&(e, _)| current_epoch.saturating_sub(e) > age)
                .collect();
            out.sort_unstable();
            out
        }
    }
}

use serde::{Deserialize, Serialize};

/// What the victim enclave does during a scenario.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Workload {
    /// Trusted-time samples at random intervals.
    Time {
        samples: u32,
        #[serde(default = "default_min_interval")]
        min_interval_ns: u64,
        #[serde(default = "default_max_interval")]
        max_interval_ns: u64,
    },
    /// Clock reads issued in batched mode.
    Batch { requests: u32, batch: usize },
    /// UDP echo between the victim stack and a peer stack.
    Net { datagrams: u32, size: usize },
    Idle,
}

fn default_min_interval() -> u64 {
    100_000
}

fn default_max_interval() -> u64 {
    5_000_000
}

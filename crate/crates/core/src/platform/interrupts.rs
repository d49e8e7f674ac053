use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::EnclaveId;

pub type Vector = u8;

pub const TIMER_VECTOR: Vector = 0x20;
pub const KEYBOARD_VECTOR: Vector = 0x21;
/// First vector handed out for enclave notifications.
pub const NOTIFY_VECTOR_BASE: Vector = 0x40;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Target {
    Ssv,
    Os,
    EnclaveNotify(EnclaveId),
}

/// I/O APIC redirection table: every known vector routes to exactly one target.
#[derive(Clone, Debug, Default)]
pub struct RedirectionTable {
    entries: BTreeMap<Vector, Target>,
}

impl RedirectionTable {
    pub fn register(&mut self, vector: Vector) {
        self.entries.entry(vector).or_insert(Target::Os);
    }

    pub fn route(&mut self, vector: Vector, target: Target) {
        self.entries.insert(vector, target);
    }

    pub fn target(&self, vector: Vector) -> Option<Target> {
        self.entries.get(&vector).copied()
    }

    pub fn remove(&mut self, vector: Vector) {
        self.entries.remove(&vector);
    }

    pub fn entries(&self) -> impl Iterator<Item = (Vector, Target)> + '_ {
        self.entries.iter().map(|(v, t)| (*v, *t))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Delivery {
    pub vt_ns: u64,
    pub vector: Vector,
    pub target: Target,
}

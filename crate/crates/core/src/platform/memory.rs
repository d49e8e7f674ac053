//! Isolation domains and the access-rule table.

use serde::{Deserialize, Serialize};

use super::mode::{Context, ExecutionMode};
use super::{Actor, EnclaveId};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DomainKind {
    Smram,
    Epc(EnclaveId),
    SharedRam,
    UntrustedRam,
}

#[derive(Clone, Debug)]
pub struct MemoryDomain {
    pub kind: DomainKind,
    pub base: u64,
    pub contents: Vec<u8>,
}

impl MemoryDomain {
    pub fn new(kind: DomainKind, base: u64, size: usize) -> Self {
        MemoryDomain { kind, base, contents: vec![0; size] }
    }

    pub fn size(&self) -> usize {
        self.contents.len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AccessOp<'a> {
    Read(usize),
    Write(&'a [u8]),
}

impl AccessOp<'_> {
    pub fn len(&self) -> usize {
        match self {
            AccessOp::Read(n) => *n,
            AccessOp::Write(d) => d.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_write(&self) -> bool {
        matches!(self, AccessOp::Write(_))
    }
}

/// Whether `actor` may touch `domain` while the machine is in `mode`.
///
/// SMRAM belongs to the supervisor and only while in SMM. An EPC belongs to
/// its enclave and only while that enclave is the running context. Shared and
/// untrusted RAM are open to every running actor. While in SMM the rest of
/// the machine is paused.
pub fn access_allowed(actor: Actor, domain: DomainKind, mode: ExecutionMode) -> bool {
    match mode {
        ExecutionMode::Smm => {
            actor == Actor::Ssv && matches!(domain, DomainKind::Smram | DomainKind::SharedRam | DomainKind::UntrustedRam)
        }
        ExecutionMode::Protected(ctx) => match actor {
            Actor::Ssv => false,
            Actor::Os | Actor::Adversary => matches!(domain, DomainKind::SharedRam | DomainKind::UntrustedRam),
            Actor::Enclave(e) => {
                ctx == Context::Enclave(e)
                    && match domain {
                        DomainKind::Epc(owner) => owner == e,
                        DomainKind::SharedRam | DomainKind::UntrustedRam => true,
                        DomainKind::Smram => false,
                    }
            }
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rule_table() {
        let os = ExecutionMode::Protected(Context::Os);
        let e7 = ExecutionMode::Protected(Context::Enclave(7));
        assert!(!access_allowed(Actor::Os, DomainKind::Smram, os));
        assert!(access_allowed(Actor::Ssv, DomainKind::Smram, ExecutionMode::Smm));
        assert!(!access_allowed(Actor::Ssv, DomainKind::Smram, os));
        assert!(!access_allowed(Actor::Ssv, DomainKind::Epc(7), ExecutionMode::Smm));
        assert!(access_allowed(Actor::Enclave(7), DomainKind::Epc(7), e7));
        assert!(!access_allowed(Actor::Enclave(7), DomainKind::Epc(8), e7));
        assert!(!access_allowed(Actor::Enclave(7), DomainKind::Epc(7), os));
        assert!(access_allowed(Actor::Enclave(7), DomainKind::UntrustedRam, e7));
        assert!(access_allowed(Actor::Adversary, DomainKind::SharedRam, e7));
        assert!(!access_allowed(Actor::Adversary, DomainKind::SharedRam, ExecutionMode::Smm));
    }
}

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha512};

use super::EnclaveId;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Context {
    Os,
    Enclave(EnclaveId),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ExecutionMode {
    Protected(Context),
    Smm,
}

impl ExecutionMode {
    pub fn is_smm(self) -> bool {
        matches!(self, ExecutionMode::Smm)
    }

    /// Eight-byte encoding used in the SMRAM save-state area.
    pub fn encode(self) -> [u8; 8] {
        let mut out = [0u8; 8];
        match self {
            ExecutionMode::Protected(Context::Os) => out[0] = 1,
            ExecutionMode::Protected(Context::Enclave(e)) => {
                out[0] = 2;
                out[4..].copy_from_slice(&e.to_be_bytes());
            }
            ExecutionMode::Smm => out[0] = 3,
        }
        out
    }

    pub fn decode(b: [u8; 8]) -> Option<Self> {
        match b[0] {
            1 => Some(ExecutionMode::Protected(Context::Os)),
            2 => Some(ExecutionMode::Protected(Context::Enclave(u32::from_be_bytes([b[4], b[5], b[6], b[7]])))),
            3 => Some(ExecutionMode::Smm),
            _ => None,
        }
    }
}

/// General-purpose register file: 64 bytes of architectural state.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct CpuState {
    pub regs: [u64; 8],
}

impl CpuState {
    pub fn to_bytes(&self) -> [u8; 64] {
        let mut out = [0u8; 64];
        for (chunk, r) in out.chunks_exact_mut(8).zip(self.regs) {
            chunk.copy_from_slice(&r.to_be_bytes());
        }
        out
    }

    pub fn from_bytes(b: &[u8]) -> Self {
        let mut regs = [0u64; 8];
        for (r, chunk) in regs.iter_mut().zip(b.chunks_exact(8)) {
            *r = u64::from_be_bytes(chunk.try_into().unwrap());
        }
        CpuState { regs }
    }
}

/// 64-byte checksum over the mode and register file.
pub fn context_checksum(mode: ExecutionMode, cpu: &CpuState) -> [u8; 64] {
    let mut h = Sha512::new();
    h.update(mode.encode());
    h.update(cpu.to_bytes());
    h.finalize().into()
}

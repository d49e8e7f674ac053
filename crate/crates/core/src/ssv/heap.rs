//! Boundary-checked bump heap inside SMRAM.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::platform::{Actor, DomainKind, Platform};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Block {
    /// SMRAM offset of the first byte.
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
pub enum HeapError {
    #[error("secure heap exhausted")]
    OutOfMemory,
    #[error("zero-sized allocation")]
    ZeroSize,
    #[error("access [{offset}, +{len}) outside block {block:?}")]
    BoundaryViolation { block: Block, offset: usize, len: usize },
}

#[derive(Clone, Debug)]
pub struct SecureHeap {
    base: usize,
    len: usize,
    next: usize,
    live: Vec<Block>,
    pub violations: u64,
    pub high_water: usize,
}

impl SecureHeap {
    pub fn new(base: usize, len: usize) -> Self {
        SecureHeap { base, len, next: 0, live: Vec::new(), violations: 0, high_water: 0 }
    }

    pub fn arena(&self) -> (usize, usize) {
        (self.base, self.len)
    }

    pub fn alloc(&mut self, n: usize) -> Result<Block, HeapError> {
        if n == 0 {
            return Err(HeapError::ZeroSize);
        }
        // 16-byte granularity keeps blocks aligned like the firmware allocator.
        let rounded = n.div_ceil(16) * 16;
        if self.next + rounded > self.len {
            return Err(HeapError::OutOfMemory);
        }
        let block = Block { offset: self.base + self.next, len: n };
        self.next += rounded;
        self.high_water = self.high_water.max(self.next);
        self.live.push(block);
        Ok(block)
    }

    pub fn free(&mut self, block: Block) {
        self.live.retain(|b| *b != block);
        if self.live.is_empty() {
            self.next = 0;
        }
    }

    /// Free every live block. Called unconditionally before leaving SMM.
    pub fn reset(&mut self) {
        self.live.clear();
        self.next = 0;
    }

    pub fn live(&self) -> &[Block] {
        &self.live
    }

    fn check(&mut self, block: Block, offset: usize, len: usize) -> Result<(), HeapError> {
        let inside = self.live.contains(&block) && offset.checked_add(len).is_some_and(|end| end <= block.len);
        if inside {
            Ok(())
        } else {
            self.violations += 1;
            Err(HeapError::BoundaryViolation { block, offset, len })
        }
    }

    /// Driver write into a granted block; out-of-block writes are suppressed.
    pub fn write(&mut self, p: &mut Platform, block: Block, offset: usize, data: &[u8]) -> Result<(), HeapError> {
        self.check(block, offset, data.len())?;
        p.write(Actor::Ssv, DomainKind::Smram, block.offset + offset, data).expect("heap arena lies in SMRAM");
        Ok(())
    }

    pub fn read(&mut self, p: &mut Platform, block: Block, offset: usize, len: usize) -> Result<Vec<u8>, HeapError> {
        self.check(block, offset, len)?;
        Ok(p.read(Actor::Ssv, DomainKind::Smram, block.offset + offset, len).expect("heap arena lies in SMRAM"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::platform::{PlatformConfig, SmiSource};

    #[test]
    fn sixteen_pages_fit_seventeenth_fails() {
        let mut h = SecureHeap::new(0x10000, 64 * 1024);
        for _ in 0..(65536 / 4096) {
            let b = h.alloc(4096).unwrap();
            assert!(b.offset >= 0x10000 && b.offset + b.len <= 0x20000);
        }
        assert_eq!(h.alloc(4096), Err(HeapError::OutOfMemory));
        h.reset();
        assert!(h.live().is_empty());
        assert!(h.alloc(4096).is_ok());
    }

    #[test]
    fn overrun_suppressed() {
        let mut p = Platform::new(PlatformConfig::default());
        p.trigger_smi(SmiSource::Software).unwrap();
        let mut h = SecureHeap::new(0x10000, 64 * 1024);
        let a = h.alloc(8).unwrap();
        let b = h.alloc(8).unwrap();
        h.write(&mut p, b, 0, &[0x55; 8]).unwrap();
        let err = h.write(&mut p, a, 0, &[0xff; 17]).unwrap_err();
        assert!(matches!(err, HeapError::BoundaryViolation { .. }));
        assert_eq!(h.violations, 1);
        assert_eq!(h.read(&mut p, b, 0, 8).unwrap(), vec![0x55; 8]);
        assert_eq!(h.read(&mut p, a, 0, 8).unwrap(), vec![0; 8]);
    }
}

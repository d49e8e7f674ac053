//! Fixed-size packet buffer pool. A stack never allocates packet memory
//! beyond its configured number of buffers.

use crate::devices::MAX_FRAME;

pub const BUF_SIZE: usize = MAX_FRAME;

/// Handle to a pool buffer. Not `Clone`: each buffer has one owner.
#[derive(Debug, PartialEq, Eq)]
pub struct PacketBuf {
    index: usize,
    len: usize,
}

impl PacketBuf {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PoolStats {
    pub allocations: u64,
    pub exhausted: u64,
    pub high_water: usize,
}

#[derive(Debug)]
pub struct PacketPool {
    store: Vec<Box<[u8; BUF_SIZE]>>,
    free: Vec<usize>,
    pub stats: PoolStats,
}

impl PacketPool {
    pub fn new(buffers: usize) -> Self {
        PacketPool {
            store: (0..buffers).map(|_| Box::new([0u8; BUF_SIZE])).collect(),
            free: (0..buffers).rev().collect(),
            stats: PoolStats::default(),
        }
    }

    pub fn capacity(&self) -> usize {
        self.store.len()
    }

    pub fn in_use(&self) -> usize {
        self.store.len() - self.free.len()
    }

    /// Copy `data` into a free buffer. `None` when the pool is exhausted or
    /// the data does not fit.
    pub fn alloc(&mut self, data: &[u8]) -> Option<PacketBuf> {
        if data.len() > BUF_SIZE {
            return None;
        }
        let Some(index) = self.free.pop() else {
            self.stats.exhausted += 1;
            return None;
        };
        self.store[index][..data.len()].copy_from_slice(data);
        self.stats.allocations += 1;
        self.stats.high_water = self.stats.high_water.max(self.in_use());
        Some(PacketBuf { index, len: data.len() })
    }

    pub fn get(&self, buf: &PacketBuf) -> &[u8] {
        &self.store[buf.index][..buf.len]
    }

    pub fn free(&mut self, buf: PacketBuf) {
        debug_assert!(!self.free.contains(&buf.index), "double free");
        self.store[buf.index][..buf.len].fill(0);
        self.free.push(buf.index);
    }

    /// Copy out and release.
    pub fn take(&mut self, buf: PacketBuf) -> Vec<u8> {
        let v = self.get(&buf).to_vec();
        self.free(buf);
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exhaustion_and_reuse() {
        let mut p = PacketPool::new(2);
        let a = p.alloc(b"a").unwrap();
        let b = p.alloc(b"bb").unwrap();
        assert!(p.alloc(b"c").is_none());
        assert_eq!(p.stats.exhausted, 1);
        assert_eq!(p.get(&b), b"bb");
        p.free(a);
        let c = p.alloc(b"ccc").unwrap();
        assert_eq!(p.take(c), b"ccc");
        assert_eq!(p.in_use(), 1);
        assert_eq!(p.stats.high_water, 2);
    }

    #[test]
    fn oversize_rejected() {
        let mut p = PacketPool::new(1);
        assert!(p.alloc(&[0; BUF_SIZE + 1]).is_none());
        assert_eq!(p.in_use(), 0);
    }
}

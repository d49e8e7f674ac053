//! Page-aligned single-producer/single-consumer frame rings in shared RAM.
//!
//! A session's region is `2 * capacity` frame slots followed by one header
//! page. The header holds four big-endian u64 indices:
//! `to_ssv.producer, to_ssv.consumer, from_ssv.producer, from_ssv.consumer`.
//! Indices are free-running; a slot is `index % capacity`.

use serde::{Deserialize, Serialize};

use super::frame::{SealedFrame, FRAME_SIZE};
use super::ChannelError;
use crate::platform::{Actor, DomainKind, Platform};

pub const PAGE: usize = 4096;
pub const DEFAULT_CAPACITY: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FifoHandle {
    /// Shared-RAM offset of slot 0.
    pub base: usize,
    pub capacity: usize,
    /// Shared-RAM offset of this ring's producer index; the consumer index follows.
    pub index_at: usize,
}

impl FifoHandle {
    pub fn slot_offset(&self, index: u64) -> usize {
        self.base + (index % self.capacity as u64) as usize * FRAME_SIZE
    }

    pub fn producer_at(&self) -> usize {
        self.index_at
    }

    pub fn consumer_at(&self) -> usize {
        self.index_at + 8
    }
}

/// The pair of rings plus the header page backing one session.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FifoPair {
    pub region_start: usize,
    pub pages: usize,
    pub to_ssv: FifoHandle,
    pub from_ssv: FifoHandle,
}

impl FifoPair {
    pub fn header_page(&self) -> usize {
        self.region_start + (self.pages - 1) * PAGE
    }

    pub fn pages_for(capacity: usize) -> usize {
        2 * capacity + 1
    }
}

/// Page allocator for shared RAM, run by the untrusted kernel module.
#[derive(Clone, Debug)]
pub struct SharedAllocator {
    used: Vec<bool>,
}

impl SharedAllocator {
    pub fn new(shared_size: usize) -> Self {
        SharedAllocator { used: vec![false; shared_size / PAGE] }
    }

    /// First-fit contiguous run of `pages` pages.
    pub fn alloc(&mut self, pages: usize) -> Option<usize> {
        if pages == 0 || pages > self.used.len() {
            return None;
        }
        let mut start = 0;
        while start + pages <= self.used.len() {
            match self.used[start..start + pages].iter().rposition(|u| *u) {
                Some(k) => start += k + 1,
                None => {
                    self.used[start..start + pages].iter_mut().for_each(|u| *u = true);
                    return Some(start * PAGE);
                }
            }
        }
        None
    }

    pub fn free(&mut self, offset: usize, pages: usize) {
        let first = offset / PAGE;
        for u in self.used.iter_mut().skip(first).take(pages) {
            *u = false;
        }
    }

    pub fn free_pages(&self) -> usize {
        self.used.iter().filter(|u| !**u).count()
    }

    pub fn alloc_pair(&mut self, capacity: usize) -> Option<FifoPair> {
        let pages = FifoPair::pages_for(capacity);
        let start = self.alloc(pages)?;
        let header = start + (pages - 1) * PAGE;
        Some(FifoPair {
            region_start: start,
            pages,
            to_ssv: FifoHandle { base: start, capacity, index_at: header },
            from_ssv: FifoHandle { base: start + capacity * FRAME_SIZE, capacity, index_at: header + 16 },
        })
    }

    pub fn free_pair(&mut self, pair: &FifoPair) {
        self.free(pair.region_start, pair.pages);
    }
}

fn read_u64(p: &mut Platform, actor: Actor, at: usize) -> Result<u64, ChannelError> {
    let b = p.read(actor, DomainKind::SharedRam, at, 8)?;
    Ok(u64::from_be_bytes(b.try_into().unwrap()))
}

fn write_u64(p: &mut Platform, actor: Actor, at: usize, v: u64) -> Result<(), ChannelError> {
    p.write(actor, DomainKind::SharedRam, at, &v.to_be_bytes())?;
    Ok(())
}

pub fn indices(p: &mut Platform, actor: Actor, f: &FifoHandle) -> Result<(u64, u64), ChannelError> {
    Ok((read_u64(p, actor, f.producer_at())?, read_u64(p, actor, f.consumer_at())?))
}

/// Frames currently queued, as seen through the shared indices.
pub fn len(p: &mut Platform, actor: Actor, f: &FifoHandle) -> Result<usize, ChannelError> {
    let (prod, cons) = indices(p, actor, f)?;
    Ok(prod.saturating_sub(cons) as usize)
}

pub fn enqueue(p: &mut Platform, actor: Actor, f: &FifoHandle, frame: &SealedFrame) -> Result<(), ChannelError> {
    let (prod, cons) = indices(p, actor, f)?;
    if prod.wrapping_sub(cons) >= f.capacity as u64 {
        return Err(ChannelError::FifoFull);
    }
    p.write(actor, DomainKind::SharedRam, f.slot_offset(prod), frame.as_bytes())?;
    write_u64(p, actor, f.producer_at(), prod + 1)
}

pub fn dequeue(p: &mut Platform, actor: Actor, f: &FifoHandle) -> Result<Option<SealedFrame>, ChannelError> {
    let (prod, cons) = indices(p, actor, f)?;
    if prod <= cons {
        return Ok(None);
    }
    // A producer index more than a ring ahead can only come from tampering;
    // clamp so the consumer never reads past what the ring can hold.
    let cons = cons.max(prod.saturating_sub(f.capacity as u64));
    let bytes = p.read(actor, DomainKind::SharedRam, f.slot_offset(cons), FRAME_SIZE)?;
    write_u64(p, actor, f.consumer_at(), cons + 1)?;
    Ok(Some(SealedFrame::from_bytes(&bytes)?))
}

/// Zero both indices (session reset).
pub fn reset(p: &mut Platform, actor: Actor, f: &FifoHandle) -> Result<(), ChannelError> {
    write_u64(p, actor, f.producer_at(), 0)?;
    write_u64(p, actor, f.consumer_at(), 0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::platform::PlatformConfig;

    fn numbered(n: u32) -> SealedFrame {
        let mut b = [0u8; FRAME_SIZE];
        b[..4].copy_from_slice(&n.to_be_bytes());
        b[FRAME_SIZE - 1] = 0xaa;
        SealedFrame(Box::new(b))
    }

    fn setup() -> (Platform, FifoPair) {
        let p = Platform::new(PlatformConfig::default());
        let mut a = SharedAllocator::new(p.config().shared_size);
        let pair = a.alloc_pair(DEFAULT_CAPACITY).unwrap();
        (p, pair)
    }

    #[test]
    fn allocator_fits_three_sessions_in_one_mib() {
        let mut a = SharedAllocator::new(1 << 20);
        let pairs: Vec<_> = (0..3).map(|_| a.alloc_pair(32).unwrap()).collect();
        assert!(a.alloc_pair(32).is_none());
        assert!(pairs.iter().all(|p| p.region_start % PAGE == 0));
        a.free_pair(&pairs[1]);
        assert_eq!(a.alloc_pair(32).unwrap().region_start, pairs[1].region_start);
    }

    #[test]
    fn enqueue_dequeue_identity() {
        let (mut p, pair) = setup();
        let f = numbered(42);
        enqueue(&mut p, Actor::Os, &pair.to_ssv, &f).unwrap();
        assert_eq!(dequeue(&mut p, Actor::Os, &pair.to_ssv).unwrap(), Some(f));
        assert_eq!(dequeue(&mut p, Actor::Os, &pair.to_ssv).unwrap(), None);
    }

    #[test]
    fn capacity_bound() {
        let (mut p, pair) = setup();
        for i in 0..32 {
            enqueue(&mut p, Actor::Os, &pair.to_ssv, &numbered(i)).unwrap();
        }
        assert_eq!(enqueue(&mut p, Actor::Os, &pair.to_ssv, &numbered(32)), Err(ChannelError::FifoFull));
    }

    #[test]
    fn order_preserved_over_interleaving() {
        let (mut p, pair) = setup();
        let mut next_in = 0u32;
        let mut next_out = 0u32;
        let mut step = 0u32;
        while next_out < 1000 {
            step += 1;
            let burst = step % 5;
            for _ in 0..burst {
                if next_in < 1000 && enqueue(&mut p, Actor::Os, &pair.from_ssv, &numbered(next_in)).is_ok() {
                    next_in += 1;
                }
            }
            for _ in 0..(step % 3 + 1) {
                if let Some(f) = dequeue(&mut p, Actor::Os, &pair.from_ssv).unwrap() {
                    assert_eq!(f, numbered(next_out));
                    next_out += 1;
                }
            }
        }
    }
}

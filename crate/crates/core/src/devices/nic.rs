//! A descriptor-ring network adapter.
//!
//! Loosely modelled on a PCnet-class adapter: TX and RX rings of descriptors
//! mediated by an OWN bit, a device-side TX ring counter register, a
//! promiscuous flag and an interrupt enable. Register layout is abstract.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Largest Ethernet frame accepted by the adapter.
pub const MAX_FRAME: usize = 1518;

pub const STATUS_RINT: u16 = 0x0400;
pub const STATUS_TINT: u16 = 0x0200;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum NicError {
    #[error("frame of {0} bytes exceeds the {MAX_FRAME}-byte limit")]
    FrameTooLarge(usize),
    #[error("no host-owned TX descriptor available")]
    RingFull,
    #[error("descriptor at the device ring counter is busy")]
    Busy,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Own {
    Device,
    Host,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Descriptor {
    pub own: Own,
    pub len: usize,
    pub buffer: Vec<u8>,
}

#[derive(Clone, Debug)]
pub struct DescriptorRing {
    pub slots: Vec<Descriptor>,
    /// Software-side producer (TX) or device-side write (RX) position.
    pub head: usize,
}

impl DescriptorRing {
    fn new(len: usize, own: Own) -> Self {
        DescriptorRing {
            slots: (0..len).map(|_| Descriptor { own, len: 0, buffer: Vec::new() }).collect(),
            head: 0,
        }
    }

    pub fn ring_len(&self) -> usize {
        self.slots.len()
    }

    fn count(&self, own: Own) -> usize {
        self.slots.iter().filter(|d| d.own == own).count()
    }
}

/// Control registers saved and restored around supervisor writes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NicRegs {
    /// Next TX descriptor the device will poll.
    pub tx_counter: u16,
    pub promiscuous: bool,
    pub interrupt_enable: bool,
    pub suspended: bool,
}

impl NicRegs {
    pub fn to_bytes(self) -> [u8; 5] {
        let c = self.tx_counter.to_be_bytes();
        [c[0], c[1], self.promiscuous as u8, self.interrupt_enable as u8, self.suspended as u8]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NicConfig {
    pub ring_len: usize,
    pub mmio_base: u64,
    pub vector: u8,
    pub mac: [u8; 6],
    pub present: bool,
}

impl Default for NicConfig {
    fn default() -> Self {
        NicConfig {
            ring_len: 16,
            mmio_base: 0xfebf_0000,
            vector: 0x2b,
            mac: [0x02, 0x00, 0x5e, 0x00, 0x00, 0x01],
            present: true,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct NicStats {
    pub tx_frames: u64,
    pub rx_frames: u64,
    pub rx_dropped: u64,
}

#[derive(Clone, Debug)]
pub struct Nic {
    pub config: NicConfig,
    pub tx: DescriptorRing,
    pub rx: DescriptorRing,
    pub regs: NicRegs,
    /// Interrupt status bits (not part of the saved context).
    pub status: u16,
    /// When set the device stops draining its TX ring.
    pub tx_paused: bool,
    /// Interrupt raised while masked, fired when unmasked.
    irq_latched: bool,
    pub stats: NicStats,
}

impl Nic {
    pub fn new(config: NicConfig) -> Self {
        let len = config.ring_len.max(2);
        Nic {
            tx: DescriptorRing::new(len, Own::Host),
            rx: DescriptorRing::new(len, Own::Device),
            regs: NicRegs { tx_counter: 0, promiscuous: false, interrupt_enable: true, suspended: false },
            status: 0,
            tx_paused: false,
            irq_latched: false,
            stats: NicStats::default(),
            config,
        }
    }

    pub fn context(&self) -> NicRegs {
        self.regs
    }

    /// Software enqueue at the host producer index.
    pub fn tx(&mut self, frame: &[u8]) -> Result<usize, NicError> {
        if frame.len() > MAX_FRAME {
            return Err(NicError::FrameTooLarge(frame.len()));
        }
        // One slot stays empty so a full ring is distinguishable from an empty one.
        if self.tx.count(Own::Device) >= self.tx.ring_len() - 1 {
            return Err(NicError::RingFull);
        }
        let idx = self.tx.head;
        let slot = &mut self.tx.slots[idx];
        if slot.own != Own::Host {
            return Err(NicError::RingFull);
        }
        slot.buffer = frame.to_vec();
        slot.len = frame.len();
        slot.own = Own::Device;
        self.tx.head = (idx + 1) % self.tx.ring_len();
        Ok(idx)
    }

    /// Place a frame directly at the device ring counter (supervisor path).
    pub fn tx_at_counter(&mut self, frame: &[u8]) -> Result<usize, NicError> {
        if frame.len() > MAX_FRAME {
            return Err(NicError::FrameTooLarge(frame.len()));
        }
        let idx = usize::from(self.regs.tx_counter) % self.tx.ring_len();
        let slot = &mut self.tx.slots[idx];
        if slot.own != Own::Host {
            return Err(NicError::Busy);
        }
        slot.buffer = frame.to_vec();
        slot.len = frame.len();
        slot.own = Own::Device;
        Ok(idx)
    }

    /// Device side: send every device-owned descriptor from the ring counter on.
    pub fn transmit_pending(&mut self) -> Vec<Vec<u8>> {
        let mut out = Vec::new();
        if self.regs.suspended || self.tx_paused {
            return out;
        }
        let len = self.tx.ring_len();
        loop {
            let idx = usize::from(self.regs.tx_counter) % len;
            let slot = &mut self.tx.slots[idx];
            if slot.own != Own::Device {
                break;
            }
            out.push(std::mem::take(&mut slot.buffer));
            slot.len = 0;
            slot.own = Own::Host;
            self.regs.tx_counter = ((idx + 1) % len) as u16;
        }
        if !out.is_empty() {
            self.stats.tx_frames += out.len() as u64;
            self.status |= STATUS_TINT;
        }
        out
    }

    /// Device side: write a frame arriving from the fabric into the RX ring.
    pub fn deliver(&mut self, frame: &[u8]) -> bool {
        let idx = self.rx.head;
        let len = self.rx.ring_len();
        let slot = &mut self.rx.slots[idx];
        if slot.own != Own::Device || frame.len() > MAX_FRAME {
            self.stats.rx_dropped += 1;
            return false;
        }
        slot.buffer = frame.to_vec();
        slot.len = frame.len();
        slot.own = Own::Host;
        self.rx.head = (idx + 1) % len;
        self.stats.rx_frames += 1;
        self.status |= STATUS_RINT;
        true
    }

    /// Host-owned RX slots, oldest first. Does not consume them.
    pub fn rx_scan(&self) -> Vec<(usize, Vec<u8>)> {
        let len = self.rx.ring_len();
        (0..len)
            .map(|k| (self.rx.head + k) % len)
            .filter(|&i| self.rx.slots[i].own == Own::Host)
            .map(|i| (i, self.rx.slots[i].buffer.clone()))
            .collect()
    }

    /// Return an RX slot to the device.
    pub fn rx_consume(&mut self, slot: usize) -> Option<Vec<u8>> {
        let d = self.rx.slots.get_mut(slot)?;
        if d.own != Own::Host {
            return None;
        }
        d.own = Own::Device;
        d.len = 0;
        Some(std::mem::take(&mut d.buffer))
    }

    /// Record an interrupt condition; returns true when the line should fire now.
    pub fn signal(&mut self) -> bool {
        if self.regs.interrupt_enable {
            true
        } else {
            self.irq_latched = true;
            false
        }
    }

    /// Restore saved control registers; returns true if a latched interrupt fires.
    pub fn restore(&mut self, regs: NicRegs) -> bool {
        self.regs = regs;
        if self.regs.interrupt_enable && self.irq_latched {
            self.irq_latched = false;
            return true;
        }
        false
    }

    pub fn ack(&mut self, bits: u16) {
        self.status &= !bits;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn oversize_frame_rejected() {
        let mut nic = Nic::new(NicConfig::default());
        assert_eq!(nic.tx(&[0u8; 1519]), Err(NicError::FrameTooLarge(1519)));
        assert!(nic.tx(&[0u8; 1518]).is_ok());
    }

    #[test]
    fn undrained_ring_fills_at_ring_len() {
        let mut nic = Nic::new(NicConfig::default());
        nic.tx_paused = true;
        // Count the usable slots independently: ring_len minus the guard slot.
        let usable = nic.tx.ring_len() - 1;
        for i in 0..usable {
            assert!(nic.tx(&[i as u8; 64]).is_ok(), "call {}", i + 1);
        }
        assert_eq!(nic.tx(&[0; 64]), Err(NicError::RingFull));
        assert_eq!(usable + 1, 16);
    }

    #[test]
    fn transmit_flips_own_back() {
        let mut nic = Nic::new(NicConfig::default());
        nic.tx(&[7; 60]).unwrap();
        let sent = nic.transmit_pending();
        assert_eq!(sent, vec![vec![7; 60]]);
        assert!(nic.tx.slots.iter().all(|d| d.own == Own::Host));
        assert_eq!(nic.regs.tx_counter, 1);
    }

    #[test]
    fn rx_scan_returns_in_arrival_order_and_consume_hides() {
        let mut nic = Nic::new(NicConfig::default());
        assert!(nic.rx_scan().is_empty());
        nic.deliver(&[1; 60]);
        nic.deliver(&[2; 60]);
        let scan = nic.rx_scan();
        assert_eq!(scan, vec![(0, vec![1; 60]), (1, vec![2; 60])]);
        nic.rx_consume(0);
        assert_eq!(nic.rx_scan(), vec![(1, vec![2; 60])]);
    }

    #[test]
    fn full_rx_ring_drops() {
        let mut nic = Nic::new(NicConfig { ring_len: 2, ..NicConfig::default() });
        assert!(nic.deliver(&[1]));
        assert!(nic.deliver(&[2]));
        assert!(!nic.deliver(&[3]));
        assert_eq!(nic.stats.rx_dropped, 1);
    }
}

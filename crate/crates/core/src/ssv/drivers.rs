//! SMM drivers. Each exposes exactly probe, read and write.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::flow::{self, FlowEntry, FlowTable};
use super::heap::{HeapError, SecureHeap};
use crate::channel::frame::Status;
use crate::channel::Epid;
use crate::devices::{ClockSource, DeviceId, NicRegs, RawReading, MAX_FRAME};
use crate::platform::{Actor, DomainKind, Platform};

/// SMRAM offset of the device-context snapshot area.
pub const SNAPSHOT_OFFSET: usize = 0x8000;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DriverError {
    #[error("operation not supported by this driver")]
    Unsupported,
    #[error("device missing or failed: {0}")]
    Device(String),
    #[error("policy violation: {0}")]
    Policy(String),
    #[error("flow tag or address already registered")]
    TagCollision,
    #[error(transparent)]
    Heap(#[from] HeapError),
}

impl DriverError {
    pub fn status(&self) -> Status {
        match self {
            DriverError::Unsupported => Status::OperationUnsupported,
            DriverError::Device(_) | DriverError::Heap(_) => Status::DriverError,
            DriverError::Policy(_) => Status::PolicyViolation,
            DriverError::TagCollision => Status::TagCollision,
        }
    }
}

/// What a driver may touch while servicing one request.
pub struct DriverCx<'a> {
    pub p: &'a mut Platform,
    pub heap: &'a mut SecureHeap,
    pub flows: &'a mut FlowTable,
    pub session: u32,
    pub epid: Epid,
    pub req: Option<(u32, u64)>,
    /// Device registers that differed after a restore.
    pub context_mismatches: &'a mut Vec<String>,
}

pub trait Driver {
    fn device(&self) -> DeviceId;
    fn probe(&mut self, cx: &mut DriverCx<'_>, payload: &[u8]) -> Result<Vec<u8>, DriverError>;
    fn read(&mut self, cx: &mut DriverCx<'_>, payload: &[u8]) -> Result<Vec<u8>, DriverError>;
    fn write(&mut self, cx: &mut DriverCx<'_>, payload: &[u8]) -> Result<Vec<u8>, DriverError>;
    /// Label of the service step in workflow traces.
    fn service_label(&self) -> &'static str;
}

/// One coherent read of all clock sources, as carried in a clock reply.
///
/// Layout: `present u8 | rtc_reads u8 | 5 x (value u64, tsc_at_latch u64)`.
/// The RTC value is Unix seconds; PIT and APIC values are raw down-counts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClockSnapshot {
    pub present: u8,
    pub rtc_reads: u8,
    pub values: [u64; 5],
    pub tsc_at_latch: [u64; 5],
}

pub const CLOCK_SNAPSHOT_LEN: usize = 2 + 5 * 16;

impl ClockSnapshot {
    pub fn has(&self, s: ClockSource) -> bool {
        self.present & (1 << s.index()) != 0
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(CLOCK_SNAPSHOT_LEN);
        out.push(self.present);
        out.push(self.rtc_reads);
        for i in 0..5 {
            out.extend_from_slice(&self.values[i].to_be_bytes());
            out.extend_from_slice(&self.tsc_at_latch[i].to_be_bytes());
        }
        out
    }

    pub fn decode(b: &[u8]) -> Option<Self> {
        if b.len() != CLOCK_SNAPSHOT_LEN {
            return None;
        }
        let mut s = ClockSnapshot { present: b[0], rtc_reads: b[1], ..Default::default() };
        for i in 0..5 {
            let at = 2 + i * 16;
            s.values[i] = u64::from_be_bytes(b[at..at + 8].try_into().ok()?);
            s.tsc_at_latch[i] = u64::from_be_bytes(b[at + 8..at + 16].try_into().ok()?);
        }
        Some(s)
    }
}

#[derive(Debug, Default)]
pub struct ClockDriver;

impl ClockDriver {
    fn present_mask(p: &Platform) -> u8 {
        ClockSource::ALL.iter().filter(|s| p.clocks.is_present(**s)).fold(0, |m, s| m | 1 << s.index())
    }
}

impl Driver for ClockDriver {
    fn device(&self) -> DeviceId {
        DeviceId::Clock
    }

    fn service_label(&self) -> &'static str {
        "Clock Service"
    }

    fn probe(&mut self, cx: &mut DriverCx<'_>, _payload: &[u8]) -> Result<Vec<u8>, DriverError> {
        Ok(vec![Self::present_mask(cx.p)])
    }

    fn read(&mut self, cx: &mut DriverCx<'_>, _payload: &[u8]) -> Result<Vec<u8>, DriverError> {
        let base = cx.p.costs().clock_driver_base;
        cx.p.advance(base);
        let mut snap = ClockSnapshot { present: Self::present_mask(cx.p), ..Default::default() };
        for source in ClockSource::ALL {
            let read = cx.p.read_clock(Actor::Ssv, source).map_err(|f| DriverError::Device(f.to_string()))?;
            let Some(read) = read else { continue };
            let i = source.index();
            snap.values[i] = match read.reading {
                RawReading::Rtc(t) => t.to_unix() as u64,
                RawReading::Hpet(v) | RawReading::Tsc(v) => v,
                RawReading::Pit(v) => u64::from(v),
                RawReading::Apic(v) => u64::from(v),
            };
            // The TSC is sampled alongside every latch; a missing TSC leaves zeros.
            if cx.p.clocks.is_present(ClockSource::Tsc) {
                if let RawReading::Tsc(t) = cx.p.clocks.raw(ClockSource::Tsc, read.latched_at) {
                    snap.tsc_at_latch[i] = t;
                }
            }
            if source == ClockSource::Rtc {
                snap.rtc_reads = read.reads as u8;
            }
        }
        let block = cx.heap.alloc(CLOCK_SNAPSHOT_LEN)?;
        cx.heap.write(cx.p, block, 0, &snap.encode())?;
        Ok(cx.heap.read(cx.p, block, 0, CLOCK_SNAPSHOT_LEN)?)
    }

    fn write(&mut self, _cx: &mut DriverCx<'_>, _payload: &[u8]) -> Result<Vec<u8>, DriverError> {
        Err(DriverError::Unsupported)
    }
}

#[derive(Debug, Default)]
pub struct NicDriver {
    pub adapter: usize,
    pub transmitted: u64,
    pub spoof_drops: u64,
    pub rewrites: u64,
}

impl NicDriver {
    pub fn new(adapter: usize) -> Self {
        NicDriver { adapter, ..Default::default() }
    }

    fn snapshot(cx: &mut DriverCx<'_>, regs: NicRegs, slot: usize) {
        let at = SNAPSHOT_OFFSET + slot * 8;
        cx.p.write(Actor::Ssv, DomainKind::Smram, at, &regs.to_bytes()).expect("snapshot area in SMRAM");
    }
}

impl Driver for NicDriver {
    fn device(&self) -> DeviceId {
        DeviceId::Nic
    }

    fn service_label(&self) -> &'static str {
        "Network Service"
    }

    /// Empty payload: report presence. `tag ‖ ipv4` payload: register the
    /// caller's flow.
    fn probe(&mut self, cx: &mut DriverCx<'_>, payload: &[u8]) -> Result<Vec<u8>, DriverError> {
        let present = cx.p.nics.get(self.adapter).is_some_and(|n| n.config.present);
        if !present {
            return Err(DriverError::Device("adapter absent".into()));
        }
        if payload.len() == 8 {
            let tag: flow::FlowTag = payload[..4].try_into().unwrap();
            let ip: [u8; 4] = payload[4..].try_into().unwrap();
            if tag != flow::tag_for(&cx.epid) {
                return Err(DriverError::Policy("tag does not match identity".into()));
            }
            cx.flows
                .insert(cx.epid, FlowEntry { session: cx.session, tag, ip })
                .map_err(|_| DriverError::TagCollision)?;
        }
        Ok(cx.p.nics[self.adapter].config.mac.to_vec())
    }

    fn read(&mut self, _cx: &mut DriverCx<'_>, _payload: &[u8]) -> Result<Vec<u8>, DriverError> {
        // Inbound frames are pushed as events; a read has nothing to return.
        Ok(Vec::new())
    }

    fn write(&mut self, cx: &mut DriverCx<'_>, payload: &[u8]) -> Result<Vec<u8>, DriverError> {
        if payload.is_empty() || payload.len() > MAX_FRAME {
            return Err(DriverError::Device(format!("frame length {}", payload.len())));
        }
        let own = cx.flows.get(&cx.epid).copied();
        let mut frame = payload.to_vec();
        if flow::ethertype(&frame) == Some(flow::ETHERTYPE_IPV4) {
            let Some(own) = own else {
                return Err(DriverError::Policy("no registered flow".into()));
            };
            if flow::ipv4_tag(&frame) != Some(own.tag) {
                self.spoof_drops += 1;
                cx.p.log("ssv", format!("session {} egress tag mismatch, dropped", cx.session));
                return Err(DriverError::Policy("egress tag mismatch".into()));
            }
            if let Some(local) = flow::ipv4_dst(&frame).and_then(|ip| cx.flows.by_ip(&ip)).copied() {
                if local.tag != own.tag && flow::rewrite_tag(&mut frame, local.tag) {
                    self.rewrites += 1;
                }
            }
        }
        let block = cx.heap.alloc(frame.len())?;
        cx.heap.write(cx.p, block, 0, &frame)?;
        let dma = cx.heap.read(cx.p, block, 0, frame.len())?;

        let costs = cx.p.costs().clone();
        let idx = self.adapter;
        // Suspend, save context, mask interrupts.
        let saved = cx.p.nics[idx].context();
        Self::snapshot(cx, saved, idx);
        cx.p.advance(costs.nic_context_save_restore);
        cx.p.nics[idx].regs.suspended = true;
        cx.p.nics[idx].regs.interrupt_enable = false;
        let placed = cx.p.nics[idx].tx_at_counter(&dma);
        if placed.is_ok() {
            cx.p.nics[idx].regs.suspended = false;
            cx.p.advance(costs.nic_transmit + costs.nic_per_byte * dma.len() as u64);
            cx.p.nic_kick(idx);
        }
        // Restore the saved context; a latched interrupt fires here.
        cx.p.nic_restore(idx, saved);
        if cx.p.nics[idx].context() != saved {
            cx.context_mismatches.push(format!("nic{idx} registers differ after restore"));
        }
        placed.map_err(|e| DriverError::Device(e.to_string()))?;
        self.transmitted += 1;
        Ok(Vec::new())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn snapshot_codec_round_trip() {
        let s = ClockSnapshot { present: 0x1f, rtc_reads: 2, values: [1, 2, 3, 4, 5], tsc_at_latch: [6, 7, 8, 9, 10] };
        let b = s.encode();
        assert_eq!(b.len(), CLOCK_SNAPSHOT_LEN);
        assert_eq!(ClockSnapshot::decode(&b), Some(s));
        assert!(s.has(ClockSource::ApicTimer));
    }
}

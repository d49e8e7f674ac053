//! The SMM supervisor: SMI dispatch, the driver registry, the secure heap
//! and per-enclave flow multiplexing.
//!
//! SMRAM layout (offsets):
//!
//! ```text
//! 0x0000  CPU save-state area
//! 0x1000  secrets scratch, 3 pages (sealed in, plaintext, sealed out)
//! 0x4000  key table, 64-byte slots
//! 0x8000  device-context snapshots
//! 0x10000 secure heap arena, 64 KiB
//! ```

pub mod drivers;
pub mod flow;
pub mod heap;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::channel::fifo::{self, FifoPair};
use crate::channel::frame::{
    self, Direction, Operation, PlainFrame, SealedFrame, SessionKey, Status, FRAME_SIZE, HEADER_LEN, KEY_LEN,
    PLAIN_SIZE, STATUS_EVENT,
};
use crate::channel::{measure, ChannelError, Epid, SsvToken};
use crate::devices::nic::STATUS_RINT;
use crate::devices::DeviceId;
use crate::platform::{Actor, DomainKind, EnclaveId, Platform, SmiSource, Target, Vector};

use drivers::{ClockDriver, Driver, DriverCx, DriverError, NicDriver};
use flow::FlowTable;
use heap::SecureHeap;

pub const SCRATCH_OFFSET: usize = 0x1000;
pub const SCRATCH_LEN: usize = 3 * 4096;
pub const KEY_TABLE_OFFSET: usize = 0x4000;
pub const KEY_SLOT_LEN: usize = 64;
pub const MAX_SESSIONS: usize = (drivers::SNAPSHOT_OFFSET - KEY_TABLE_OFFSET) / KEY_SLOT_LEN;
pub const HEAP_OFFSET: usize = 0x10000;
pub const HEAP_LEN: usize = 0x10000;

/// Image measured by the certificate authority.
pub const GENUINE_IMAGE: &[u8] = b"aurora smm supervisor image v1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DropReason {
    AuthFail,
    ReplayOrReorder,
    SessionMismatch,
    Malformed,
    FifoFull,
    FlowSpoof,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SsvStats {
    pub dispatches: u64,
    pub requests: u64,
    pub opened: u64,
    pub sealed: u64,
    pub events: u64,
    pub error_replies: u64,
    pub forwarded_to_os: u64,
    pub dropped: BTreeMap<DropReason, u64>,
}

impl SsvStats {
    pub fn drops(&self, r: DropReason) -> u64 {
        self.dropped.get(&r).copied().unwrap_or(0)
    }

    pub fn total_dropped(&self) -> u64 {
        self.dropped.values().sum()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HygieneViolation {
    pub smi: u64,
    pub detail: String,
}

#[derive(Clone, Debug)]
pub struct SsvSession {
    pub id: u32,
    pub enclave: EnclaveId,
    pub epid: Epid,
    pub fifos: FifoPair,
    pub key_slot: usize,
    /// Next sequence expected from the enclave.
    pub rx_seq: u64,
    /// Next sequence the supervisor sends.
    pub tx_seq: u64,
    pub notify_vector: Vector,
}

pub struct Ssv {
    image: Vec<u8>,
    sessions: BTreeMap<u32, SsvSession>,
    pub flows: FlowTable,
    pub heap: SecureHeap,
    clock: ClockDriver,
    nic: NicDriver,
    next_session: u32,
    pub stats: SsvStats,
    pub hygiene: Vec<HygieneViolation>,
    /// Plaintext frames observed in SMRAM, kept when auditing is on.
    pub audit: Option<Vec<Vec<u8>>>,
    /// SMI ordinal that served each `(session, request seq)`.
    pub served: BTreeMap<(u32, u64), u64>,
    managed_vector: Option<Vector>,
}

impl Ssv {
    pub fn new(image: &[u8]) -> Self {
        Ssv {
            image: image.to_vec(),
            sessions: BTreeMap::new(),
            flows: FlowTable::default(),
            heap: SecureHeap::new(HEAP_OFFSET, HEAP_LEN),
            clock: ClockDriver,
            nic: NicDriver::new(0),
            next_session: 1,
            stats: SsvStats::default(),
            hygiene: Vec::new(),
            audit: None,
            served: BTreeMap::new(),
            managed_vector: None,
        }
    }

    /// Measurement of the running image, presented to the CA.
    pub fn token(&self) -> SsvToken {
        measure(&self.image)
    }

    pub fn sessions(&self) -> impl Iterator<Item = &SsvSession> {
        self.sessions.values()
    }

    pub fn session(&self, id: u32) -> Option<&SsvSession> {
        self.sessions.get(&id)
    }

    pub fn nic_driver(&self) -> &NicDriver {
        &self.nic
    }

    fn drop(&mut self, p: &mut Platform, reason: DropReason, detail: String) {
        *self.stats.dropped.entry(reason).or_default() += 1;
        p.log("ssv", format!("drop {reason:?}: {detail}"));
    }

    fn key_at(slot: usize) -> usize {
        KEY_TABLE_OFFSET + slot * KEY_SLOT_LEN + 32
    }

    fn load_key(p: &mut Platform, slot: usize) -> SessionKey {
        let b = p.read(Actor::Ssv, DomainKind::Smram, Self::key_at(slot), KEY_LEN).expect("key table in SMRAM");
        b.try_into().unwrap()
    }

    fn free_key_slot(&self) -> Option<usize> {
        let used: BTreeSet<usize> = self.sessions.values().map(|s| s.key_slot).collect();
        (0..MAX_SESSIONS).find(|i| !used.contains(i))
    }

    /// Install a session whose key arrived over the out-of-band channel.
    /// Must run in SMM.
    pub fn install(
        &mut self,
        p: &mut Platform,
        enclave: EnclaveId,
        epid: Epid,
        key: &SessionKey,
        fifos: FifoPair,
    ) -> Result<u32, ChannelError> {
        let slot = self.free_key_slot().ok_or(ChannelError::SharedMemUnavailable)?;
        let id = self.next_session;
        self.next_session += 1;
        let at = KEY_TABLE_OFFSET + slot * KEY_SLOT_LEN;
        p.write(Actor::Ssv, DomainKind::Smram, at, &id.to_be_bytes())?;
        p.write(Actor::Ssv, DomainKind::Smram, Self::key_at(slot), key)?;
        let notify_vector = crate::platform::NOTIFY_VECTOR_BASE.wrapping_add(slot as u8);
        p.route(notify_vector, Target::EnclaveNotify(enclave));
        if self.sessions.is_empty() {
            if let Some(nic) = p.nics.get(self.nic.adapter) {
                let v = nic.config.vector;
                p.route(v, Target::Ssv);
                self.managed_vector = Some(v);
            }
        }
        self.sessions.insert(id, SsvSession { id, enclave, epid, fifos, key_slot: slot, rx_seq: 0, tx_seq: 0, notify_vector });
        p.log("ssv", format!("session {id} installed for enclave {enclave}"));
        Ok(id)
    }

    /// Replace a session key and zero its counters. Must run in SMM.
    pub fn rekey(&mut self, p: &mut Platform, id: u32, key: &SessionKey) -> Result<(), ChannelError> {
        let s = self.sessions.get_mut(&id).ok_or(ChannelError::Closed)?;
        s.rx_seq = 0;
        s.tx_seq = 0;
        let slot = s.key_slot;
        p.write(Actor::Ssv, DomainKind::Smram, Self::key_at(slot), key)?;
        Ok(())
    }

    /// Zeroize and forget a session. Must run in SMM. Returns its FIFOs.
    pub fn remove(&mut self, p: &mut Platform, id: u32) -> Option<FifoPair> {
        let s = self.sessions.remove(&id)?;
        let at = KEY_TABLE_OFFSET + s.key_slot * KEY_SLOT_LEN;
        p.write(Actor::Ssv, DomainKind::Smram, at, &[0u8; KEY_SLOT_LEN]).expect("key table in SMRAM");
        self.flows.remove(&s.epid);
        p.unroute(s.notify_vector);
        if self.sessions.is_empty() {
            if let Some(v) = self.managed_vector.take() {
                p.route(v, Target::Os);
            }
        }
        p.log("ssv", format!("session {id} removed"));
        Some(s.fifos)
    }

    /// Service the SMI the platform is currently handling.
    pub fn dispatch(&mut self, p: &mut Platform) {
        assert!(p.mode().is_smm(), "dispatch outside SMM");
        self.stats.dispatches += 1;
        let before: Vec<_> = p.nics.iter().map(|n| n.context()).collect();
        let mut mismatches = Vec::new();
        match p.smi_source() {
            Some(SmiSource::Device(v)) if Some(v) == self.managed_vector => self.service_rx(p),
            Some(SmiSource::Device(v)) => {
                self.stats.forwarded_to_os += 1;
                p.forward_to_os(v);
            }
            _ => self.service_requests(p, &mut mismatches),
        }
        self.finish(p, &before, mismatches);
    }

    /// Scrub scratch, free the heap, then check the post-dispatch invariants.
    fn finish(&mut self, p: &mut Platform, before: &[crate::devices::NicRegs], mismatches: Vec<String>) {
        p.write(Actor::Ssv, DomainKind::Smram, SCRATCH_OFFSET, &[0u8; SCRATCH_LEN]).expect("scratch in SMRAM");
        self.heap.reset();
        let smi = p.counters.smis;
        let mut bad: Vec<String> = mismatches;
        if !self.heap.live().is_empty() {
            bad.push("secure heap not empty".into());
        }
        let scratch = p.read(Actor::Ssv, DomainKind::Smram, SCRATCH_OFFSET, SCRATCH_LEN).expect("scratch");
        if scratch.iter().any(|b| *b != 0) {
            bad.push("secrets scratch not zeroed".into());
        }
        for (i, regs) in before.iter().enumerate() {
            if p.nics[i].context() != *regs {
                bad.push(format!("nic{i} registers changed across dispatch"));
            }
        }
        for detail in bad {
            p.log("ssv", format!("hygiene violation: {detail}"));
            self.hygiene.push(HygieneViolation { smi, detail });
        }
    }

    fn record_plain(&mut self, block: &[u8; PLAIN_SIZE]) {
        if let Some(audit) = self.audit.as_mut() {
            let len = usize::from(u16::from_be_bytes([block[15], block[16]]));
            audit.push(block[..HEADER_LEN + len.min(PLAIN_SIZE - HEADER_LEN)].to_vec());
        }
    }

    fn service_requests(&mut self, p: &mut Platform, mismatches: &mut Vec<String>) {
        let ids: Vec<u32> = self.sessions.keys().copied().collect();
        for id in ids {
            loop {
                let Some(s) = self.sessions.get(&id) else { break };
                let to_ssv = s.fifos.to_ssv;
                let sealed = match fifo::dequeue(p, Actor::Ssv, &to_ssv) {
                    Ok(Some(f)) => f,
                    Ok(None) => break,
                    Err(e) => {
                        self.drop(p, DropReason::Malformed, format!("session {id}: {e}"));
                        break;
                    }
                };
                self.service_one(p, id, sealed, mismatches);
            }
        }
    }

    fn service_one(&mut self, p: &mut Platform, id: u32, sealed: SealedFrame, mismatches: &mut Vec<String>) {
        let s = self.sessions[&id].clone();
        let costs = p.costs().clone();
        let copy_step = p.charge("Copy to SMRAM", costs.copy_to_smram, None);
        p.write(Actor::Ssv, DomainKind::Smram, SCRATCH_OFFSET, sealed.as_bytes()).expect("scratch");
        let in_smram = SealedFrame::from_bytes(&p.read(Actor::Ssv, DomainKind::Smram, SCRATCH_OFFSET, FRAME_SIZE).expect("scratch"))
            .expect("frame size");
        let key = Self::load_key(p, s.key_slot);
        let dec_step = p.charge("SMRAM decryption", costs.smram_decrypt, None);
        let opened = frame::open_bytes(&key, Direction::ToSsv, &in_smram);
        let (block, seq) = match opened {
            Ok(v) => v,
            Err(_) => {
                p.retag(copy_step, Some((id, u64::MAX)));
                p.retag(dec_step, Some((id, u64::MAX)));
                self.drop(p, DropReason::AuthFail, format!("session {id} tag mismatch"));
                return;
            }
        };
        let tag = Some((id, seq));
        p.retag(copy_step, tag);
        p.retag(dec_step, tag);
        p.write(Actor::Ssv, DomainKind::Smram, SCRATCH_OFFSET + 4096, &block[..]).expect("scratch");
        self.record_plain(&block);
        let plain = match PlainFrame::decode(&block[..]) {
            Ok(f) => f,
            Err(_) => return self.drop(p, DropReason::Malformed, format!("session {id} bad header")),
        };
        if seq != s.rx_seq || plain.seq != seq {
            return self.drop(p, DropReason::ReplayOrReorder, format!("session {id} expected {} got {seq}", s.rx_seq));
        }
        if plain.session_id != id {
            return self.drop(p, DropReason::SessionMismatch, format!("session {id} frame claims {}", plain.session_id));
        }
        self.stats.opened += 1;
        self.stats.requests += 1;
        self.sessions.get_mut(&id).unwrap().rx_seq += 1;
        self.served.insert((id, seq), p.counters.smis);

        let (status, payload) = self.service(p, &s, &plain, tag, mismatches);
        if status != Status::Ok {
            self.stats.error_replies += 1;
        }
        let reply = PlainFrame {
            session_id: id,
            seq: s.tx_seq,
            device: plain.device,
            operation: plain.operation,
            status: status as u8,
            payload,
        };
        self.send(p, id, reply, tag);
    }

    fn service(
        &mut self,
        p: &mut Platform,
        s: &SsvSession,
        plain: &PlainFrame,
        tag: Option<(u32, u64)>,
        mismatches: &mut Vec<String>,
    ) -> (Status, Vec<u8>) {
        let Some(device) = DeviceId::from_code(plain.device) else {
            return (Status::UnknownDevice, Vec::new());
        };
        let Some(op) = Operation::from_code(plain.operation) else {
            return (Status::OperationUnsupported, Vec::new());
        };
        let driver: &mut dyn Driver = match device {
            DeviceId::Clock => &mut self.clock,
            DeviceId::Nic => &mut self.nic,
        };
        let label = driver.service_label();
        let start = p.now();
        let mut cx = DriverCx {
            p,
            heap: &mut self.heap,
            flows: &mut self.flows,
            session: s.id,
            epid: s.epid,
            req: tag,
            context_mismatches: mismatches,
        };
        let result = match op {
            Operation::Probe => driver.probe(&mut cx, &plain.payload),
            Operation::Read => driver.read(&mut cx, &plain.payload),
            Operation::Write => driver.write(&mut cx, &plain.payload),
        };
        p.record_step(label, start, tag);
        match result {
            Ok(payload) => (Status::Ok, payload),
            Err(e) => {
                if matches!(e, DriverError::Policy(ref m) if m.contains("egress tag")) {
                    *self.stats.dropped.entry(DropReason::FlowSpoof).or_default() += 1;
                }
                p.log("ssv", format!("session {} driver error: {e}", s.id));
                (e.status(), Vec::new())
            }
        }
    }

    /// Seal and enqueue a frame toward the enclave of session `id`.
    fn send(&mut self, p: &mut Platform, id: u32, mut plain: PlainFrame, tag: Option<(u32, u64)>) -> bool {
        let s = self.sessions[&id].clone();
        let costs = p.costs().clone();
        plain.seq = s.tx_seq;
        let Ok(block) = plain.encode() else {
            self.drop(p, DropReason::Malformed, format!("session {id} reply too large"));
            return false;
        };
        p.write(Actor::Ssv, DomainKind::Smram, SCRATCH_OFFSET + 4096, &block[..]).expect("scratch");
        self.record_plain(&block);
        let key = Self::load_key(p, s.key_slot);
        p.charge("SMRAM encryption", costs.smram_encrypt, tag);
        let sealed = frame::seal_bytes(&key, Direction::FromSsv, s.tx_seq, &block);
        p.write(Actor::Ssv, DomainKind::Smram, SCRATCH_OFFSET + 8192, sealed.as_bytes()).expect("scratch");
        self.stats.sealed += 1;
        self.sessions.get_mut(&id).unwrap().tx_seq += 1;
        p.charge("Copy to shared RAM", costs.ssv_copy_to_shared, tag);
        match fifo::enqueue(p, Actor::Ssv, &s.fifos.from_ssv, &sealed) {
            Ok(()) => true,
            Err(e) => {
                self.drop(p, DropReason::FifoFull, format!("session {id}: {e}"));
                false
            }
        }
    }

    /// Classify received frames: tagged ones go to their enclave, the rest to the OS.
    fn service_rx(&mut self, p: &mut Platform) {
        let idx = self.nic.adapter;
        let scan_cost = p.costs().nic_rx_scan;
        p.charge("RX scan", scan_cost, None);
        let frames = p.nic_rx_scan(Actor::Ssv, idx).unwrap_or_default();
        let mut notified: BTreeSet<u32> = BTreeSet::new();
        let mut left_for_os = false;
        for (slot, bytes) in frames {
            let owner = match flow::ethertype(&bytes) {
                Some(flow::ETHERTYPE_IPV4) => flow::ipv4_tag(&bytes).and_then(|t| self.flows.by_tag(&t)).map(|f| f.session),
                Some(flow::ETHERTYPE_ARP) => flow::arp_target(&bytes).and_then(|ip| self.flows.by_ip(&ip)).map(|f| f.session),
                _ => None,
            };
            let Some(id) = owner.filter(|id| self.sessions.contains_key(id)) else {
                left_for_os = true;
                continue;
            };
            let _ = p.nic_rx_consume(Actor::Ssv, idx, slot);
            let event = PlainFrame {
                session_id: id,
                seq: 0,
                device: DeviceId::Nic.code(),
                operation: Operation::Read as u8,
                status: STATUS_EVENT,
                payload: bytes,
            };
            if self.send(p, id, event, None) {
                self.stats.events += 1;
                notified.insert(id);
            }
        }
        for id in notified {
            let v = self.sessions[&id].notify_vector;
            let _ = p.raise_interrupt(v);
        }
        if left_for_os {
            self.stats.forwarded_to_os += 1;
            let v = p.nics[idx].config.vector;
            p.forward_to_os(v);
        } else {
            p.nics[idx].ack(STATUS_RINT);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::fifo::SharedAllocator;
    use crate::platform::PlatformConfig;

    fn installed() -> (Platform, Ssv, u32, SessionKey, FifoPair) {
        let mut p = Platform::new(PlatformConfig::default());
        p.create_enclave(1);
        let mut ssv = Ssv::new(GENUINE_IMAGE);
        let fifos = SharedAllocator::new(p.config().shared_size).alloc_pair(32).unwrap();
        let key = [9u8; 32];
        p.trigger_smi(SmiSource::Software).unwrap();
        let id = ssv.install(&mut p, 1, [1; 16], &key, fifos).unwrap();
        p.rsm().unwrap();
        (p, ssv, id, key, fifos)
    }

    fn request(id: u32, seq: u64, device: u8, op: u8) -> PlainFrame {
        PlainFrame { session_id: id, seq, device, operation: op, status: 0, payload: Vec::new() }
    }

    fn smi(p: &mut Platform, ssv: &mut Ssv) {
        p.trigger_smi(SmiSource::Software).unwrap();
        ssv.dispatch(p);
        p.rsm().unwrap();
    }

    #[test]
    fn one_time_request_one_reply() {
        let (mut p, mut ssv, id, key, fifos) = installed();
        let f = frame::seal(&key, Direction::ToSsv, &request(id, 0, 1, 1)).unwrap();
        fifo::enqueue(&mut p, Actor::Os, &fifos.to_ssv, &f).unwrap();
        smi(&mut p, &mut ssv);
        assert_eq!(fifo::len(&mut p, Actor::Os, &fifos.from_ssv).unwrap(), 1);
        let reply = fifo::dequeue(&mut p, Actor::Os, &fifos.from_ssv).unwrap().unwrap();
        let plain = frame::open(&key, Direction::FromSsv, &reply, 0).unwrap();
        assert_eq!(plain.status, Status::Ok as u8);
        assert_eq!(plain.payload.len(), drivers::CLOCK_SNAPSHOT_LEN);
        assert!(ssv.hygiene.is_empty());
    }

    #[test]
    fn unknown_key_dropped_silently() {
        let (mut p, mut ssv, id, _key, fifos) = installed();
        let f = frame::seal(&[0xee; 32], Direction::ToSsv, &request(id, 0, 1, 1)).unwrap();
        fifo::enqueue(&mut p, Actor::Os, &fifos.to_ssv, &f).unwrap();
        smi(&mut p, &mut ssv);
        assert_eq!(fifo::len(&mut p, Actor::Os, &fifos.from_ssv).unwrap(), 0);
        assert_eq!(ssv.stats.drops(DropReason::AuthFail), 1);
    }

    #[test]
    fn unsupported_verb_gets_error_status() {
        let (mut p, mut ssv, id, key, fifos) = installed();
        let f = frame::seal(&key, Direction::ToSsv, &request(id, 0, 1, 9)).unwrap();
        fifo::enqueue(&mut p, Actor::Os, &fifos.to_ssv, &f).unwrap();
        smi(&mut p, &mut ssv);
        let reply = fifo::dequeue(&mut p, Actor::Os, &fifos.from_ssv).unwrap().unwrap();
        let plain = frame::open(&key, Direction::FromSsv, &reply, 0).unwrap();
        assert_eq!(plain.status, Status::OperationUnsupported as u8);
    }

    #[test]
    fn key_lives_only_in_smram() {
        let (p, _ssv, _id, key, _f) = installed();
        let smram = p.inspect(DomainKind::Smram).unwrap();
        assert!(smram.windows(32).any(|w| w == key));
        assert!(!p.inspect(DomainKind::SharedRam).unwrap().windows(32).any(|w| w == key));
    }

    #[test]
    fn removing_last_session_restores_routing() {
        let (mut p, mut ssv, id, _key, _f) = installed();
        let v = p.nics[0].config.vector;
        assert_eq!(p.redirection().target(v), Some(Target::Ssv));
        p.trigger_smi(SmiSource::Software).unwrap();
        ssv.remove(&mut p, id).unwrap();
        p.rsm().unwrap();
        assert_eq!(p.redirection().target(v), Some(Target::Os));
    }
}

//! The simulated machine: isolation domains, the protected/SMM mode machine,
//! interrupt redirection and virtual time.
//!
//! Faults are returned as values so attack scenarios can observe them and
//! carry on. The platform is the single serialization point of a simulation.

pub mod cost;
pub mod interrupts;
pub mod memory;
pub mod mode;

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::devices::clock::RTC_UIP_WINDOW_NS;
use crate::devices::{
    ClockBank, ClockConfig, ClockSource, ClockTamper, DeviceId, Fabric, Nic, NicConfig, NicError, RawReading,
};

pub use cost::CostTable;
pub use interrupts::{Delivery, RedirectionTable, Target, Vector, KEYBOARD_VECTOR, NOTIFY_VECTOR_BASE, TIMER_VECTOR};
pub use memory::{access_allowed, AccessOp, DomainKind, MemoryDomain};
pub use mode::{context_checksum, Context, CpuState, ExecutionMode};

pub type EnclaveId = u32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Actor {
    Os,
    Adversary,
    Ssv,
    Enclave(EnclaveId),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Resource {
    Memory(DomainKind),
    Device(DeviceId),
    Mode,
}

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Fault {
    #[error("{actor:?} may not access {resource:?} in {mode:?}")]
    AccessViolation { actor: Actor, resource: Resource, mode: ExecutionMode },
    #[error("access [{offset}, +{len}) outside {domain:?} of size {size}")]
    OutOfBounds { domain: DomainKind, offset: usize, len: usize, size: usize },
    #[error("SMI raised while already in SMM")]
    Reentrancy,
    #[error("RSM executed outside SMM")]
    NotInSmm,
    #[error("vector {0:#x} has no redirection entry")]
    UnknownVector(Vector),
    #[error("no memory domain {0:?}")]
    NoSuchDomain(DomainKind),
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum NicOpError {
    #[error(transparent)]
    Fault(#[from] Fault),
    #[error(transparent)]
    Nic(#[from] NicError),
    #[error("no adapter {0}")]
    NoSuchNic(usize),
}

/// Why the machine entered SMM.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SmiSource {
    Software,
    Device(Vector),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Event {
    pub vt_ns: u64,
    pub source: String,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccessRecord {
    pub vt_ns: u64,
    pub actor: Actor,
    pub domain: DomainKind,
    pub offset: usize,
    pub len: usize,
    pub write: bool,
    pub allowed: bool,
    /// Written bytes, kept only for writes outside SMRAM and EPC.
    pub data: Option<Vec<u8>>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlatformCounters {
    pub smis: u64,
    pub software_smis: u64,
    pub device_smis: u64,
    pub faults: u64,
    pub interrupts: u64,
}

/// One charged step of virtual time, for workflow traces and breakdowns.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Step {
    pub vt_ns: u64,
    pub label: String,
    pub cost_ns: u64,
    /// SMI ordinal the step ran under; 0 outside SMM.
    pub smi: u64,
    /// `(session, request seq)` the step worked for, if any.
    pub req: Option<(u32, u64)>,
}

/// One clock register read performed in SMM.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ClockRead {
    pub reading: RawReading,
    /// Read attempts; 2 when the RTC update-in-progress flag forced a retry.
    pub reads: u32,
    /// Virtual time at which the value was latched.
    pub latched_at: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlatformConfig {
    pub smram_size: usize,
    pub shared_size: usize,
    pub untrusted_size: usize,
    pub epc_size: usize,
    pub costs: CostTable,
    pub clocks: ClockConfig,
    pub nics: Vec<NicConfig>,
    /// Deliver frames back to the sending adapter (machine-local traffic).
    pub hairpin: bool,
    pub capture_fabric: bool,
    pub trace_accesses: bool,
}

impl Default for PlatformConfig {
    fn default() -> Self {
        PlatformConfig {
            smram_size: 256 * 1024,
            shared_size: 1024 * 1024,
            untrusted_size: 256 * 1024,
            epc_size: 64 * 1024,
            costs: CostTable::default(),
            clocks: ClockConfig::default(),
            nics: vec![NicConfig::default()],
            hairpin: true,
            capture_fabric: false,
            trace_accesses: false,
        }
    }
}

/// Offset in SMRAM of the CPU save-state area written on SMM entry.
pub const SAVE_STATE_OFFSET: usize = 0;
pub const SAVE_STATE_LEN: usize = 72;

pub struct Platform {
    config: PlatformConfig,
    smram: MemoryDomain,
    shared: MemoryDomain,
    untrusted: MemoryDomain,
    epc: BTreeMap<EnclaveId, MemoryDomain>,
    mode: ExecutionMode,
    saved_mode: Option<ExecutionMode>,
    cpu: CpuState,
    smi_source: Option<SmiSource>,
    latched_smis: VecDeque<SmiSource>,
    redirection: RedirectionTable,
    os_queue: Vec<Vector>,
    notify: BTreeMap<EnclaveId, VecDeque<u64>>,
    notify_seq: u64,
    deliveries: Vec<Delivery>,
    now: u64,
    pub clocks: ClockBank,
    pub nics: Vec<Nic>,
    pub fabric: Fabric,
    events: Vec<Event>,
    accesses: Vec<AccessRecord>,
    faults: Vec<Fault>,
    steps: Vec<Step>,
    pub counters: PlatformCounters,
}

impl Platform {
    pub fn new(config: PlatformConfig) -> Self {
        let mut redirection = RedirectionTable::default();
        redirection.register(TIMER_VECTOR);
        redirection.register(KEYBOARD_VECTOR);
        let nics: Vec<Nic> = config.nics.iter().cloned().map(Nic::new).collect();
        for nic in &nics {
            redirection.register(nic.config.vector);
        }
        let mut fabric = Fabric::new(config.hairpin);
        fabric.capture_enabled = config.capture_fabric;
        Platform {
            smram: MemoryDomain::new(DomainKind::Smram, 0x7f00_0000, config.smram_size),
            shared: MemoryDomain::new(DomainKind::SharedRam, 0x4000_0000, config.shared_size),
            untrusted: MemoryDomain::new(DomainKind::UntrustedRam, 0x1000_0000, config.untrusted_size),
            epc: BTreeMap::new(),
            mode: ExecutionMode::Protected(Context::Os),
            saved_mode: None,
            cpu: CpuState::default(),
            smi_source: None,
            latched_smis: VecDeque::new(),
            redirection,
            os_queue: Vec::new(),
            notify: BTreeMap::new(),
            notify_seq: 0,
            deliveries: Vec::new(),
            now: 0,
            clocks: ClockBank::new(config.clocks.clone()),
            nics,
            fabric,
            events: Vec::new(),
            accesses: Vec::new(),
            faults: Vec::new(),
            steps: Vec::new(),
            counters: PlatformCounters::default(),
            config,
        }
    }

    pub fn config(&self) -> &PlatformConfig {
        &self.config
    }

    pub fn costs(&self) -> &CostTable {
        &self.config.costs
    }

    pub fn costs_mut(&mut self) -> &mut CostTable {
        &mut self.config.costs
    }

    // ---- virtual time -------------------------------------------------

    pub fn now(&self) -> u64 {
        self.now
    }

    pub fn advance(&mut self, ns: u64) {
        self.now = self.now.saturating_add(ns);
    }

    fn current_smi(&self) -> u64 {
        if self.mode.is_smm() {
            self.counters.smis
        } else {
            0
        }
    }

    /// Advance time by `ns` and record it as a named step.
    pub fn charge(&mut self, label: &str, ns: u64, req: Option<(u32, u64)>) -> usize {
        let vt_ns = self.now;
        self.advance(ns);
        let smi = self.current_smi();
        self.steps.push(Step { vt_ns, label: label.to_string(), cost_ns: ns, smi, req });
        self.steps.len() - 1
    }

    /// Record the time elapsed since `start` as a named step.
    pub fn record_step(&mut self, label: &str, start: u64, req: Option<(u32, u64)>) -> usize {
        let smi = self.current_smi();
        let cost_ns = self.now.saturating_sub(start);
        self.steps.push(Step { vt_ns: start, label: label.to_string(), cost_ns, smi, req });
        self.steps.len() - 1
    }

    pub fn retag(&mut self, idx: usize, req: Option<(u32, u64)>) {
        if let Some(s) = self.steps.get_mut(idx) {
            s.req = req;
        }
    }

    pub fn steps(&self) -> &[Step] {
        &self.steps
    }

    pub fn steps_len(&self) -> usize {
        self.steps.len()
    }

    pub fn clear_steps(&mut self) {
        self.steps.clear();
    }

    // ---- logging --------------------------------------------------------

    pub fn log(&mut self, source: &str, detail: impl Into<String>) {
        self.events.push(Event { vt_ns: self.now, source: source.to_string(), detail: detail.into() });
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    /// The event log as newline-delimited JSON; identical runs give identical bytes.
    pub fn event_log_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for e in &self.events {
            out.extend(serde_json::to_vec(e).expect("event serializes"));
            out.push(b'\n');
        }
        out
    }

    pub fn accesses(&self) -> &[AccessRecord] {
        &self.accesses
    }

    pub fn clear_accesses(&mut self) {
        self.accesses.clear();
    }

    pub fn set_trace_accesses(&mut self, on: bool) {
        self.config.trace_accesses = on;
    }

    pub fn faults(&self) -> &[Fault] {
        &self.faults
    }

    fn fault(&mut self, f: Fault) -> Fault {
        self.counters.faults += 1;
        self.faults.push(f);
        self.log("platform", format!("fault {f:?}"));
        f
    }

    // ---- memory -------------------------------------------------------

    pub fn create_enclave(&mut self, id: EnclaveId) {
        let size = self.config.epc_size;
        self.epc
            .entry(id)
            .or_insert_with(|| MemoryDomain::new(DomainKind::Epc(id), 0x8000_0000 + u64::from(id) * 0x10_0000, size));
    }

    pub fn domain_size(&self, kind: DomainKind) -> Option<usize> {
        self.domain(kind).map(MemoryDomain::size)
    }

    fn domain(&self, kind: DomainKind) -> Option<&MemoryDomain> {
        match kind {
            DomainKind::Smram => Some(&self.smram),
            DomainKind::SharedRam => Some(&self.shared),
            DomainKind::UntrustedRam => Some(&self.untrusted),
            DomainKind::Epc(e) => self.epc.get(&e),
        }
    }

    fn domain_mut(&mut self, kind: DomainKind) -> Option<&mut MemoryDomain> {
        match kind {
            DomainKind::Smram => Some(&mut self.smram),
            DomainKind::SharedRam => Some(&mut self.shared),
            DomainKind::UntrustedRam => Some(&mut self.untrusted),
            DomainKind::Epc(e) => self.epc.get_mut(&e),
        }
    }

    /// Raw view of a domain for harness-side audits. Not an actor access.
    pub fn inspect(&self, kind: DomainKind) -> Option<&[u8]> {
        self.domain(kind).map(|d| d.contents.as_slice())
    }

    /// Perform a checked memory access on behalf of `actor`.
    ///
    /// Reads return the bytes; writes return an empty vector. Forbidden
    /// accesses leave memory untouched and return a fault.
    pub fn access(&mut self, actor: Actor, kind: DomainKind, offset: usize, op: AccessOp<'_>) -> Result<Vec<u8>, Fault> {
        let allowed = access_allowed(actor, kind, self.mode);
        if self.config.trace_accesses {
            let data = match (op, kind) {
                (AccessOp::Write(d), DomainKind::SharedRam | DomainKind::UntrustedRam) if allowed => Some(d.to_vec()),
                _ => None,
            };
            self.accesses.push(AccessRecord {
                vt_ns: self.now,
                actor,
                domain: kind,
                offset,
                len: op.len(),
                write: op.is_write(),
                allowed,
                data,
            });
        }
        if !allowed {
            let mode = self.mode;
            return Err(self.fault(Fault::AccessViolation { actor, resource: Resource::Memory(kind), mode }));
        }
        let Some(domain) = self.domain_mut(kind) else {
            return Err(self.fault(Fault::NoSuchDomain(kind)));
        };
        let size = domain.size();
        let len = op.len();
        if offset.checked_add(len).is_none_or(|end| end > size) {
            return Err(self.fault(Fault::OutOfBounds { domain: kind, offset, len, size }));
        }
        match op {
            AccessOp::Read(n) => Ok(domain.contents[offset..offset + n].to_vec()),
            AccessOp::Write(data) => {
                domain.contents[offset..offset + data.len()].copy_from_slice(data);
                Ok(Vec::new())
            }
        }
    }

    pub fn read(&mut self, actor: Actor, kind: DomainKind, offset: usize, len: usize) -> Result<Vec<u8>, Fault> {
        self.access(actor, kind, offset, AccessOp::Read(len))
    }

    pub fn write(&mut self, actor: Actor, kind: DomainKind, offset: usize, data: &[u8]) -> Result<(), Fault> {
        self.access(actor, kind, offset, AccessOp::Write(data)).map(|_| ())
    }

    // ---- execution mode ----------------------------------------------

    pub fn mode(&self) -> ExecutionMode {
        self.mode
    }

    pub fn saved_mode(&self) -> Option<ExecutionMode> {
        self.saved_mode
    }

    pub fn cpu(&self) -> &CpuState {
        &self.cpu
    }

    pub fn cpu_mut(&mut self) -> &mut CpuState {
        &mut self.cpu
    }

    pub fn context_checksum(&self) -> [u8; 64] {
        context_checksum(self.mode, &self.cpu)
    }

    /// Switch the running protected-mode context (EENTER/EEXIT analogue).
    pub fn set_context(&mut self, ctx: Context) -> Result<(), Fault> {
        if self.mode.is_smm() {
            let mode = self.mode;
            return Err(self.fault(Fault::AccessViolation { actor: Actor::Os, resource: Resource::Mode, mode }));
        }
        self.mode = ExecutionMode::Protected(ctx);
        Ok(())
    }

    pub fn context(&self) -> Option<Context> {
        match self.mode {
            ExecutionMode::Protected(c) => Some(c),
            ExecutionMode::Smm => None,
        }
    }

    /// Enter SMM, storing the interrupted context in the SMRAM save-state area.
    pub fn trigger_smi(&mut self, source: SmiSource) -> Result<(), Fault> {
        if self.mode.is_smm() {
            return Err(self.fault(Fault::Reentrancy));
        }
        let mut state = [0u8; SAVE_STATE_LEN];
        state[..8].copy_from_slice(&self.mode.encode());
        state[8..].copy_from_slice(&self.cpu.to_bytes());
        self.smram.contents[SAVE_STATE_OFFSET..SAVE_STATE_OFFSET + SAVE_STATE_LEN].copy_from_slice(&state);
        self.saved_mode = Some(self.mode);
        self.mode = ExecutionMode::Smm;
        self.smi_source = Some(source);
        self.counters.smis += 1;
        match source {
            SmiSource::Software => self.counters.software_smis += 1,
            SmiSource::Device(_) => self.counters.device_smis += 1,
        }
        self.log("platform", format!("smi {source:?}"));
        Ok(())
    }

    /// Leave SMM, restoring the saved context bit-exactly.
    pub fn rsm(&mut self) -> Result<(), Fault> {
        if !self.mode.is_smm() {
            return Err(self.fault(Fault::NotInSmm));
        }
        let state = &self.smram.contents[SAVE_STATE_OFFSET..SAVE_STATE_OFFSET + SAVE_STATE_LEN];
        let mode = ExecutionMode::decode(state[..8].try_into().unwrap())
            .or(self.saved_mode)
            .unwrap_or(ExecutionMode::Protected(Context::Os));
        self.cpu = CpuState::from_bytes(&state[8..]);
        self.mode = mode;
        self.saved_mode = None;
        self.smi_source = None;
        self.log("platform", "rsm");
        Ok(())
    }

    pub fn smi_source(&self) -> Option<SmiSource> {
        self.smi_source
    }

    /// Pop an SMI that was raised while already in SMM.
    pub fn take_latched_smi(&mut self) -> Option<SmiSource> {
        self.latched_smis.pop_front()
    }

    pub fn has_latched_smi(&self) -> bool {
        !self.latched_smis.is_empty()
    }

    // ---- interrupts -----------------------------------------------------

    pub fn redirection(&self) -> &RedirectionTable {
        &self.redirection
    }

    pub fn route(&mut self, vector: Vector, target: Target) {
        self.redirection.route(vector, target);
        self.log("platform", format!("route {vector:#x} -> {target:?}"));
    }

    pub fn unroute(&mut self, vector: Vector) {
        self.redirection.remove(vector);
    }

    pub fn raise_interrupt(&mut self, vector: Vector) -> Result<(), Fault> {
        let Some(target) = self.redirection.target(vector) else {
            return Err(self.fault(Fault::UnknownVector(vector)));
        };
        self.counters.interrupts += 1;
        self.deliveries.push(Delivery { vt_ns: self.now, vector, target });
        self.log("platform", format!("irq {vector:#x} -> {target:?}"));
        match target {
            Target::Ssv => {
                if self.mode.is_smm() {
                    self.latched_smis.push_back(SmiSource::Device(vector));
                } else {
                    self.trigger_smi(SmiSource::Device(vector))?;
                }
            }
            Target::Os => self.os_queue.push(vector),
            Target::EnclaveNotify(e) => {
                self.notify_seq += 1;
                let token = self.notify_seq;
                self.notify.entry(e).or_default().push_back(token);
            }
        }
        Ok(())
    }

    /// Hand a vector to the OS queue directly (supervisor re-forwarding).
    pub fn forward_to_os(&mut self, vector: Vector) {
        self.counters.interrupts += 1;
        self.deliveries.push(Delivery { vt_ns: self.now, vector, target: Target::Os });
        self.os_queue.push(vector);
    }

    pub fn deliveries(&self) -> &[Delivery] {
        &self.deliveries
    }

    pub fn os_queue(&self) -> &[Vector] {
        &self.os_queue
    }

    pub fn take_os_interrupts(&mut self) -> Vec<Vector> {
        std::mem::take(&mut self.os_queue)
    }

    pub fn take_notifications(&mut self, enclave: EnclaveId) -> Vec<u64> {
        self.notify.get_mut(&enclave).map(|q| q.drain(..).collect()).unwrap_or_default()
    }

    pub fn pending_notifications(&self, enclave: EnclaveId) -> usize {
        self.notify.get(&enclave).map_or(0, VecDeque::len)
    }

    // ---- devices ------------------------------------------------------

    fn require_ssv(&mut self, actor: Actor, dev: DeviceId) -> Result<(), Fault> {
        if actor == Actor::Ssv && self.mode.is_smm() {
            Ok(())
        } else {
            let mode = self.mode;
            Err(self.fault(Fault::AccessViolation { actor, resource: Resource::Device(dev), mode }))
        }
    }

    /// Read one clock source's registers. Only the supervisor, in SMM, may.
    ///
    /// RTC reads that collide with an update in progress are discarded and
    /// repeated once the update completes.
    pub fn read_clock(&mut self, actor: Actor, source: ClockSource) -> Result<Option<ClockRead>, Fault> {
        self.require_ssv(actor, DeviceId::Clock)?;
        if !self.clocks.is_present(source) {
            return Ok(None);
        }
        let costs = &self.config.costs;
        let (rtc_cost, timer_cost) = (costs.rtc_read, costs.timer_read);
        if source != ClockSource::Rtc {
            let latched_at = self.now;
            let reading = self.clocks.raw(source, latched_at);
            self.advance(timer_cost);
            return Ok(Some(ClockRead { reading, reads: 1, latched_at }));
        }
        let mut reads = 0;
        loop {
            reads += 1;
            let latched_at = self.now;
            let busy = self.clocks.rtc_update_in_progress(latched_at);
            let reading = self.clocks.raw(source, latched_at);
            self.advance(rtc_cost);
            if !busy || reads >= 3 {
                return Ok(Some(ClockRead { reading, reads, latched_at }));
            }
            let wait = self.clocks.rtc_uip_remaining(self.now).min(RTC_UIP_WINDOW_NS);
            self.advance(wait);
        }
    }

    pub fn tamper_clock(&mut self, mutation: ClockTamper) {
        let now = self.now;
        self.clocks.tamper(now, mutation);
        self.log("device", format!("clock tamper {mutation:?}"));
    }

    fn nic_allowed(&mut self, actor: Actor) -> Result<(), Fault> {
        let ok = match actor {
            Actor::Ssv => self.mode.is_smm(),
            Actor::Os | Actor::Adversary => !self.mode.is_smm(),
            Actor::Enclave(_) => false,
        };
        if ok {
            Ok(())
        } else {
            let mode = self.mode;
            Err(self.fault(Fault::AccessViolation { actor, resource: Resource::Device(DeviceId::Nic), mode }))
        }
    }

    fn nic_index(&self, idx: usize) -> Result<(), NicOpError> {
        if idx < self.nics.len() {
            Ok(())
        } else {
            Err(NicOpError::NoSuchNic(idx))
        }
    }

    /// Driver-level transmit through the adapter's host producer index.
    pub fn nic_tx(&mut self, actor: Actor, idx: usize, frame: &[u8]) -> Result<(), NicOpError> {
        self.nic_allowed(actor)?;
        self.nic_index(idx)?;
        self.nics[idx].tx(frame)?;
        self.nic_kick(idx);
        Ok(())
    }

    /// Let adapter `idx` drain its TX ring onto the fabric and raise interrupts.
    pub fn nic_kick(&mut self, idx: usize) {
        let frames = self.nics[idx].transmit_pending();
        if frames.is_empty() {
            return;
        }
        let mut signalled = vec![false; self.nics.len()];
        signalled[idx] = true;
        for frame in &frames {
            self.fabric.record(self.now, idx, frame);
            self.log("fabric", format!("nic{idx} tx {} bytes", frame.len()));
            for dest in self.fabric.destinations(idx, self.nics.len()) {
                if self.nics[dest].deliver(frame) {
                    signalled[dest] = true;
                } else {
                    self.log("fabric", format!("nic{dest} rx drop"));
                }
            }
        }
        for (i, hit) in signalled.into_iter().enumerate() {
            if hit && self.nics[i].signal() {
                let v = self.nics[i].config.vector;
                let _ = self.raise_interrupt(v);
            }
        }
    }

    /// Frame arriving from outside the machine (or forged by the adversary).
    pub fn nic_inject(&mut self, idx: usize, frame: &[u8]) -> Result<bool, NicOpError> {
        self.nic_index(idx)?;
        let ok = self.nics[idx].deliver(frame);
        self.log("device", format!("nic{idx} inject {} bytes ok={ok}", frame.len()));
        if ok && self.nics[idx].signal() {
            let v = self.nics[idx].config.vector;
            let _ = self.raise_interrupt(v);
        }
        Ok(ok)
    }

    pub fn nic_rx_scan(&mut self, actor: Actor, idx: usize) -> Result<Vec<(usize, Vec<u8>)>, NicOpError> {
        self.require_ssv(actor, DeviceId::Nic)?;
        self.nic_index(idx)?;
        Ok(self.nics[idx].rx_scan())
    }

    pub fn nic_rx_consume(&mut self, actor: Actor, idx: usize, slot: usize) -> Result<Option<Vec<u8>>, NicOpError> {
        self.nic_allowed(actor)?;
        self.nic_index(idx)?;
        Ok(self.nics[idx].rx_consume(slot))
    }

    /// The OS driver's receive path: take every host-owned RX frame.
    pub fn os_drain_rx(&mut self, idx: usize) -> Result<Vec<Vec<u8>>, NicOpError> {
        self.nic_allowed(Actor::Os)?;
        self.nic_index(idx)?;
        let slots: Vec<usize> = self.nics[idx].rx_scan().into_iter().map(|(s, _)| s).collect();
        let frames = slots.into_iter().filter_map(|s| self.nics[idx].rx_consume(s)).collect();
        self.nics[idx].ack(crate::devices::nic::STATUS_RINT);
        Ok(frames)
    }

    /// Restore adapter control registers; fires any interrupt latched while masked.
    pub fn nic_restore(&mut self, idx: usize, regs: crate::devices::NicRegs) {
        if self.nics[idx].restore(regs) && self.nics[idx].status != 0 {
            let v = self.nics[idx].config.vector;
            let _ = self.raise_interrupt(v);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn platform() -> Platform {
        Platform::new(PlatformConfig::default())
    }

    #[test]
    fn os_reading_smram_faults() {
        let mut p = platform();
        let err = p.read(Actor::Os, DomainKind::Smram, 0, 16).unwrap_err();
        assert!(matches!(err, Fault::AccessViolation { .. }));
    }

    #[test]
    fn ssv_writes_smram_in_smm() {
        let mut p = platform();
        p.trigger_smi(SmiSource::Software).unwrap();
        p.write(Actor::Ssv, DomainKind::Smram, 4096, b"secret").unwrap();
        assert_eq!(p.read(Actor::Ssv, DomainKind::Smram, 4096, 6).unwrap(), b"secret");
    }

    #[test]
    fn forbidden_write_leaves_memory() {
        let mut p = platform();
        p.write(Actor::Os, DomainKind::SharedRam, 0, &[1, 2, 3]).unwrap();
        p.trigger_smi(SmiSource::Software).unwrap();
        assert!(p.write(Actor::Os, DomainKind::SharedRam, 0, &[9, 9, 9]).is_err());
        p.rsm().unwrap();
        assert_eq!(p.read(Actor::Os, DomainKind::SharedRam, 0, 3).unwrap(), vec![1, 2, 3]);
    }

    #[test]
    fn out_of_bounds() {
        let mut p = platform();
        let size = p.domain_size(DomainKind::SharedRam).unwrap();
        let err = p.read(Actor::Os, DomainKind::SharedRam, size - 2, 4).unwrap_err();
        assert!(matches!(err, Fault::OutOfBounds { .. }));
    }

    #[test]
    fn smi_saves_and_rsm_restores_context() {
        let mut p = platform();
        p.create_enclave(7);
        p.set_context(Context::Enclave(7)).unwrap();
        p.cpu_mut().regs = [1, 2, 3, 4, 5, 6, 7, 8];
        let before = p.context_checksum();
        p.trigger_smi(SmiSource::Software).unwrap();
        assert_eq!(p.mode(), ExecutionMode::Smm);
        assert_eq!(p.saved_mode(), Some(ExecutionMode::Protected(Context::Enclave(7))));
        p.cpu_mut().regs = [0xdead; 8];
        p.rsm().unwrap();
        assert_eq!(p.mode(), ExecutionMode::Protected(Context::Enclave(7)));
        assert_eq!(p.context_checksum(), before);
    }

    #[test]
    fn reentrancy_and_rsm_outside_smm() {
        let mut p = platform();
        assert_eq!(p.rsm(), Err(Fault::NotInSmm));
        p.trigger_smi(SmiSource::Software).unwrap();
        assert_eq!(p.trigger_smi(SmiSource::Software), Err(Fault::Reentrancy));
    }

    #[test]
    fn interrupt_routing() {
        let mut p = platform();
        let nic_vec = p.nics[0].config.vector;
        p.route(nic_vec, Target::Ssv);
        p.raise_interrupt(nic_vec).unwrap();
        assert_eq!(p.mode(), ExecutionMode::Smm);
        assert_eq!(p.smi_source(), Some(SmiSource::Device(nic_vec)));
        p.rsm().unwrap();

        p.raise_interrupt(KEYBOARD_VECTOR).unwrap();
        assert_eq!(p.os_queue(), &[KEYBOARD_VECTOR]);
        assert_eq!(p.raise_interrupt(0xff), Err(Fault::UnknownVector(0xff)));
    }

    #[test]
    fn clock_read_requires_smm() {
        let mut p = platform();
        assert!(p.read_clock(Actor::Os, ClockSource::Tsc).is_err());
        p.trigger_smi(SmiSource::Software).unwrap();
        assert!(p.read_clock(Actor::Ssv, ClockSource::Tsc).unwrap().is_some());
    }

    #[test]
    fn rtc_collision_reads_twice() {
        let mut p = platform();
        p.advance(999_900_000);
        p.trigger_smi(SmiSource::Software).unwrap();
        let r = p.read_clock(Actor::Ssv, ClockSource::Rtc).unwrap().unwrap();
        assert_eq!(r.reads, 2);
        let RawReading::Rtc(t) = r.reading else { panic!() };
        assert_eq!(t.second, 1);
        assert!(r.latched_at >= 1_000_000_000);
    }

    #[test]
    fn loopback_to_peer_adapter() {
        let mut cfg = PlatformConfig { hairpin: false, ..PlatformConfig::default() };
        let mut peer = NicConfig::default();
        peer.vector = 0x2c;
        peer.mac[5] = 2;
        cfg.nics.push(peer);
        let mut p = Platform::new(cfg);
        let frame: Vec<u8> = (0..64u8).collect();
        p.nic_tx(Actor::Os, 0, &frame).unwrap();
        assert_eq!(p.nics[1].rx.slots[0].buffer, frame);
        assert_eq!(p.nics[1].rx.slots[0].own, crate::devices::Own::Host);
        assert!(p.nics[0].rx_scan().is_empty());
    }
}

//! The man-in-the-kernel: a scripted actor with full OS privileges.
//!
//! It only ever acts through interfaces the kernel really has: shared and
//! untrusted RAM, the SMI command port, device registers and the NIC wire.
//! Attempts on SMRAM or EPC go through the platform like any other access
//! and come back as faults, which are recorded.
//!
//! FIFO locations are known to the adversary because the kernel allocated
//! them; it reads them from the supervisor's session list only as a
//! shortcut for that bookkeeping.

use std::collections::{BTreeMap, BTreeSet};
use std::net::Ipv4Addr;

use serde::{Deserialize, Serialize};

use crate::channel::fifo::{self, FifoHandle};
use crate::channel::frame::{self, Direction, PlainFrame, SealedFrame, FRAME_SIZE};
use crate::channel::{measure, ChannelError, Operation, Session, Status};
use crate::devices::{ClockTamper, DeviceId};
use crate::harness::Workload;
use crate::machine::Machine;
use crate::net::wire;
use crate::platform::{Actor, DomainKind, SmiSource};
use crate::ssv::flow::{tag_for, FlowTag};

/// Points where the simulation hands control to the adversary.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Hook {
    /// Scenario start, before any session is established.
    Start,
    Tick,
    RequestEnqueued { session: u32 },
    SmiRequested { session: Option<u32> },
    ResponseReady,
    SampleTaken,
}

impl Hook {
    fn key(&self) -> &'static str {
        match self {
            Hook::Start => "start",
            Hook::Tick => "tick",
            Hook::RequestEnqueued { .. } => "request_enqueued",
            Hook::SmiRequested { .. } => "smi_requested",
            Hook::ResponseReady => "response_ready",
            Hook::SampleTaken => "sample_taken",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HookVerdict {
    Pass,
    /// Keep the SMI request back; `None` holds it forever.
    Hold { release_at: Option<u64> },
}

/// When a step fires. `nth` counts hook occurrences from 1.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "on", rename_all = "snake_case")]
pub enum Trigger {
    Start,
    At { vt_ns: u64 },
    RequestEnqueued { nth: u64 },
    SmiRequested { nth: u64 },
    ResponseReady { nth: u64 },
    SampleTaken { nth: u64 },
}

impl Trigger {
    fn matches(&self, hook: &Hook, count: u64, now: u64) -> bool {
        match (self, hook) {
            (Trigger::Start, Hook::Start) => true,
            (Trigger::At { vt_ns }, _) => now >= *vt_ns,
            (Trigger::RequestEnqueued { nth }, Hook::RequestEnqueued { .. })
            | (Trigger::SmiRequested { nth }, Hook::SmiRequested { .. })
            | (Trigger::ResponseReady { nth }, Hook::ResponseReady)
            | (Trigger::SampleTaken { nth }, Hook::SampleTaken) => count == *nth,
            _ => false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FifoSel {
    ToSsv,
    FromSsv,
}

/// One attack op. `session: None` targets the lowest-numbered live session.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "do", rename_all = "snake_case")]
pub enum Action {
    /// Copy every queued frame out of shared RAM and remember it.
    SnoopShared,
    /// XOR one byte of the `index`-th queued frame (0 = oldest).
    TamperFrame {
        #[serde(default)]
        session: Option<u32>,
        fifo: FifoSel,
        index: usize,
        byte: usize,
        xor: u8,
    },
    /// Re-enqueue a frame captured by an earlier snoop.
    ReplayFrame { capture: usize },
    DropFrame {
        #[serde(default)]
        session: Option<u32>,
        fifo: FifoSel,
        index: usize,
    },
    Reorder {
        #[serde(default)]
        session: Option<u32>,
        fifo: FifoSel,
        i: usize,
        j: usize,
    },
    /// Forge a request under a guessed key and fire a software SMI.
    FakeSmi {
        #[serde(default)]
        session: Option<u32>,
        #[serde(default)]
        seq: u64,
    },
    /// Answer the next handshake SMI with an emulated supervisor.
    FakeSsvHandshake,
    /// Launch an unregistered enclave and try to open a session.
    FakeEnclave,
    ClockTamper { mutation: ClockTamper },
    /// Put a UDP frame on the wire towards the host.
    InjectNicFrame {
        #[serde(default)]
        tag: Option<FlowTag>,
        dst: Ipv4Addr,
        payload: String,
    },
    /// Hold SMI requests of one session (or all) for `duration_ns`, forever if absent.
    Delay {
        #[serde(default)]
        session: Option<u32>,
        #[serde(default)]
        duration_ns: Option<u64>,
    },
    /// A compromised sibling enclave sends under the victim's flow tag, once
    /// through its own session and once sealed into the victim's FIFO.
    CrossFlow {
        #[serde(default)]
        session: Option<u32>,
    },
    /// Try to read SMRAM and every EPC directly.
    ProbeProtected,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptStep {
    pub when: Trigger,
    pub action: Action,
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpectedOutcome {
    DetectedAs(String),
    #[serde(rename = "degraded_to_dos")]
    DegradedToDoS,
    NoEffect,
}

impl std::fmt::Display for ExpectedOutcome {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ExpectedOutcome::DetectedAs(k) => write!(f, "DetectedAs({k})"),
            ExpectedOutcome::DegradedToDoS => f.write_str("DegradedToDoS"),
            ExpectedOutcome::NoEffect => f.write_str("NoEffect"),
        }
    }
}

/// A declarative attack together with the victim workload it targets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackScript {
    pub name: String,
    #[serde(default)]
    pub description: String,
    pub expected: ExpectedOutcome,
    pub victim: Workload,
    pub steps: Vec<ScriptStep>,
}

impl AttackScript {
    pub fn from_toml(text: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(text)
    }
}

/// What a scenario run saw, gathered by the harness.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Observed {
    /// Error kinds surfaced by any party: channel errors at the enclave,
    /// supervisor drop counters, CA rejections, time-verdict violations.
    pub detections: BTreeSet<String>,
    pub timeouts: u64,
    /// Replies accepted as genuine but carrying wrong data.
    pub silent_corruption: u64,
}

impl Observed {
    /// Map the observations onto the outcome vocabulary, preferring the
    /// expected detection when it was seen.
    pub fn classify(&self, expected: &ExpectedOutcome) -> ExpectedOutcome {
        if let ExpectedOutcome::DetectedAs(k) = expected {
            if self.detections.contains(k) {
                return expected.clone();
            }
        }
        if let Some(k) = self.detections.iter().next() {
            return ExpectedOutcome::DetectedAs(k.clone());
        }
        if self.timeouts > 0 {
            return ExpectedOutcome::DegradedToDoS;
        }
        ExpectedOutcome::NoEffect
    }

    pub fn holds(&self, expected: &ExpectedOutcome) -> bool {
        self.silent_corruption == 0 && self.classify(expected) == *expected
    }
}

/// One thing the adversary did or saw.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Observation {
    pub vt_ns: u64,
    pub kind: String,
    pub domain: Option<DomainKind>,
    pub offset: usize,
    pub bytes: Vec<u8>,
}

/// Append-only record of the adversary's view.
#[derive(Clone, Debug, Default)]
pub struct ObservationTrace {
    records: Vec<Observation>,
}

impl ObservationTrace {
    pub fn push(&mut self, o: Observation) {
        self.records.push(o);
    }

    pub fn records(&self) -> &[Observation] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

#[derive(Clone, Debug)]
struct Capture {
    session: u32,
    fifo: FifoSel,
    frame: SealedFrame,
}

#[derive(Clone, Copy, Debug)]
struct DelayRule {
    session: Option<u32>,
    duration_ns: Option<u64>,
}

const SIBLING_IP: Ipv4Addr = Ipv4Addr::new(10, 0, 0, 250);
const IMPOSTOR_IMAGE: &[u8] = b"aurora smm supervisor image v1 (patched)";

pub struct Adversary {
    steps: Vec<(ScriptStep, bool)>,
    counts: BTreeMap<&'static str, u64>,
    captures: Vec<Capture>,
    delays: Vec<DelayRule>,
    sibling: Option<Session>,
    pub trace: ObservationTrace,
    /// Rejections the adversary's own attempts provoked.
    pub detections: BTreeSet<String>,
    /// Virtual times at which a clock was tampered with.
    pub clock_tampers: Vec<u64>,
}

impl Adversary {
    pub fn new(steps: Vec<ScriptStep>) -> Self {
        Adversary {
            steps: steps.into_iter().map(|s| (s, false)).collect(),
            counts: BTreeMap::new(),
            captures: Vec::new(),
            delays: Vec::new(),
            sibling: None,
            trace: ObservationTrace::default(),
            detections: BTreeSet::new(),
            clock_tampers: Vec::new(),
        }
    }

    pub fn from_script(script: &AttackScript) -> Self {
        Self::new(script.steps.clone())
    }

    /// Steps that have not fired yet.
    pub fn unfired(&self) -> usize {
        self.steps.iter().filter(|(_, f)| !f).count()
    }

    pub fn on_hook(&mut self, m: &mut Machine, hook: Hook) -> HookVerdict {
        let count = {
            let c = self.counts.entry(hook.key()).or_insert(0);
            *c += 1;
            *c
        };
        let now = m.now();
        for i in 0..self.steps.len() {
            if !self.steps[i].1 && self.steps[i].0.when.matches(&hook, count, now) {
                self.steps[i].1 = true;
                let action = self.steps[i].0.action.clone();
                self.apply(m, &action);
            }
        }
        match hook {
            Hook::SmiRequested { session } => self
                .delays
                .iter()
                .find(|d| d.session.is_none() || d.session == session)
                .map_or(HookVerdict::Pass, |d| HookVerdict::Hold { release_at: d.duration_ns.map(|n| now + n) }),
            _ => HookVerdict::Pass,
        }
    }

    fn note(&mut self, m: &Machine, kind: &str, domain: Option<DomainKind>, offset: usize, bytes: Vec<u8>) {
        self.trace.push(Observation { vt_ns: m.now(), kind: kind.to_string(), domain, offset, bytes });
    }

    fn target(m: &Machine, session: Option<u32>) -> Option<(u32, crate::channel::FifoPair)> {
        match session {
            Some(id) => m.ssv.session(id).map(|s| (s.id, s.fifos)),
            None => m.ssv.sessions().next().map(|s| (s.id, s.fifos)),
        }
    }

    fn handle(m: &Machine, session: Option<u32>, sel: FifoSel) -> Option<(u32, FifoHandle)> {
        Self::target(m, session).map(|(id, pair)| match sel {
            FifoSel::ToSsv => (id, pair.to_ssv),
            FifoSel::FromSsv => (id, pair.from_ssv),
        })
    }

    fn read_slot(&mut self, m: &mut Machine, f: &FifoHandle, index: u64) -> Option<Vec<u8>> {
        let at = f.slot_offset(index);
        let bytes = m.platform.read(Actor::Adversary, DomainKind::SharedRam, at, FRAME_SIZE).ok()?;
        self.note(m, "read", Some(DomainKind::SharedRam), at, bytes.clone());
        Some(bytes)
    }

    fn write_slot(&mut self, m: &mut Machine, f: &FifoHandle, index: u64, bytes: &[u8]) {
        let at = f.slot_offset(index);
        if m.platform.write(Actor::Adversary, DomainKind::SharedRam, at, bytes).is_ok() {
            self.note(m, "write", Some(DomainKind::SharedRam), at, bytes.to_vec());
        }
    }

    fn apply(&mut self, m: &mut Machine, action: &Action) {
        m.platform.log("adversary", format!("{action:?}"));
        match action {
            Action::SnoopShared => self.snoop(m),
            Action::TamperFrame { session, fifo: sel, index, byte, xor } => {
                let Some((_, f)) = Self::handle(m, *session, *sel) else { return };
                let Ok((prod, cons)) = fifo::indices(&mut m.platform, Actor::Adversary, &f) else { return };
                let slot = cons + *index as u64;
                if slot >= prod {
                    self.note(m, "tamper-miss", None, 0, Vec::new());
                    return;
                }
                if let Some(mut bytes) = self.read_slot(m, &f, slot) {
                    bytes[*byte % FRAME_SIZE] ^= *xor;
                    self.write_slot(m, &f, slot, &bytes);
                }
            }
            Action::ReplayFrame { capture } => {
                let Some(c) = self.captures.get(*capture).cloned() else {
                    self.note(m, "replay-miss", None, 0, Vec::new());
                    return;
                };
                let Some((_, f)) = Self::handle(m, Some(c.session), c.fifo) else { return };
                if fifo::enqueue(&mut m.platform, Actor::Adversary, &f, &c.frame).is_ok() {
                    m.frames.injected += 1;
                    self.note(m, "replay", Some(DomainKind::SharedRam), f.base, c.frame.as_bytes().to_vec());
                }
            }
            Action::DropFrame { session, fifo: sel, index } => {
                let Some((_, f)) = Self::handle(m, *session, *sel) else { return };
                let Ok((prod, cons)) = fifo::indices(&mut m.platform, Actor::Adversary, &f) else { return };
                let victim = cons + *index as u64;
                if victim >= prod {
                    self.note(m, "drop-miss", None, 0, Vec::new());
                    return;
                }
                // Close the gap so the ring stays contiguous.
                for k in victim..prod - 1 {
                    if let Some(next) = self.read_slot(m, &f, k + 1) {
                        self.write_slot(m, &f, k, &next);
                    }
                }
                let at = f.producer_at();
                let _ = m.platform.write(Actor::Adversary, DomainKind::SharedRam, at, &(prod - 1).to_be_bytes());
                m.frames.removed += 1;
                self.note(m, "drop", Some(DomainKind::SharedRam), at, Vec::new());
            }
            Action::Reorder { session, fifo: sel, i, j } => {
                let Some((_, f)) = Self::handle(m, *session, *sel) else { return };
                let Ok((prod, cons)) = fifo::indices(&mut m.platform, Actor::Adversary, &f) else { return };
                let (a, b) = (cons + *i as u64, cons + *j as u64);
                if a >= prod || b >= prod {
                    self.note(m, "reorder-miss", None, 0, Vec::new());
                    return;
                }
                if let (Some(x), Some(y)) = (self.read_slot(m, &f, a), self.read_slot(m, &f, b)) {
                    self.write_slot(m, &f, a, &y);
                    self.write_slot(m, &f, b, &x);
                }
            }
            Action::FakeSmi { session, seq } => {
                let Some((id, pair)) = Self::target(m, *session) else { return };
                let guessed = m.fresh_key();
                let plain = PlainFrame {
                    session_id: id,
                    seq: *seq,
                    device: DeviceId::Clock.code(),
                    operation: Operation::Read as u8,
                    status: Status::Ok as u8,
                    payload: Vec::new(),
                };
                let Ok(forged) = frame::seal(&guessed, Direction::ToSsv, &plain) else { return };
                if fifo::enqueue(&mut m.platform, Actor::Adversary, &pair.to_ssv, &forged).is_ok() {
                    m.frames.injected += 1;
                    self.note(m, "forge", Some(DomainKind::SharedRam), pair.to_ssv.base, forged.as_bytes().to_vec());
                }
                let _ = m.smi(SmiSource::Software);
            }
            Action::FakeSsvHandshake => {
                m.set_impostor(measure(IMPOSTOR_IMAGE));
                self.note(m, "fake-ssv", None, 0, Vec::new());
            }
            Action::FakeEnclave => {
                let epid = Machine::epid_from(0xfe00 + self.trace.len() as u16);
                let e = m.create_enclave(epid, false);
                match Session::establish(m, e) {
                    Ok(mut s) => {
                        self.note(m, "fake-enclave-accepted", None, 0, Vec::new());
                        s.teardown(m);
                    }
                    Err(err) => {
                        self.detections.insert(err.kind().to_string());
                        self.note(m, "fake-enclave-rejected", None, 0, err.kind().as_bytes().to_vec());
                    }
                }
            }
            Action::ClockTamper { mutation } => {
                m.platform.tamper_clock(*mutation);
                self.clock_tampers.push(m.now());
                self.note(m, "clock-tamper", None, 0, format!("{mutation:?}").into_bytes());
            }
            Action::InjectNicFrame { tag, dst, payload } => {
                let src = Ipv4Addr::new(192, 0, 2, 66);
                let f = wire::udp_frame(
                    [0x02, 0xad, 0, 0, 0, 1],
                    wire::BROADCAST,
                    src,
                    *dst,
                    tag.unwrap_or([0x88, 4, 0xde, 0xad]),
                    (6666, 7),
                    payload.as_bytes(),
                );
                self.note(m, "inject", None, 0, f.clone());
                m.inject_wire(&f);
            }
            Action::Delay { session, duration_ns } => {
                self.delays.push(DelayRule { session: *session, duration_ns: *duration_ns });
                self.note(m, "delay", None, 0, Vec::new());
            }
            Action::CrossFlow { session } => self.cross_flow(m, *session),
            Action::ProbeProtected => {
                let mut domains = vec![DomainKind::Smram];
                domains.extend(m.ssv.sessions().map(|s| DomainKind::Epc(s.enclave)));
                for d in domains {
                    match m.platform.read(Actor::Adversary, d, 0, 64) {
                        Ok(b) => self.note(m, "protected-read", Some(d), 0, b),
                        Err(f) => self.note(m, "fault", Some(d), 0, f.to_string().into_bytes()),
                    }
                }
            }
        }
    }

    fn snoop(&mut self, m: &mut Machine) {
        let pairs: Vec<(u32, crate::channel::FifoPair)> = m.ssv.sessions().map(|s| (s.id, s.fifos)).collect();
        for (id, pair) in pairs {
            for (sel, f) in [(FifoSel::ToSsv, pair.to_ssv), (FifoSel::FromSsv, pair.from_ssv)] {
                let Ok((prod, cons)) = fifo::indices(&mut m.platform, Actor::Adversary, &f) else { continue };
                for k in cons..prod {
                    if let Some(bytes) = self.read_slot(m, &f, k) {
                        if let Ok(frame) = SealedFrame::from_bytes(&bytes) {
                            self.captures.push(Capture { session: id, fifo: sel, frame });
                        }
                    }
                }
            }
        }
    }

    fn cross_flow(&mut self, m: &mut Machine, session: Option<u32>) {
        let Some((victim_id, pair)) = Self::target(m, session) else { return };
        let Some(victim_epid) = m.ssv.session(victim_id).map(|s| s.epid) else { return };
        let victim_tag = tag_for(&victim_epid);
        if self.sibling.is_none() {
            let epid = Machine::epid_from(0xadad);
            let e = m.create_enclave(epid, true);
            let Ok(mut s) = Session::establish(m, e) else { return };
            let mut reg = tag_for(&epid).to_vec();
            reg.extend_from_slice(&SIBLING_IP.octets());
            if s.call(m, DeviceId::Nic, Operation::Probe, &reg).is_err() {
                return;
            }
            self.sibling = Some(s);
        }
        let mut sib = self.sibling.take().expect("sibling established");
        let frame = wire::udp_frame(
            [0x02, 0xad, 0, 0, 0, 2],
            wire::BROADCAST,
            SIBLING_IP,
            Ipv4Addr::new(10, 0, 0, 1),
            victim_tag,
            (4444, 7),
            b"cross-flow",
        );
        // Through its own session: the supervisor checks the tag against the sender.
        match sib.call(m, DeviceId::Nic, Operation::Write, &frame) {
            Ok(r) if r.status == Status::PolicyViolation as u8 => {
                self.note(m, "cross-flow-refused", None, 0, Vec::new());
            }
            Ok(_) => self.note(m, "cross-flow-accepted", None, 0, Vec::new()),
            Err(e) => self.note(m, "cross-flow-error", None, 0, e.kind().as_bytes().to_vec()),
        }
        // Into the victim's FIFO under the sibling's key.
        let plain = PlainFrame {
            session_id: victim_id,
            seq: 0,
            device: DeviceId::Nic.code(),
            operation: Operation::Write as u8,
            status: Status::Ok as u8,
            payload: frame,
        };
        let key = m.fresh_key();
        if let Ok(sealed) = frame::seal(&key, Direction::ToSsv, &plain) {
            if fifo::enqueue(&mut m.platform, Actor::Adversary, &pair.to_ssv, &sealed).is_ok() {
                m.frames.injected += 1;
                self.note(m, "cross-flow-inject", Some(DomainKind::SharedRam), pair.to_ssv.base, Vec::new());
                let _ = m.smi(SmiSource::Software);
            }
        }
        self.sibling = Some(sib);
    }

    /// Close the sibling session so its FIFOs and counters settle.
    pub fn finish(&mut self, m: &mut Machine) {
        if let Some(mut s) = self.sibling.take() {
            s.teardown(m);
        }
    }
}

/// Errors that count as the channel noticing an attack.
pub fn is_detection(e: &ChannelError) -> bool {
    !matches!(e, ChannelError::Timeout | ChannelError::Closed | ChannelError::FifoFull)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trigger_counts_are_per_kind() {
        let t = Trigger::ResponseReady { nth: 2 };
        assert!(!t.matches(&Hook::ResponseReady, 1, 0));
        assert!(t.matches(&Hook::ResponseReady, 2, 0));
        assert!(!t.matches(&Hook::Tick, 2, 0));
        assert!(Trigger::At { vt_ns: 5 }.matches(&Hook::Tick, 1, 5));
    }

    #[test]
    fn step_parses_from_toml() {
        #[derive(Deserialize)]
        struct W {
            steps: Vec<ScriptStep>,
        }
        let w: W = toml::from_str(
            r#"
            [[steps]]
            when = { on = "sample_taken", nth = 3 }
            action = { do = "clock_tamper", mutation = { kind = "shift", source = "Rtc", delta_ns = -3600000000000 } }
            [[steps]]
            when = { on = "start" }
            action = { do = "delay" }
            "#,
        )
        .unwrap();
        assert_eq!(w.steps.len(), 2);
        assert_eq!(w.steps[1].action, Action::Delay { session: None, duration_ns: None });
    }

    #[test]
    fn classification_prefers_expected_detection() {
        let mut o = Observed::default();
        o.detections.insert("AuthFail".into());
        o.detections.insert("ReplayOrReorder".into());
        o.timeouts = 1;
        let want = ExpectedOutcome::DetectedAs("ReplayOrReorder".into());
        assert!(o.holds(&want));
        assert!(!o.holds(&ExpectedOutcome::DegradedToDoS));
        o.silent_corruption = 1;
        assert!(!o.holds(&want));
    }

    #[test]
    fn timeouts_alone_are_dos() {
        let o = Observed { timeouts: 3, ..Default::default() };
        assert_eq!(o.classify(&ExpectedOutcome::NoEffect), ExpectedOutcome::DegradedToDoS);
        assert!(Observed::default().holds(&ExpectedOutcome::NoEffect));
    }
}

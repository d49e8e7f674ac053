//! One simulated host: the platform, the supervisor in SMRAM, the CA reached
//! out of band, the untrusted kernel's shared-memory allocator and, when a
//! scenario asks for one, the adversary sitting in the OS.

use std::collections::BTreeMap;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::adversary::{Adversary, Hook, HookVerdict};
use crate::channel::fifo::{self, SharedAllocator, DEFAULT_CAPACITY};
use crate::channel::{CertificateAuthority, Epid, SessionKey, SsvToken};
use crate::devices::DeviceId;
use crate::platform::{Actor, DomainKind, EnclaveId, Fault, Platform, PlatformConfig, SmiSource, Step};
use crate::ssv::{DropReason, Ssv, GENUINE_IMAGE};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MachineConfig {
    pub platform: PlatformConfig,
    pub fifo_capacity: usize,
    /// Virtual-time budget an enclave waits for a reply.
    pub timeout_ns: u64,
    pub seed: u64,
    /// Keep every SMRAM plaintext for leak audits.
    pub audit_plaintext: bool,
}

impl Default for MachineConfig {
    fn default() -> Self {
        MachineConfig {
            platform: PlatformConfig::default(),
            fifo_capacity: DEFAULT_CAPACITY,
            timeout_ns: 10_000_000,
            seed: 0,
            audit_plaintext: false,
        }
    }
}

/// Frame accounting outside the supervisor.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameCounters {
    pub enclave_sealed: u64,
    pub enclave_opened: u64,
    pub enclave_dropped: u64,
    /// Frames the adversary wrote into a FIFO.
    pub injected: u64,
    /// Frames the adversary removed from a FIFO.
    pub removed: u64,
    /// Frames still queued when a session was reset or torn down.
    pub discarded: u64,
}

/// `sealed + injected` on the left, `opened + dropped + in_flight` on the right.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conservation {
    pub sealed: u64,
    pub injected: u64,
    pub opened: u64,
    pub dropped: u64,
    pub in_flight: u64,
}

impl Conservation {
    pub fn holds(&self) -> bool {
        self.sealed + self.injected == self.opened + self.dropped + self.in_flight
    }
}

#[derive(Clone, Copy, Debug)]
struct HeldSmi {
    session: Option<u32>,
    release_at: Option<u64>,
}

pub struct Machine {
    pub platform: Platform,
    pub ssv: Ssv,
    pub ca: CertificateAuthority,
    pub shared: SharedAllocator,
    pub adversary: Option<Adversary>,
    pub frames: FrameCounters,
    /// Frames the OS network path received.
    pub os_rx: Vec<Vec<u8>>,
    config: MachineConfig,
    rng: ChaCha20Rng,
    held: Vec<HeldSmi>,
    impostor: Option<SsvToken>,
    enclaves: BTreeMap<EnclaveId, Epid>,
    next_enclave: EnclaveId,
}

impl Machine {
    pub fn new(config: MachineConfig) -> Self {
        let platform = Platform::new(config.platform.clone());
        let mut ssv = Ssv::new(GENUINE_IMAGE);
        if config.audit_plaintext {
            ssv.audit = Some(Vec::new());
        }
        Machine {
            shared: SharedAllocator::new(config.platform.shared_size),
            ca: CertificateAuthority::new(GENUINE_IMAGE),
            ssv,
            platform,
            adversary: None,
            frames: FrameCounters::default(),
            os_rx: Vec::new(),
            rng: ChaCha20Rng::seed_from_u64(config.seed),
            held: Vec::new(),
            impostor: None,
            enclaves: BTreeMap::new(),
            next_enclave: 1,
            config,
        }
    }

    pub fn config(&self) -> &MachineConfig {
        &self.config
    }

    pub fn now(&self) -> u64 {
        self.platform.now()
    }

    /// Create an enclave with its own EPC. `register` controls whether the CA
    /// knows its identity.
    pub fn create_enclave(&mut self, epid: Epid, register: bool) -> EnclaveId {
        let id = self.next_enclave;
        self.next_enclave += 1;
        self.platform.create_enclave(id);
        self.enclaves.insert(id, epid);
        if register {
            self.ca.register(epid);
        }
        self.platform.log("machine", format!("enclave {id} created"));
        id
    }

    /// Identity derived from a small number, for scenarios and tests.
    pub fn epid_from(n: u16) -> Epid {
        let mut e = [0u8; 16];
        e[0] = 0xe9;
        e[14..].copy_from_slice(&n.to_be_bytes());
        e
    }

    pub fn epid_of(&self, enclave: EnclaveId) -> Option<Epid> {
        self.enclaves.get(&enclave).copied()
    }

    /// Key material generated inside an enclave.
    pub fn fresh_key(&mut self) -> SessionKey {
        let mut k = [0u8; 32];
        self.rng.fill_bytes(&mut k);
        k
    }

    pub fn rng(&mut self) -> &mut ChaCha20Rng {
        &mut self.rng
    }

    /// Run `f` inside an SMI without request dispatch (out-of-band key install).
    pub fn with_smm<T>(&mut self, f: impl FnOnce(&mut Platform, &mut Ssv) -> T) -> Result<T, Fault> {
        self.platform.trigger_smi(SmiSource::Software)?;
        let out = f(&mut self.platform, &mut self.ssv);
        self.platform.rsm()?;
        Ok(out)
    }

    /// Enter SMM, dispatch, return. Device interrupts raised meanwhile are
    /// serviced afterwards.
    pub fn smi(&mut self, source: SmiSource) -> Result<(), Fault> {
        self.platform.trigger_smi(source)?;
        self.run_handler();
        self.drain_latched();
        Ok(())
    }

    fn run_handler(&mut self) {
        let costs = self.platform.costs().clone();
        self.platform.charge("Switch to SMM", costs.smm_switch, None);
        self.ssv.dispatch(&mut self.platform);
        if costs.smm_extra_stall > 0 {
            self.platform.advance(costs.smm_extra_stall);
        }
        self.platform.charge("Return and enter SGX", costs.return_to_enclave, None);
        self.platform.rsm().expect("handler runs in SMM");
        self.hook(Hook::ResponseReady);
    }

    fn drain_latched(&mut self) {
        // A device interrupt may already have switched the CPU into SMM;
        // interrupts arriving while in SMM are latched and serviced one by one.
        loop {
            if self.platform.mode().is_smm() {
                self.run_handler();
                continue;
            }
            let Some(src) = self.platform.take_latched_smi() else { break };
            if self.platform.trigger_smi(src).is_ok() {
                self.run_handler();
            }
        }
    }

    /// The OS driver forwarding an enclave's SMI request (an IOCTL that writes
    /// the SMI command port). The adversary may hold it back.
    pub fn request_smi(&mut self, session: Option<u32>) {
        match self.hook(Hook::SmiRequested { session }) {
            HookVerdict::Pass => {
                let _ = self.smi(SmiSource::Software);
            }
            HookVerdict::Hold { release_at } => {
                self.platform.log("os", "smi request held");
                self.held.push(HeldSmi { session, release_at });
            }
        }
    }

    /// Let everything that is due happen: held SMIs, latched SMIs, the OS
    /// interrupt path and time-triggered adversary steps.
    pub fn pump(&mut self) {
        self.hook(Hook::Tick);
        let now = self.now();
        let due: Vec<usize> =
            (0..self.held.len()).filter(|&i| self.held[i].release_at.is_some_and(|t| t <= now)).collect();
        for i in due.into_iter().rev() {
            self.held.remove(i);
            let _ = self.smi(SmiSource::Software);
        }
        self.drain_latched();
        self.service_os();
    }

    /// The untrusted OS handling its interrupt queue.
    pub fn service_os(&mut self) {
        let vectors = self.platform.take_os_interrupts();
        for v in vectors {
            if let Some(idx) = self.platform.nics.iter().position(|n| n.config.vector == v) {
                if let Ok(frames) = self.platform.os_drain_rx(idx) {
                    self.os_rx.extend(frames);
                }
            }
        }
    }

    pub fn held_smis(&self) -> usize {
        self.held.len()
    }

    /// Sessions whose SMI requests are currently held.
    pub fn held_sessions(&self) -> Vec<Option<u32>> {
        self.held.iter().map(|h| h.session).collect()
    }

    /// Token answering the next handshake SMI. An adversary emulating the
    /// supervisor answers exactly one handshake with its own measurement.
    pub fn handshake_token(&mut self) -> SsvToken {
        self.impostor.take().unwrap_or_else(|| self.ssv.token())
    }

    pub fn set_impostor(&mut self, token: SsvToken) {
        self.impostor = Some(token);
    }

    /// Release every SMI the adversary is holding.
    pub fn release_held(&mut self) {
        for h in &mut self.held {
            h.release_at = Some(0);
        }
    }

    pub fn hook(&mut self, hook: Hook) -> HookVerdict {
        let Some(mut adv) = self.adversary.take() else {
            return HookVerdict::Pass;
        };
        let verdict = adv.on_hook(self, hook);
        self.adversary = Some(adv);
        verdict
    }

    /// Workflow steps since `from` that belong to request `(session, seq)`.
    pub fn workflow_trace(&self, from: usize, session: u32, seq: u64) -> Vec<Step> {
        let served = self.ssv.served.get(&(session, seq)).copied();
        self.platform.steps()[from.min(self.platform.steps_len())..]
            .iter()
            .filter(|s| s.req == Some((session, seq)) || (s.req.is_none() && s.smi != 0 && Some(s.smi) == served))
            .filter(|s| s.label != "RX scan")
            .cloned()
            .collect()
    }

    /// Frames sitting in every live session's FIFOs, read from raw memory.
    pub fn in_flight(&self) -> u64 {
        let shared = self.platform.inspect(DomainKind::SharedRam).expect("shared RAM");
        let rd = |at: usize| u64::from_be_bytes(shared[at..at + 8].try_into().unwrap());
        self.ssv
            .sessions()
            .flat_map(|s| [s.fifos.to_ssv, s.fifos.from_ssv])
            .map(|f| rd(f.producer_at()).saturating_sub(rd(f.consumer_at())).min(f.capacity as u64))
            .sum()
    }

    pub fn conservation(&self) -> Conservation {
        let s = &self.ssv.stats;
        Conservation {
            sealed: self.frames.enclave_sealed + s.sealed,
            injected: self.frames.injected,
            opened: self.frames.enclave_opened + s.opened,
            // Flow-spoof rejections happen after a successful open.
            dropped: self.frames.enclave_dropped + s.total_dropped() - s.drops(DropReason::FlowSpoof)
                + self.frames.removed
                + self.frames.discarded,
            in_flight: self.in_flight(),
        }
    }

    /// Queued frames of one FIFO pair, for discard accounting.
    pub fn queued(&mut self, pair: &crate::channel::FifoPair) -> u64 {
        let a = fifo::len(&mut self.platform, Actor::Os, &pair.to_ssv).unwrap_or(0);
        let b = fifo::len(&mut self.platform, Actor::Os, &pair.from_ssv).unwrap_or(0);
        (a + b) as u64
    }

    /// Transmit on behalf of the OS's own network stack.
    pub fn os_send(&mut self, frame: &[u8]) -> Result<(), crate::platform::NicOpError> {
        self.platform.nic_tx(Actor::Os, 0, frame)?;
        self.pump();
        Ok(())
    }

    /// A frame arriving from the wire.
    pub fn inject_wire(&mut self, frame: &[u8]) -> bool {
        let ok = self.platform.nic_inject(0, frame).unwrap_or(false);
        self.pump();
        ok
    }

    pub fn device_code(d: DeviceId) -> u8 {
        d.code()
    }
}

//! Scenario execution: victim workloads, attack runs and the checks applied
//! after every run.

use std::net::Ipv4Addr;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::report::{BreakdownRow, Report, Verdict};
use super::{corpus, Workload};
use crate::adversary::{is_detection, Adversary, AttackScript, ExpectedOutcome, Hook, Observed};
use crate::channel::{ChannelError, Operation, Reply, RequestMode, Session};
use crate::devices::DeviceId;
use crate::machine::{Conservation, Machine, MachineConfig};
use crate::net::{NetError, Network, Protocol, RxMode};
use crate::platform::Step;
use crate::ssv::drivers::ClockSnapshot;
use crate::ssv::DropReason;
use crate::time_tss::{TimeConfig, TimeError, TimeService, TimeValue};

/// Step labels of one immediate request, in workflow order. Step 6 is the
/// device service.
pub const WORKFLOW: [&str; 11] = [
    "EPC encryption",
    "Copy to shared RAM",
    "Switch to SMM",
    "Copy to SMRAM",
    "SMRAM decryption",
    "Clock Service",
    "SMRAM encryption",
    "Copy to shared RAM",
    "Return and enter SGX",
    "Copy to EPC",
    "EPC decryption",
];

/// True when `trace` is the eleven-step workflow with `service` at step 6.
pub fn is_workflow(trace: &[Step], service: &str) -> bool {
    trace.len() == WORKFLOW.len()
        && trace.iter().zip(WORKFLOW).enumerate().all(|(i, (s, want))| if i == 5 { s.label == service } else { s.label == want })
}

/// Attack runs need a samples-after-tamper window this small to count.
pub const MAX_DETECTION_SAMPLES: usize = 2;

const WORKLOAD_SALT: u64 = 0x776f_726b_6c6f_6164;
const VICTIM_IP: Ipv4Addr = Ipv4Addr::new(10, 0, 0, 1);
const PEER_IP: Ipv4Addr = Ipv4Addr::new(10, 0, 0, 2);

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum HarnessError {
    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    #[serde(default)]
    pub description: String,
    #[serde(default)]
    pub seed: u64,
    /// Platform memory sizes, device frequencies and the cost table.
    #[serde(default)]
    pub machine: MachineConfig,
    #[serde(default)]
    pub workloads: Vec<Workload>,
    /// Names of shipped attack scripts, each run against its own victim.
    #[serde(default)]
    pub attacks: Vec<String>,
    /// Minimum virtual time the scenario lasts.
    #[serde(default)]
    pub duration_ns: u64,
}

impl Scenario {
    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        let s: Scenario = toml::from_str(text).map_err(|e| HarnessError::ConfigInvalid(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::ConfigInvalid(m));
        if self.name.trim().is_empty() {
            return bad("scenario needs a name".into());
        }
        if self.machine.fifo_capacity == 0 || self.machine.timeout_ns == 0 {
            return bad("fifo_capacity and timeout_ns must be positive".into());
        }
        for w in &self.workloads {
            match w {
                Workload::Time { min_interval_ns, max_interval_ns, .. } if min_interval_ns > max_interval_ns => {
                    return bad("time workload interval bounds are reversed".into())
                }
                Workload::Batch { batch: 0, .. } => return bad("batch size must be at least 1".into()),
                Workload::Batch { batch, .. } if *batch > self.machine.fifo_capacity => {
                    return bad(format!("batch {batch} exceeds the FIFO capacity"))
                }
                Workload::Net { size, .. } if *size == 0 || *size > 8192 => {
                    return bad(format!("datagram size {size} outside 1..=8192"))
                }
                _ => {}
            }
        }
        for a in &self.attacks {
            if corpus::attack(a).is_none() {
                return bad(format!("unknown attack script {a}"));
            }
        }
        Ok(())
    }
}

/// What a workload produced besides the observations.
#[derive(Clone, Debug, Default)]
pub struct WorkloadResult {
    /// `(virtual time, verdict ok, value)` per trusted-time sample.
    pub samples: Vec<(u64, bool, TimeValue)>,
    /// Workflow traces of immediate requests.
    pub traces: Vec<Vec<Step>>,
    pub replies: u64,
    pub datagrams: u64,
}

fn note_channel(obs: &mut Observed, e: &ChannelError) {
    if *e == ChannelError::Timeout {
        obs.timeouts += 1;
    } else if is_detection(e) {
        obs.detections.insert(e.kind().to_string());
    }
}

fn note_time(obs: &mut Observed, e: &TimeError) {
    match e {
        TimeError::Channel(c) => note_channel(obs, c),
        TimeError::AttackDetected(_) => {
            obs.detections.insert("TimeVerdict".into());
        }
        other => {
            obs.detections.insert(format!("{other:?}"));
        }
    }
}

fn note_net(obs: &mut Observed, e: &NetError) {
    match e {
        NetError::Channel(c) => note_channel(obs, c),
        NetError::Time(t) => note_time(obs, t),
        NetError::Timeout => obs.timeouts += 1,
        other => {
            obs.detections.insert(other.kind().to_string());
        }
    }
}

/// Establish a session; a rejected handshake is noted and retried once.
fn establish(m: &mut Machine, n: u16, obs: &mut Observed) -> Option<Session> {
    let e = m.create_enclave(Machine::epid_from(n), true);
    for _ in 0..2 {
        match Session::establish(m, e) {
            Ok(s) => return Some(s),
            Err(err) => note_channel(obs, &err),
        }
    }
    None
}

fn think(m: &mut Machine, ns: u64) {
    m.platform.charge("Think time", ns, None);
    m.pump();
}

pub fn run_workload(m: &mut Machine, w: &Workload, rng: &mut ChaCha20Rng, obs: &mut Observed) -> WorkloadResult {
    let mut r = WorkloadResult::default();
    match w {
        Workload::Time { samples, min_interval_ns, max_interval_ns } => {
            let Some(mut s) = establish(m, 1, obs) else { return r };
            match TimeService::new(m, &mut s, TimeConfig::default()) {
                Ok(mut ts) => {
                    for _ in 0..*samples {
                        think(m, rng.gen_range(*min_interval_ns..=*max_interval_ns));
                        match ts.now(m, &mut s) {
                            Ok(now) => {
                                r.samples.push((m.now(), now.verdict.ok, now.value));
                                r.traces.push(s.last_trace.clone());
                                r.replies += 1;
                            }
                            Err(e) => {
                                note_time(obs, &e);
                                break;
                            }
                        }
                    }
                }
                Err(e) => note_time(obs, &e),
            }
            s.teardown(m);
        }
        Workload::Batch { requests, batch } => {
            let Some(mut s) = establish(m, 1, obs) else { return r };
            for _ in 0..*requests {
                match s.request(m, DeviceId::Clock, Operation::Read, &[], RequestMode::Batched(*batch)) {
                    Ok(Reply::Queued { .. }) => {}
                    Ok(Reply::Ready(x)) => check_clock_reply(&x, obs, &mut r),
                    Ok(Reply::Batch(v)) => v.iter().for_each(|x| check_clock_reply(x, obs, &mut r)),
                    Err(e) => {
                        note_channel(obs, &e);
                        break;
                    }
                }
            }
            s.teardown(m);
        }
        Workload::Net { datagrams, size } => {
            let mut net = Network::new();
            net.budget_ns = m.config().timeout_ns * 10;
            let victim = match net.spawn(m, 1, VICTIM_IP, RxMode::Notify) {
                Ok(v) => v,
                Err(e) => {
                    note_net(obs, &e);
                    return r;
                }
            };
            let peer = match net.spawn(m, 2, PEER_IP, RxMode::Notify) {
                Ok(p) => p,
                Err(e) => {
                    note_net(obs, &e);
                    return r;
                }
            };
            let srv = net.socket(peer, Protocol::Udp);
            let cli = net.socket(victim, Protocol::Udp);
            if let Err(e) = net.bind(peer, srv, 7) {
                note_net(obs, &e);
            }
            for _ in 0..*datagrams {
                let mut msg = vec![0u8; *size];
                rng.fill_bytes(&mut msg);
                let round = (|| -> Result<Vec<u8>, NetError> {
                    net.sendto(m, victim, cli, (PEER_IP, 7), &msg)?;
                    let (from, got) = net.recvfrom(m, peer, srv)?;
                    net.sendto(m, peer, srv, from, &got)?;
                    Ok(net.recvfrom(m, victim, cli)?.1)
                })();
                match round {
                    Ok(back) if back == msg => r.datagrams += 1,
                    Ok(_) => obs.silent_corruption += 1,
                    Err(e) => {
                        note_net(obs, &e);
                        break;
                    }
                }
            }
            for s in &mut net.stacks {
                s.shutdown(m);
            }
        }
        Workload::Idle => {}
    }
    r
}

fn check_clock_reply(x: &crate::channel::Response, obs: &mut Observed, r: &mut WorkloadResult) {
    r.replies += 1;
    if x.is_ok() && ClockSnapshot::decode(&x.payload).is_none() {
        obs.silent_corruption += 1;
    }
}

/// Supervisor drop counters, as detection kinds.
fn supervisor_detections(m: &Machine, obs: &mut Observed) {
    for (reason, n) in &m.ssv.stats.dropped {
        if *n > 0 && *reason != DropReason::FifoFull {
            obs.detections.insert(format!("{reason:?}"));
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackRun {
    pub name: String,
    pub seed: u64,
    pub expected: ExpectedOutcome,
    pub outcome: ExpectedOutcome,
    pub observed: Observed,
    pub holds: bool,
    pub conservation: Conservation,
    pub hygiene_violations: usize,
    /// Frames the OS network path received.
    pub os_frames: usize,
    /// Records in the adversary's observation trace.
    pub observations: usize,
    /// Samples between the clock tamper and the first failed verdict.
    pub detection_samples: Option<usize>,
}

/// Run one attack script against a fresh machine and its victim workload.
pub fn run_attack(script: &AttackScript, seed: u64) -> AttackRun {
    let mut m = Machine::new(MachineConfig { seed, ..MachineConfig::default() });
    m.adversary = Some(Adversary::from_script(script));
    m.hook(Hook::Start);
    let mut rng = ChaCha20Rng::seed_from_u64(seed ^ WORKLOAD_SALT);
    let mut obs = Observed::default();
    let result = run_workload(&mut m, &script.victim, &mut rng, &mut obs);
    let mut adv = m.adversary.take().expect("adversary installed");
    adv.finish(&mut m);
    m.release_held();
    obs.detections.extend(adv.detections.iter().cloned());
    supervisor_detections(&m, &mut obs);

    // A failed verdict only counts if it came soon after the tamper.
    let mut detection_samples = None;
    let failed = |s: &&(u64, bool, TimeValue)| !s.1;
    match adv.clock_tampers.first() {
        Some(&t) => {
            let after: Vec<_> = result.samples.iter().filter(|s| s.0 > t).collect();
            detection_samples = after.iter().position(&failed).map(|i| i + 1);
            if detection_samples.is_some_and(|n| n <= MAX_DETECTION_SAMPLES) {
                obs.detections.insert("TimeVerdict".into());
            } else {
                obs.detections.remove("TimeVerdict");
            }
        }
        None => {
            if result.samples.iter().any(|s| failed(&s)) {
                obs.detections.insert("TimeVerdict".into());
            }
        }
    }

    let conservation = m.conservation();
    let hygiene_violations = m.ssv.hygiene.len();
    let outcome = obs.classify(&script.expected);
    let holds = obs.holds(&script.expected) && conservation.holds() && hygiene_violations == 0;
    AttackRun {
        name: script.name.clone(),
        seed,
        expected: script.expected.clone(),
        outcome,
        observed: obs,
        holds,
        conservation,
        hygiene_violations,
        os_frames: m.os_rx.len(),
        observations: adv.trace.len(),
        detection_samples,
    }
}

/// Mean cost per workflow step over the well-formed traces.
pub fn breakdown(traces: &[Vec<Step>]) -> Vec<BreakdownRow> {
    let good: Vec<&Vec<Step>> = traces.iter().filter(|t| t.len() == WORKFLOW.len()).collect();
    if good.is_empty() {
        return Vec::new();
    }
    (0..WORKFLOW.len())
        .map(|i| BreakdownRow {
            step: i + 1,
            label: good[0][i].label.clone(),
            mean_ns: good.iter().map(|t| t[i].cost_ns).sum::<u64>() / good.len() as u64,
        })
        .collect()
}

pub fn event_log_digest(m: &Machine) -> String {
    format!("{:x}", Sha256::digest(m.platform.event_log_bytes()))
}

/// Machine-wide counters shared by every report.
pub fn machine_counters(m: &Machine, report: &mut Report) {
    let c = &m.platform.counters;
    let cons = m.conservation();
    report.count("smis", c.smis);
    report.count("smis_software", c.software_smis);
    report.count("smis_device", c.device_smis);
    report.count("faults", c.faults);
    report.count("frames_sealed", cons.sealed);
    report.count("frames_injected", cons.injected);
    report.count("frames_opened", cons.opened);
    report.count("frames_dropped", cons.dropped);
    report.count("frames_in_flight", cons.in_flight);
    report.count("conservation_holds", u64::from(cons.holds()));
    report.count("hygiene_violations", m.ssv.hygiene.len() as u64);
    report.count("ssv_dispatches", m.ssv.stats.dispatches);
    report.count("ssv_requests", m.ssv.stats.requests);
    report.count("ssv_events", m.ssv.stats.events);
    report.count("forwarded_to_os", m.ssv.stats.forwarded_to_os);
}

/// Execute a scenario: its workloads on one machine, then each listed attack
/// on a machine of its own.
pub fn run(scenario: &Scenario) -> Result<Report, HarnessError> {
    scenario.validate()?;
    let mut cfg = scenario.machine.clone();
    cfg.seed = scenario.seed;
    let mut m = Machine::new(cfg);
    let mut rng = ChaCha20Rng::seed_from_u64(scenario.seed ^ WORKLOAD_SALT);
    let mut obs = Observed::default();
    let mut report = Report::new(&scenario.name, scenario.seed);
    let mut traces = Vec::new();
    let mut false_positives = 0;
    let mut backwards = 0;
    for w in &scenario.workloads {
        let r = run_workload(&mut m, w, &mut rng, &mut obs);
        false_positives += r.samples.iter().filter(|s| !s.1).count() as u64;
        backwards += r.samples.windows(2).filter(|p| p[1].2.as_micros() < p[0].2.as_micros()).count() as u64;
        report.count("replies", r.replies);
        report.count("datagrams_echoed", r.datagrams);
        report.count("time_samples", r.samples.len() as u64);
        traces.extend(r.traces);
    }
    if m.now() < scenario.duration_ns {
        let rest = scenario.duration_ns - m.now();
        think(&mut m, rest);
    }
    supervisor_detections(&m, &mut obs);
    report.count("time_false_positives", false_positives);
    report.count("time_went_backwards", backwards);
    report.count("timeouts", obs.timeouts);
    report.count("detections", obs.detections.len() as u64);
    report.count("silent_corruption", obs.silent_corruption);
    report.count("workflow_mismatches", traces.iter().filter(|t| !is_workflow(t, "Clock Service")).count() as u64);
    report.breakdown = breakdown(&traces);
    report.workflow = traces.first().map(|t| t.iter().map(|s| s.label.clone()).collect()).unwrap_or_default();
    machine_counters(&m, &mut report);
    report.event_log_sha256 = event_log_digest(&m);
    for name in &scenario.attacks {
        let script = corpus::attack(name).ok_or_else(|| HarnessError::ConfigInvalid(format!("unknown attack script {name}")))?;
        let a = run_attack(&script, scenario.seed);
        report.verdicts.insert(name.clone(), Verdict { expected: a.expected.to_string(), observed: a.outcome.to_string(), holds: a.holds });
    }
    Ok(report)
}

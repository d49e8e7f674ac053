//! Enclave-side trusted time.
//!
//! Every sample is one coherent snapshot of all clock sources taken by the
//! supervisor in SMM. The RTC gives whole seconds, the HPET the
//! microseconds: HPET ticks are anchored to an RTC second rollover observed
//! when a read collides with the RTC update cycle. Before such a rollover has
//! been seen the microseconds are HPET modulo one second and flagged
//! low-confidence.
//!
//! The validator applies two rules between consecutive samples: each source
//! must move forward (the monotonic rule) and every pair of sources must
//! agree on the elapsed time within a tolerance (the rate cross-check).

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adversary::Hook;
use crate::channel::{ChannelError, Operation, Session};
use crate::devices::{ClockBank, ClockConfig, ClockSource, DeviceId, RawReading, RtcTime};
use crate::machine::Machine;
use crate::ssv::drivers::ClockSnapshot;

const FS_PER_SEC: i128 = 1_000_000_000_000_000;
const FS_PER_US: i128 = 1_000_000_000;
/// Re-anchor only when a fresh rollover disagrees with the anchor by more.
const REANCHOR_THRESHOLD_FS: i128 = 1_000_000_000_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TimeValue {
    pub tv_sec: i64,
    /// Always in `0..1_000_000`.
    pub tv_usec: u32,
}

impl TimeValue {
    pub fn from_micros(us: i128) -> Self {
        TimeValue { tv_sec: us.div_euclid(1_000_000) as i64, tv_usec: us.rem_euclid(1_000_000) as u32 }
    }

    pub fn as_micros(&self) -> i128 {
        i128::from(self.tv_sec) * 1_000_000 + i128::from(self.tv_usec)
    }
}

/// One coherent snapshot of every clock source.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClockSample {
    pub present: u8,
    /// RTC reads the supervisor needed; above one means the read collided
    /// with an update cycle and the value was latched just after a rollover.
    pub rtc_reads: u8,
    /// Raw register values indexed by [`ClockSource::index`]; RTC as Unix
    /// seconds, PIT and APIC as down-counts.
    pub values: [u64; 5],
    /// TSC value at each source's latch.
    pub tsc_at_latch: [u64; 5],
    /// Virtual time the reply arrived. Simulation bookkeeping only.
    pub sampled_at: u64,
}

impl ClockSample {
    pub fn from_snapshot(s: &ClockSnapshot, sampled_at: u64) -> Self {
        ClockSample { present: s.present, rtc_reads: s.rtc_reads, values: s.values, tsc_at_latch: s.tsc_at_latch, sampled_at }
    }

    pub fn has(&self, s: ClockSource) -> bool {
        self.present & (1 << s.index()) != 0
    }

    pub fn value(&self, s: ClockSource) -> u64 {
        self.values[s.index()]
    }

    pub fn rtc_secs(&self) -> i64 {
        self.value(ClockSource::Rtc) as i64
    }

    pub fn rtc_calendar(&self) -> RtcTime {
        RtcTime::from_unix(self.rtc_secs())
    }

    pub fn hpet_ticks(&self) -> u64 {
        self.value(ClockSource::Hpet)
    }

    pub fn tsc_ticks(&self) -> u64 {
        self.value(ClockSource::Tsc)
    }

    /// Build the snapshot the clock driver would return at `vt`, latching
    /// sources `spacing_ns` apart in driver order. Ignores the RTC update
    /// cycle. Used as an oracle by tests.
    pub fn synthesize(bank: &ClockBank, vt: u64, spacing_ns: u64) -> Self {
        let mut s = ClockSample { present: 0, rtc_reads: 1, values: [0; 5], tsc_at_latch: [0; 5], sampled_at: vt };
        for (k, src) in ClockSource::ALL.into_iter().enumerate() {
            if !bank.is_present(src) {
                continue;
            }
            let at = vt + k as u64 * spacing_ns;
            s.present |= 1 << src.index();
            s.values[src.index()] = match bank.raw(src, at) {
                RawReading::Rtc(t) => t.to_unix() as u64,
                RawReading::Hpet(v) | RawReading::Tsc(v) => v,
                RawReading::Pit(v) => u64::from(v),
                RawReading::Apic(v) => u64::from(v),
            };
            if let RawReading::Tsc(t) = bank.raw(ClockSource::Tsc, at) {
                s.tsc_at_latch[src.index()] = t;
            }
        }
        s
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Rule {
    Monotonic,
    RateMismatch,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub source: ClockSource,
    pub prev: u64,
    pub curr: u64,
    pub rule: Rule,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimeVerdict {
    pub ok: bool,
    pub violations: Vec<Violation>,
}

impl TimeVerdict {
    fn from(violations: Vec<Violation>) -> Self {
        TimeVerdict { ok: violations.is_empty(), violations }
    }

    pub fn names(&self, source: ClockSource, rule: Rule) -> bool {
        self.violations.iter().any(|v| v.source == source && v.rule == rule)
    }
}

/// Elapsed time of one source between two samples, in femtoseconds.
#[derive(Clone, Copy, Debug)]
struct Elapsed {
    source: ClockSource,
    fs: i128,
    quantum_fs: i128,
}

fn ticks_elapsed(cfg: &ClockConfig, src: ClockSource, prev: u64, curr: u64) -> i128 {
    match cfg.wrap_ticks(src) {
        // Down-counters: assume at most one wrap.
        Some(reload) => {
            let reload = i128::from(reload);
            (i128::from(prev) - i128::from(curr)).rem_euclid(reload)
        }
        None => i128::from(curr) - i128::from(prev),
    }
}

/// Apply the monotonic rule and the rate cross-check to `new` against the
/// most recent sample in `history`.
pub fn validate(history: &[ClockSample], new: &ClockSample, cfg: &ClockConfig, tolerance: f64) -> TimeVerdict {
    let Some(prev) = history.last() else {
        return TimeVerdict::from(Vec::new());
    };
    let present: Vec<ClockSource> = ClockSource::ALL.into_iter().filter(|s| prev.has(*s) && new.has(*s)).collect();
    let mut violations = Vec::new();

    // Reference span for deciding whether a down-counter interval is readable.
    let reference_fs = [ClockSource::Hpet, ClockSource::Tsc]
        .into_iter()
        .filter(|s| present.contains(s))
        .map(|s| ticks_elapsed(cfg, s, prev.value(s), new.value(s)) * cfg.tick_fs(s) as i128)
        .max();

    let mut elapsed = Vec::new();
    for &src in &present {
        let (p, c) = (prev.value(src), new.value(src));
        let tick = cfg.tick_fs(src) as i128;
        let ticks = ticks_elapsed(cfg, src, p, c);
        let informative = match (cfg.wrap_ticks(src), reference_fs) {
            (Some(reload), Some(r)) => r < i128::from(reload) * tick / 2,
            (Some(_), None) => false,
            (None, _) => true,
        };
        if !informative {
            continue;
        }
        let forward = match src {
            ClockSource::Rtc => ticks >= 0,
            _ => ticks > 0,
        };
        if !forward {
            violations.push(Violation { source: src, prev: p, curr: c, rule: Rule::Monotonic });
        }
        elapsed.push(Elapsed { source: src, fs: ticks * tick, quantum_fs: tick });
    }

    let tsc_fs = present.contains(&ClockSource::Tsc).then(|| cfg.tick_fs(ClockSource::Tsc) as i128);
    let offset = |s: &ClockSample, src: ClockSource| i128::from(s.tsc_at_latch[src.index()]);
    let mut mismatches: Vec<(ClockSource, ClockSource)> = Vec::new();
    for (i, a) in elapsed.iter().enumerate() {
        for b in &elapsed[i + 1..] {
            // Shift b's interval onto a's latch instants using the TSC.
            let skew = tsc_fs.map_or(0, |t| {
                ((offset(new, b.source) - offset(new, a.source)) - (offset(prev, b.source) - offset(prev, a.source))) * t
            });
            let diff = (b.fs - skew - a.fs).abs();
            let scale = a.fs.abs().max((b.fs - skew).abs());
            let allowed = (scale as f64 * tolerance) as i128 + a.quantum_fs + b.quantum_fs;
            if diff > allowed {
                mismatches.push((a.source, b.source));
            }
        }
    }
    if !mismatches.is_empty() {
        let mut counts = [0usize; 5];
        for (a, b) in &mismatches {
            counts[a.index()] += 1;
            counts[b.index()] += 1;
        }
        let max = *counts.iter().max().unwrap();
        let blamed: Vec<ClockSource> = if max >= 2 {
            ClockSource::ALL.into_iter().filter(|s| counts[s.index()] == max).collect()
        } else {
            ClockSource::ALL.into_iter().filter(|s| counts[s.index()] > 0).collect()
        };
        for src in blamed {
            violations.push(Violation { source: src, prev: prev.value(src), curr: new.value(src), rule: Rule::RateMismatch });
        }
    }
    TimeVerdict::from(violations)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Confidence {
    /// Microseconds anchored to an observed RTC rollover.
    Anchored,
    /// No rollover seen yet: microseconds are HPET modulo one second.
    LowConfidence,
    /// No RTC on the board: time relative to the first sample.
    Reference,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
struct Anchor {
    secs: i64,
    /// HPET position of that second's start, in femtoseconds of HPET time.
    hpet_fs: i128,
}

/// Turn one sample into a time value.
///
/// `tv_sec` comes from the RTC; `tv_usec` is HPET time since the start of
/// that second, clamped into range.
fn assemble(cfg: &ClockConfig, anchor: Option<&Anchor>, origin: Option<&ClockSample>, s: &ClockSample) -> (TimeValue, Confidence) {
    let hpet_fs = i128::from(s.hpet_ticks()) * cfg.tick_fs(ClockSource::Hpet) as i128;
    if !s.has(ClockSource::Rtc) {
        let base = origin.map_or(0, |o| i128::from(o.hpet_ticks()) * cfg.tick_fs(ClockSource::Hpet) as i128);
        return (TimeValue::from_micros((hpet_fs - base).div_euclid(FS_PER_US)), Confidence::Reference);
    }
    let secs = s.rtc_secs();
    match anchor {
        Some(a) => {
            let boundary = a.hpet_fs + i128::from(secs - a.secs) * FS_PER_SEC;
            let us = (hpet_fs - boundary).div_euclid(FS_PER_US).clamp(0, 999_999);
            (TimeValue { tv_sec: secs, tv_usec: us as u32 }, Confidence::Anchored)
        }
        None => {
            let us = hpet_fs.rem_euclid(FS_PER_SEC).div_euclid(FS_PER_US);
            (TimeValue { tv_sec: secs, tv_usec: us as u32 }, Confidence::LowConfidence)
        }
    }
}

/// HPET position of the rollover a colliding RTC read waited for.
fn rollover(cfg: &ClockConfig, s: &ClockSample) -> Option<Anchor> {
    if s.rtc_reads < 2 || !s.has(ClockSource::Rtc) || !s.has(ClockSource::Hpet) {
        return None;
    }
    let hpet_fs = i128::from(s.hpet_ticks()) * cfg.tick_fs(ClockSource::Hpet) as i128;
    // Move the HPET reading back to the RTC latch instant.
    let back = if s.has(ClockSource::Tsc) {
        let d = i128::from(s.tsc_at_latch[ClockSource::Hpet.index()]) - i128::from(s.tsc_at_latch[ClockSource::Rtc.index()]);
        d * cfg.tick_fs(ClockSource::Tsc) as i128
    } else {
        0
    };
    Some(Anchor { secs: s.rtc_secs(), hpet_fs: hpet_fs - back })
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TimeError {
    #[error("channel: {0}")]
    Channel(#[from] ChannelError),
    #[error("clock source {0:?} unavailable")]
    SourceUnavailable(ClockSource),
    #[error("time attack detected: {0:?}")]
    AttackDetected(TimeVerdict),
    #[error("clock service returned status {0}")]
    Service(u8),
    #[error("malformed clock reply")]
    Malformed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TimeConfig {
    /// Relative disagreement allowed between two sources' elapsed times.
    pub tolerance: f64,
    /// Fixed offset applied by `localtime`.
    pub utc_offset_secs: i32,
    /// Nominal clock frequencies, public board data.
    pub clocks: ClockConfig,
}

impl Default for TimeConfig {
    fn default() -> Self {
        TimeConfig { tolerance: 0.10, utc_offset_secs: 0, clocks: ClockConfig::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Now {
    pub value: TimeValue,
    pub verdict: TimeVerdict,
    pub confidence: Confidence,
}

/// Broken-down local time.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tm {
    pub year: i32,
    pub month: u32,
    pub day: u32,
    pub hour: u32,
    pub minute: u32,
    pub second: u32,
    pub usec: u32,
    pub utc_offset_secs: i32,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileTimes {
    pub atime: Option<TimeValue>,
    pub mtime: Option<TimeValue>,
}

/// Per-session trusted time state: history, anchor and validator.
#[derive(Clone, Debug)]
pub struct TimeService {
    config: TimeConfig,
    present: u8,
    history: Vec<ClockSample>,
    anchor: Option<Anchor>,
    last: Option<TimeValue>,
    verdicts_failed: u64,
}

impl TimeService {
    /// Probe the clock device; fails if the HPET, needed for microseconds, is absent.
    pub fn new(m: &mut Machine, session: &mut Session, config: TimeConfig) -> Result<Self, TimeError> {
        let r = session.call(m, DeviceId::Clock, Operation::Probe, &[])?;
        if !r.is_ok() {
            return Err(TimeError::Service(r.status));
        }
        let present = *r.payload.first().ok_or(TimeError::Malformed)?;
        if present & (1 << ClockSource::Hpet.index()) == 0 {
            return Err(TimeError::SourceUnavailable(ClockSource::Hpet));
        }
        Ok(TimeService { config, present, history: Vec::new(), anchor: None, last: None, verdicts_failed: 0 })
    }

    pub fn config(&self) -> &TimeConfig {
        &self.config
    }

    pub fn history(&self) -> &[ClockSample] {
        &self.history
    }

    pub fn is_anchored(&self) -> bool {
        self.anchor.is_some()
    }

    pub fn failed_verdicts(&self) -> u64 {
        self.verdicts_failed
    }

    /// Sources the probe reported.
    pub fn present(&self) -> Vec<ClockSource> {
        ClockSource::ALL.into_iter().filter(|s| self.present & (1 << s.index()) != 0).collect()
    }

    /// One clock service request.
    pub fn sample(&mut self, m: &mut Machine, session: &mut Session) -> Result<ClockSample, TimeError> {
        let r = session.call(m, DeviceId::Clock, Operation::Read, &[])?;
        if !r.is_ok() {
            return Err(TimeError::Service(r.status));
        }
        let snap = ClockSnapshot::decode(&r.payload).ok_or(TimeError::Malformed)?;
        Ok(ClockSample::from_snapshot(&snap, m.now()))
    }

    /// Fold a sample into the history and produce a time value.
    pub fn ingest(&mut self, sample: ClockSample) -> Now {
        let verdict = validate(&self.history, &sample, &self.config.clocks, self.config.tolerance);
        if verdict.ok {
            if let Some(fresh) = rollover(&self.config.clocks, &sample) {
                let stale = self.anchor.is_none_or(|a| {
                    let predicted = a.hpet_fs + i128::from(fresh.secs - a.secs) * FS_PER_SEC;
                    (predicted - fresh.hpet_fs).abs() > REANCHOR_THRESHOLD_FS
                });
                if stale {
                    self.anchor = Some(fresh);
                }
            }
        } else {
            self.verdicts_failed += 1;
        }
        let (value, confidence) = assemble(&self.config.clocks, self.anchor.as_ref(), self.history.first(), &sample);
        // Keep the output non-decreasing across anchor changes and clamps.
        let value = match self.last {
            Some(l) if l > value => l,
            _ => value,
        };
        self.last = Some(value);
        self.history.push(sample);
        Now { value, verdict, confidence }
    }

    pub fn now(&mut self, m: &mut Machine, session: &mut Session) -> Result<Now, TimeError> {
        let sample = self.sample(m, session)?;
        let out = self.ingest(sample);
        m.hook(Hook::SampleTaken);
        Ok(out)
    }

    fn checked(&mut self, m: &mut Machine, session: &mut Session) -> Result<Now, TimeError> {
        let n = self.now(m, session)?;
        if n.verdict.ok {
            Ok(n)
        } else {
            Err(TimeError::AttackDetected(n.verdict))
        }
    }

    pub fn time(&mut self, m: &mut Machine, session: &mut Session) -> Result<i64, TimeError> {
        Ok(self.checked(m, session)?.value.tv_sec)
    }

    pub fn gettimeofday(&mut self, m: &mut Machine, session: &mut Session) -> Result<TimeValue, TimeError> {
        Ok(self.checked(m, session)?.value)
    }

    pub fn localtime(&mut self, m: &mut Machine, session: &mut Session) -> Result<Tm, TimeError> {
        use chrono::{Datelike, FixedOffset, Timelike};
        let v = self.checked(m, session)?.value;
        let off = self.config.utc_offset_secs;
        let tz = FixedOffset::east_opt(off).ok_or(TimeError::Malformed)?;
        let dt = chrono::DateTime::from_timestamp(v.tv_sec, v.tv_usec * 1000).ok_or(TimeError::Malformed)?.with_timezone(&tz);
        Ok(Tm {
            year: dt.year(),
            month: dt.month(),
            day: dt.day(),
            hour: dt.hour(),
            minute: dt.minute(),
            second: dt.second(),
            usec: v.tv_usec,
            utc_offset_secs: off,
        })
    }

    /// Set access and modification times; `None` means now.
    pub fn utimes(
        &mut self,
        m: &mut Machine,
        session: &mut Session,
        file: &mut FileTimes,
        times: Option<[TimeValue; 2]>,
    ) -> Result<(), TimeError> {
        let [a, b] = match times {
            Some(t) => t,
            None => {
                let v = self.gettimeofday(m, session)?;
                [v, v]
            }
        };
        file.atime = Some(a);
        file.mtime = Some(b);
        Ok(())
    }

    /// History as JSON lines, one sample per line.
    pub fn export_history(&self) -> String {
        self.history.iter().map(|s| serde_json::to_string(s).expect("sample serializes") + "\n").collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::devices::ClockTamper;

    const SPACING: u64 = 2_500;

    fn bank() -> ClockBank {
        ClockBank::new(ClockConfig::default())
    }

    fn run(bank: &mut ClockBank, times: &[u64]) -> Vec<ClockSample> {
        times.iter().map(|&t| ClockSample::synthesize(bank, t, SPACING)).collect()
    }

    #[test]
    fn epoch_boundary_gives_zero_usec() {
        let cfg = ClockConfig::default();
        let s = ClockSample::synthesize(&bank(), 0, 0);
        let (v, c) = assemble(&cfg, None, None, &s);
        assert_eq!(v, TimeValue { tv_sec: 1_704_067_200, tv_usec: 0 });
        assert_eq!(c, Confidence::LowConfidence);
    }

    #[test]
    fn first_sample_is_vacuously_ok() {
        let s = ClockSample::synthesize(&bank(), 5_000, SPACING);
        assert!(validate(&[], &s, &ClockConfig::default(), 0.1).ok);
    }

    #[test]
    fn honest_sequence_has_no_violations() {
        let b = bank();
        let mut hist = Vec::new();
        let mut t = 1_000;
        for i in 0..100u64 {
            t += 150_000 + (i * 7_919 % 4_000_000);
            let s = ClockSample::synthesize(&b, t, SPACING);
            let v = validate(&hist, &s, &ClockConfig::default(), 0.1);
            assert!(v.ok, "sample {i}: {v:?}");
            hist.push(s);
        }
    }

    #[test]
    fn rtc_rollback_is_monotonic_violation() {
        let mut b = bank();
        let first = run(&mut b, &[2_000_000]);
        b.tamper(3_000_000, ClockTamper::Shift { source: ClockSource::Rtc, delta_ns: -3_600_000_000_000 });
        let s = ClockSample::synthesize(&b, 4_000_000, SPACING);
        let v = validate(&first, &s, &ClockConfig::default(), 0.1);
        assert!(v.names(ClockSource::Rtc, Rule::Monotonic));
        assert!(!v.ok);
    }

    #[test]
    fn frozen_hpet_is_named() {
        let mut b = bank();
        let first = run(&mut b, &[2_000_000]);
        b.tamper(2_000_000 + SPACING, ClockTamper::Freeze { source: ClockSource::Hpet });
        let s = ClockSample::synthesize(&b, 5_000_000, SPACING);
        let v = validate(&first, &s, &ClockConfig::default(), 0.1);
        assert!(v.names(ClockSource::Hpet, Rule::RateMismatch));
        assert!(v.names(ClockSource::Hpet, Rule::Monotonic));
        assert!(!v.names(ClockSource::Tsc, Rule::RateMismatch));
    }

    #[test]
    fn doubled_tsc_is_named_alone() {
        let mut b = bank();
        let first = run(&mut b, &[2_000_000]);
        b.tamper(2_100_000, ClockTamper::Rate { source: ClockSource::Tsc, num: 2, den: 1 });
        let s = ClockSample::synthesize(&b, 4_000_000, SPACING);
        let v = validate(&first, &s, &ClockConfig::default(), 0.1);
        let blamed: Vec<_> = v.violations.iter().map(|x| x.source).collect();
        assert_eq!(blamed, vec![ClockSource::Tsc]);
    }

    #[test]
    fn pit_wrap_is_normalized() {
        let cfg = ClockConfig::default();
        // 10 ticks before reload wraps round to 65530: 16 ticks elapsed.
        assert_eq!(ticks_elapsed(&cfg, ClockSource::Pit, 10, 65_530), 16);
        assert_eq!(ticks_elapsed(&cfg, ClockSource::Pit, 500, 100), 400);
    }

    #[test]
    fn long_interval_makes_pit_uninformative() {
        let b = bank();
        // 40 ms is beyond half the 55 ms PIT wrap.
        let a = ClockSample::synthesize(&b, 1_000_000, SPACING);
        let c = ClockSample::synthesize(&b, 41_000_000, SPACING);
        assert!(validate(&[a], &c, &ClockConfig::default(), 0.1).ok);
    }

    #[test]
    fn anchored_value_tracks_hpet() {
        let cfg = ClockConfig::default();
        let b = bank();
        let anchor = Anchor { secs: cfg.rtc_epoch, hpet_fs: 0 };
        let s1 = ClockSample::synthesize(&b, 1_234_567_000, 0);
        let (v, c) = assemble(&cfg, Some(&anchor), None, &s1);
        assert_eq!(c, Confidence::Anchored);
        assert_eq!(v, TimeValue { tv_sec: cfg.rtc_epoch + 1, tv_usec: 234_567 });
    }

    #[test]
    fn micros_round_trip() {
        let v = TimeValue::from_micros(-1);
        assert_eq!(v, TimeValue { tv_sec: -1, tv_usec: 999_999 });
        assert_eq!(v.as_micros(), -1);
    }
}

//! Five simulated clock and timer sources.
//!
//! Each source derives its register value from a *perceived* nanosecond count
//! which advances as a piecewise-linear function of virtual time. Tampering
//! moves, freezes or rescales that function; honest sources may carry a small
//! configured drift.

use chrono::{DateTime, Datelike, Timelike};
use serde::{Deserialize, Serialize};

const NS_PER_SEC: i128 = 1_000_000_000;

/// Width of the RTC update-in-progress window before each second rollover.
pub const RTC_UIP_WINDOW_NS: u64 = 244_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ClockSource {
    Rtc,
    Hpet,
    Pit,
    Tsc,
    ApicTimer,
}

impl ClockSource {
    pub const ALL: [ClockSource; 5] = [
        ClockSource::Rtc,
        ClockSource::Hpet,
        ClockSource::Pit,
        ClockSource::Tsc,
        ClockSource::ApicTimer,
    ];

    pub fn index(self) -> usize {
        match self {
            ClockSource::Rtc => 0,
            ClockSource::Hpet => 1,
            ClockSource::Pit => 2,
            ClockSource::Tsc => 3,
            ClockSource::ApicTimer => 4,
        }
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            ClockSource::Rtc => "rtc",
            ClockSource::Hpet => "hpet",
            ClockSource::Pit => "pit",
            ClockSource::Tsc => "tsc",
            ClockSource::ApicTimer => "apic",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.name() == s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClockConfig {
    /// Unix seconds shown by the RTC at virtual time zero.
    pub rtc_epoch: i64,
    pub hpet_period_fs: u64,
    pub pit_hz: u64,
    /// PIT reload value; the counter counts down from here.
    pub pit_reload: u32,
    pub tsc_hz: u64,
    pub apic_bus_hz: u64,
    pub apic_divisor: u32,
    pub apic_initial_count: u32,
    /// Per-source rate error in parts per million, indexed by [`ClockSource::index`].
    pub drift_ppm: [i32; 5],
    /// Sources physically present on the board.
    pub present: [bool; 5],
}

impl Default for ClockConfig {
    fn default() -> Self {
        ClockConfig {
            // 2024-01-01T00:00:00Z
            rtc_epoch: 1_704_067_200,
            hpet_period_fs: 100_000_000,
            pit_hz: 1_193_182,
            pit_reload: 65_536,
            tsc_hz: 2_800_000_000,
            apic_bus_hz: 200_000_000,
            apic_divisor: 16,
            apic_initial_count: u32::MAX,
            drift_ppm: [0; 5],
            present: [true; 5],
        }
    }
}

impl ClockConfig {
    pub fn apic_hz(&self) -> u64 {
        self.apic_bus_hz / u64::from(self.apic_divisor.max(1))
    }

    /// Nominal length of one tick of `source`, in femtoseconds.
    pub fn tick_fs(&self, source: ClockSource) -> u128 {
        const FS_PER_SEC: u128 = 1_000_000_000_000_000;
        match source {
            ClockSource::Rtc => FS_PER_SEC,
            ClockSource::Hpet => u128::from(self.hpet_period_fs),
            ClockSource::Pit => FS_PER_SEC / u128::from(self.pit_hz),
            ClockSource::Tsc => FS_PER_SEC / u128::from(self.tsc_hz),
            ClockSource::ApicTimer => FS_PER_SEC / u128::from(self.apic_hz()),
        }
    }

    /// Ticks until a down-counter wraps, if the source wraps in practice.
    pub fn wrap_ticks(&self, source: ClockSource) -> Option<u64> {
        match source {
            ClockSource::Pit => Some(u64::from(self.pit_reload.clamp(1, 65_536))),
            ClockSource::ApicTimer => Some(u64::from(self.apic_initial_count.max(1))),
            _ => None,
        }
    }
}

/// Calendar value held in the RTC registers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RtcTime {
    pub year: i32,
    pub month: u8,
    pub day: u8,
    pub hour: u8,
    pub minute: u8,
    pub second: u8,
}

impl RtcTime {
    pub fn from_unix(secs: i64) -> Self {
        let dt = DateTime::from_timestamp(secs, 0).unwrap_or_default();
        RtcTime {
            year: dt.year(),
            month: dt.month() as u8,
            day: dt.day() as u8,
            hour: dt.hour() as u8,
            minute: dt.minute() as u8,
            second: dt.second() as u8,
        }
    }

    pub fn to_unix(self) -> i64 {
        chrono::NaiveDate::from_ymd_opt(self.year, self.month.into(), self.day.into())
            .and_then(|d| d.and_hms_opt(self.hour.into(), self.minute.into(), self.second.into()))
            .map(|dt| dt.and_utc().timestamp())
            .unwrap_or(i64::MIN)
    }
}

/// A register-level value read from one source.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum RawReading {
    Rtc(RtcTime),
    Hpet(u64),
    Pit(u16),
    Tsc(u64),
    Apic(u32),
}

/// Adversarial mutation of one clock source.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ClockTamper {
    /// Move the source by `delta_ns` (negative rolls it back).
    Shift { source: ClockSource, delta_ns: i64 },
    Freeze { source: ClockSource },
    Unfreeze { source: ClockSource },
    /// Multiply the source's rate by `num / den` from now on.
    Rate { source: ClockSource, num: u32, den: u32 },
}

#[derive(Clone, Debug)]
struct Timeline {
    anchor_vt: u64,
    anchor_ns: i128,
    rate_num: i128,
    rate_den: i128,
    frozen: bool,
}

impl Timeline {
    fn honest(drift_ppm: i32) -> Self {
        Timeline {
            anchor_vt: 0,
            anchor_ns: 0,
            rate_num: 1_000_000 + i128::from(drift_ppm),
            rate_den: 1_000_000,
            frozen: false,
        }
    }

    fn perceived(&self, vt: u64) -> i128 {
        if self.frozen {
            return self.anchor_ns;
        }
        let dt = i128::from(vt.saturating_sub(self.anchor_vt));
        self.anchor_ns + (dt * self.rate_num).div_euclid(self.rate_den)
    }

    fn rebase(&mut self, vt: u64) {
        self.anchor_ns = self.perceived(vt);
        self.anchor_vt = vt;
    }
}

/// The bank of clock sources on the simulated board.
#[derive(Clone, Debug)]
pub struct ClockBank {
    config: ClockConfig,
    timelines: [Timeline; 5],
}

impl ClockBank {
    pub fn new(config: ClockConfig) -> Self {
        let timelines = std::array::from_fn(|i| Timeline::honest(config.drift_ppm[i]));
        ClockBank { config, timelines }
    }

    pub fn config(&self) -> &ClockConfig {
        &self.config
    }

    pub fn is_present(&self, source: ClockSource) -> bool {
        self.config.present[source.index()]
    }

    fn perceived(&self, source: ClockSource, vt: u64) -> i128 {
        self.timelines[source.index()].perceived(vt)
    }

    fn ticks(&self, source: ClockSource, vt: u64) -> i128 {
        let ns = self.perceived(source, vt);
        match source {
            ClockSource::Rtc => ns.div_euclid(NS_PER_SEC),
            ClockSource::Hpet => (ns * 1_000_000).div_euclid(i128::from(self.config.hpet_period_fs)),
            ClockSource::Pit => (ns * i128::from(self.config.pit_hz)).div_euclid(NS_PER_SEC),
            ClockSource::Tsc => (ns * i128::from(self.config.tsc_hz)).div_euclid(NS_PER_SEC),
            ClockSource::ApicTimer => (ns * i128::from(self.config.apic_hz())).div_euclid(NS_PER_SEC),
        }
    }

    /// True while the RTC is about to roll its seconds field over.
    pub fn rtc_update_in_progress(&self, vt: u64) -> bool {
        let frac = self.perceived(ClockSource::Rtc, vt).rem_euclid(NS_PER_SEC);
        frac >= NS_PER_SEC - i128::from(RTC_UIP_WINDOW_NS)
    }

    /// Virtual nanoseconds until the RTC update-in-progress flag clears.
    pub fn rtc_uip_remaining(&self, vt: u64) -> u64 {
        if !self.rtc_update_in_progress(vt) {
            return 0;
        }
        let frac = self.perceived(ClockSource::Rtc, vt).rem_euclid(NS_PER_SEC);
        let tl = &self.timelines[ClockSource::Rtc.index()];
        if tl.frozen {
            // A frozen RTC never leaves the window; callers bound their wait.
            return u64::MAX;
        }
        let perceived_left = NS_PER_SEC - frac;
        // Convert back to virtual time, rounding up.
        let vt_left = (perceived_left * tl.rate_den + tl.rate_num - 1) / tl.rate_num;
        vt_left.max(1) as u64
    }

    /// Register value of `source` at virtual time `vt`.
    pub fn raw(&self, source: ClockSource, vt: u64) -> RawReading {
        let t = self.ticks(source, vt);
        match source {
            ClockSource::Rtc => {
                let secs = self.config.rtc_epoch as i128 + t;
                RawReading::Rtc(RtcTime::from_unix(secs as i64))
            }
            ClockSource::Hpet => RawReading::Hpet(t as u64),
            ClockSource::Tsc => RawReading::Tsc(t as u64),
            ClockSource::Pit => {
                let reload = i128::from(self.config.pit_reload.clamp(1, 65_536));
                let v = (reload - t.rem_euclid(reload)).rem_euclid(65_536);
                RawReading::Pit(v as u16)
            }
            ClockSource::ApicTimer => {
                let reload = i128::from(self.config.apic_initial_count.max(1));
                let v = (reload - t.rem_euclid(reload)).rem_euclid(1 << 32);
                RawReading::Apic(v as u32)
            }
        }
    }

    pub fn tamper(&mut self, vt: u64, mutation: ClockTamper) {
        match mutation {
            ClockTamper::Shift { source, delta_ns } => {
                let tl = &mut self.timelines[source.index()];
                tl.rebase(vt);
                tl.anchor_ns += i128::from(delta_ns);
            }
            ClockTamper::Freeze { source } => {
                let tl = &mut self.timelines[source.index()];
                tl.rebase(vt);
                tl.frozen = true;
            }
            ClockTamper::Unfreeze { source } => {
                let tl = &mut self.timelines[source.index()];
                tl.anchor_vt = vt;
                tl.frozen = false;
            }
            ClockTamper::Rate { source, num, den } => {
                let tl = &mut self.timelines[source.index()];
                tl.rebase(vt);
                tl.rate_num *= i128::from(num);
                tl.rate_den *= i128::from(den.max(1));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Independent conversion: whole periods of `period_fs` that fit in `ns`.
    fn periods_in(ns: u64, period_fs: u64) -> u64 {
        let mut fs = ns as u128 * 1_000_000;
        let mut n = 0u64;
        // Subtract in large strides, then singly, to avoid sharing the
        // division with the implementation.
        let stride = period_fs as u128 * 1000;
        while fs >= stride {
            fs -= stride;
            n += 1000;
        }
        while fs >= period_fs as u128 {
            fs -= period_fs as u128;
            n += 1;
        }
        n
    }

    #[test]
    fn hpet_counts_100ns_periods() {
        let bank = ClockBank::new(ClockConfig::default());
        let expected = periods_in(1_000_000, 100_000_000);
        assert_eq!(expected, 10_000);
        assert_eq!(bank.raw(ClockSource::Hpet, 1_000_000), RawReading::Hpet(expected));
    }

    #[test]
    fn rtc_at_epoch_is_calibration() {
        let bank = ClockBank::new(ClockConfig::default());
        let RawReading::Rtc(t) = bank.raw(ClockSource::Rtc, 0) else { panic!() };
        assert_eq!((t.year, t.month, t.day, t.hour, t.minute, t.second), (2024, 1, 1, 0, 0, 0));
        assert_eq!(t.to_unix(), 1_704_067_200);
    }

    #[test]
    fn uip_window_precedes_rollover() {
        let bank = ClockBank::new(ClockConfig::default());
        assert!(!bank.rtc_update_in_progress(0));
        assert!(!bank.rtc_update_in_progress(999_755_999));
        assert!(bank.rtc_update_in_progress(999_756_000));
        assert_eq!(bank.rtc_uip_remaining(999_900_000), 100_000);
        assert!(!bank.rtc_update_in_progress(1_000_000_000));
    }

    #[test]
    fn rollback_moves_rtc_back_one_hour() {
        let mut bank = ClockBank::new(ClockConfig::default());
        let before = match bank.raw(ClockSource::Rtc, 5_000_000_000) {
            RawReading::Rtc(t) => t.to_unix(),
            _ => unreachable!(),
        };
        bank.tamper(5_000_000_000, ClockTamper::Shift { source: ClockSource::Rtc, delta_ns: -3_600_000_000_000 });
        let after = match bank.raw(ClockSource::Rtc, 5_000_000_000) {
            RawReading::Rtc(t) => t.to_unix(),
            _ => unreachable!(),
        };
        assert_eq!(before - after, 3600);
    }

    #[test]
    fn frozen_hpet_stops() {
        let mut bank = ClockBank::new(ClockConfig::default());
        bank.tamper(1_000, ClockTamper::Freeze { source: ClockSource::Hpet });
        assert_eq!(bank.raw(ClockSource::Hpet, 2_000_000), bank.raw(ClockSource::Hpet, 9_000_000));
    }

    #[test]
    fn pit_down_counter_wraps() {
        let bank = ClockBank::new(ClockConfig::default());
        let RawReading::Pit(a) = bank.raw(ClockSource::Pit, 0) else { panic!() };
        assert_eq!(a, 0); // reload 65536 stored as 0
        let RawReading::Pit(b) = bank.raw(ClockSource::Pit, 1_000_000) else { panic!() };
        // 1 ms at 1.193182 MHz is 1193 ticks.
        assert_eq!(a.wrapping_sub(b), 1193);
    }

    #[test]
    fn rate_doubling_doubles_elapsed() {
        let mut bank = ClockBank::new(ClockConfig::default());
        bank.tamper(0, ClockTamper::Rate { source: ClockSource::Tsc, num: 2, den: 1 });
        assert_eq!(bank.raw(ClockSource::Tsc, 1_000), RawReading::Tsc(5_600));
    }
}

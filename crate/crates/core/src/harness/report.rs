//! Run reports and their two renderings. Maps are ordered, so the JSON form
//! has a stable field order and identical runs emit identical bytes.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    Table,
    Json,
}

/// One workflow step of an immediate request, averaged over requests.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BreakdownRow {
    pub step: usize,
    pub label: String,
    pub mean_ns: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    pub expected: String,
    pub observed: String,
    pub holds: bool,
}

/// A series point. Non-finite coordinates (an interval of "never") are
/// written to JSON as the strings `"inf"`, `"-inf"` and `"nan"`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Point {
    #[serde(with = "coord")]
    pub x: f64,
    #[serde(with = "coord")]
    pub y: f64,
}

mod coord {
    use serde::{de, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        match *v {
            v if v.is_finite() => s.serialize_f64(v),
            v if v.is_nan() => s.serialize_str("nan"),
            v if v > 0.0 => s.serialize_str("inf"),
            _ => s.serialize_str("-inf"),
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) => match t.as_str() {
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                "nan" => Ok(f64::NAN),
                other => Err(de::Error::custom(format!("not a coordinate: {other}"))),
            },
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub name: String,
    pub seed: u64,
    /// Virtual-time costs are modeled, not measured.
    pub breakdown: Vec<BreakdownRow>,
    pub counters: BTreeMap<String, u64>,
    pub verdicts: BTreeMap<String, Verdict>,
    pub series: BTreeMap<String, Vec<Point>>,
    /// Step labels of the first immediate request, in order.
    pub workflow: Vec<String>,
    pub event_log_sha256: String,
}

impl Report {
    pub fn new(name: &str, seed: u64) -> Self {
        Report { name: name.to_string(), seed, ..Default::default() }
    }

    pub fn breakdown_total(&self) -> u64 {
        self.breakdown.iter().map(|r| r.mean_ns).sum()
    }

    /// True when every attack verdict holds.
    pub fn all_hold(&self) -> bool {
        self.verdicts.values().all(|v| v.holds)
    }

    pub fn count(&mut self, key: &str, n: u64) {
        *self.counters.entry(key.to_string()).or_default() += n;
    }

    pub fn emit(&self, format: Format) -> String {
        match format {
            Format::Json => serde_json::to_string_pretty(self).expect("report serializes") + "\n",
            Format::Table => self.table(),
        }
    }

    pub fn from_json(text: &str) -> serde_json::Result<Self> {
        serde_json::from_str(text)
    }

    fn table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "report {} (seed {})", self.name, self.seed);
        if !self.breakdown.is_empty() {
            let _ = writeln!(out, "\n{:>4}  {:<24} {:>12}", "step", "operation", "modeled µs");
            for r in &self.breakdown {
                let _ = writeln!(out, "{:>4}  {:<24} {:>12.1}", r.step, r.label, r.mean_ns as f64 / 1000.0);
            }
            let _ = writeln!(out, "{:>4}  {:<24} {:>12.1}", "", "total", self.breakdown_total() as f64 / 1000.0);
        }
        if !self.verdicts.is_empty() {
            let _ = writeln!(out, "\n{:<16} {:<28} {:<28} result", "attack", "expected", "observed");
            for (name, v) in &self.verdicts {
                let r = if v.holds { "ok" } else { "MISMATCH" };
                let _ = writeln!(out, "{:<16} {:<28} {:<28} {}", name, v.expected, v.observed, r);
            }
        }
        for (name, pts) in &self.series {
            let _ = writeln!(out, "\nseries {name}");
            for p in pts {
                let _ = writeln!(out, "  {:>14.3}  {:>14.6}", p.x, p.y);
            }
        }
        if !self.counters.is_empty() {
            let _ = writeln!(out, "\ncounters");
            for (k, v) in &self.counters {
                let _ = writeln!(out, "  {k:<28} {v}");
            }
        }
        if !self.event_log_sha256.is_empty() {
            let _ = writeln!(out, "\nevent log sha256 {}", self.event_log_sha256);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_report_is_valid_json() {
        let r = Report::default();
        let text = r.emit(Format::Json);
        assert_eq!(Report::from_json(&text).unwrap(), r);
        assert!(r.emit(Format::Table).starts_with("report"));
    }

    #[test]
    fn json_round_trip_is_structurally_equal() {
        let mut r = Report::new("x", 9);
        r.breakdown.push(BreakdownRow { step: 1, label: "EPC encryption".into(), mean_ns: 2000 });
        r.count("smis", 3);
        r.series.insert("s".into(), vec![Point { x: 0.1, y: 1.0 / 3.0 }, Point { x: f64::INFINITY, y: 0.0 }]);
        r.verdicts.insert("a".into(), Verdict { expected: "NoEffect".into(), observed: "NoEffect".into(), holds: true });
        assert_eq!(Report::from_json(&r.emit(Format::Json)).unwrap(), r);
        assert_eq!(r.breakdown_total(), 2000);
    }
}

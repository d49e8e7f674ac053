use aurora::harness::report::Format;
use aurora::harness::{bench_overhead, bench_time, corpus, run, HarnessError, Report, Scenario, WORKFLOW};
use aurora::platform::CostTable;

/// Reference per-step costs, whole microseconds.
const REFERENCE_US: [(&str, u64); 11] = [
    ("EPC encryption", 2),
    ("Copy to shared RAM", 2),
    ("Switch to SMM", 13),
    ("Copy to SMRAM", 0),
    ("SMRAM decryption", 3),
    ("Clock Service", 44),
    ("SMRAM encryption", 3),
    ("Copy to shared RAM", 0),
    ("Return and enter SGX", 12),
    ("Copy to EPC", 3),
    ("EPC decryption", 2),
];

fn builtin(name: &str) -> Scenario {
    corpus::scenario(name).unwrap_or_else(|| panic!("no scenario {name}"))
}

#[test]
fn same_seed_same_event_log() {
    let s = builtin("honest-time");
    let a = run(&s).unwrap();
    let b = run(&s).unwrap();
    assert_eq!(a.event_log_sha256, b.event_log_sha256);
    assert_eq!(a.emit(Format::Json), b.emit(Format::Json));
    let mut other = s.clone();
    other.seed += 1;
    assert_ne!(run(&other).unwrap().event_log_sha256, a.event_log_sha256);
}

#[test]
fn honest_time_report() {
    let r = run(&builtin("honest-time")).unwrap();
    assert_eq!(r.workflow, WORKFLOW);
    assert_eq!(r.breakdown.len(), 11);
    for key in ["time_false_positives", "time_went_backwards", "workflow_mismatches", "hygiene_violations", "timeouts"] {
        assert_eq!(r.counters[key], 0, "{key}");
    }
    assert_eq!(r.counters["conservation_holds"], 1);
    assert_eq!(r.counters["time_samples"], 200);
    // Report totals are sums of their parts.
    assert_eq!(r.breakdown_total(), r.breakdown.iter().map(|b| b.mean_ns).sum::<u64>());
    assert_eq!(
        r.counters["frames_sealed"] + r.counters["frames_injected"],
        r.counters["frames_opened"] + r.counters["frames_dropped"] + r.counters["frames_in_flight"]
    );
}

#[test]
fn default_costs_reproduce_the_reference_breakdown() {
    let r = bench_time(50, 2_000_000, 3);
    let got: Vec<(&str, u64)> = r.breakdown.iter().map(|b| (b.label.as_str(), b.mean_ns / 1000)).collect();
    assert_eq!(got, REFERENCE_US);
    assert_eq!(r.breakdown_total(), CostTable::default().time_request());
    // Whole microseconds, as in the reference breakdown.
    assert_eq!(r.breakdown_total() / 1000, 84);
}

#[test]
fn batched_scenario_takes_one_smi_per_batch() {
    let r = run(&builtin("batched-time")).unwrap();
    assert_eq!(r.counters["replies"], 64);
    // One SMI per 8 requests plus one for the probe at start-up and the handshake.
    let handshake_and_probe = run(&Scenario::from_toml(
        "name = \"probe-only\"\nseed = 2\nworkloads = [{ kind = \"batch\", requests = 0, batch = 8 }]",
    )
    .unwrap())
    .unwrap()
    .counters["smis"];
    assert_eq!(r.counters["smis"] - handshake_and_probe, 64 / 8);
}

#[test]
fn attack_corpus_scenario_verdicts() {
    let r = run(&builtin("attack-corpus")).unwrap();
    assert_eq!(r.verdicts.len(), 12);
    assert!(r.all_hold(), "{:#?}", r.verdicts);
    assert_eq!(r.verdicts["replay"].observed, "DetectedAs(ReplayOrReorder)");
    assert_eq!(r.verdicts["delay"].observed, "DegradedToDoS");
}

#[test]
fn udp_scenario_echoes_everything() {
    let r = run(&builtin("udp-echo")).unwrap();
    assert_eq!(r.counters["datagrams_echoed"], 100);
    assert_eq!(r.counters["silent_corruption"], 0);
    assert_eq!(r.counters["hygiene_violations"], 0);
}

#[test]
fn json_round_trip_of_a_real_report() {
    let mut r = run(&builtin("honest-time")).unwrap();
    r.series = bench_overhead(&[Some(1_000_000), Some(7_000_000), None], &[78_000], 1).series;
    let back = Report::from_json(&r.emit(Format::Json)).unwrap();
    assert_eq!(back, r);
}

#[test]
fn table_has_one_row_per_step() {
    let r = bench_time(5, 1_000_000, 1);
    let table = r.emit(Format::Table);
    for (label, _) in REFERENCE_US {
        assert!(table.contains(label), "{label}");
    }
    let rows = table.lines().filter(|l| l.split_whitespace().next().is_some_and(|w| w.parse::<u8>().is_ok())).count();
    assert_eq!(rows, 11);
}

#[test]
fn invalid_scenarios_are_rejected() {
    let cases = [
        "name = \"\"",
        "name = \"x\"\nattacks = [\"no-such-attack\"]",
        "name = \"x\"\nworkloads = [{ kind = \"batch\", requests = 8, batch = 0 }]",
        "name = \"x\"\nworkloads = [{ kind = \"time\", samples = 1, min_interval_ns = 9, max_interval_ns = 1 }]",
        "name = \"x\"\nworkloads = [{ kind = \"warp\" }]",
    ];
    for text in cases {
        assert!(matches!(Scenario::from_toml(text), Err(HarnessError::ConfigInvalid(_))), "{text}");
    }
}

#[test]
fn overhead_falls_as_requests_thin_out() {
    let r = bench_overhead(&[Some(1_000_000), Some(10_000_000), Some(100_000_000), Some(1_000_000_000), None], &[78_000, 152_000], 4);
    let slow = &r.series["overhead_preempt_152000ns_vs_interval_ms"];
    let fast = &r.series["overhead_preempt_78000ns_vs_interval_ms"];
    for s in [slow, fast] {
        assert!(s.windows(2).all(|w| w[1].y < w[0].y));
        assert_eq!(s.last().unwrap().y, 0.0);
    }
    // A longer preemption costs more at every finite interval.
    assert!(slow.iter().zip(fast).take(4).all(|(a, b)| a.y > b.y));
}

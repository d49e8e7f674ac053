//! Benchmarks over virtual time. Every number here comes from the cost
//! table, so runs are exact and repeatable; none of it is wall-clock.

use std::net::Ipv4Addr;

use super::report::{Point, Report};
use super::run::{breakdown, event_log_digest, is_workflow, machine_counters};
use crate::machine::{Machine, MachineConfig};
use crate::net::{Network, RxMode};
use crate::time_tss::{TimeConfig, TimeService};
use crate::channel::Session;

/// Foreground work per overhead measurement.
pub const FOREGROUND_NS: u64 = 2_000_000_000;

/// `n` trusted-time requests `interval_ns` apart; reports the per-step breakdown.
pub fn bench_time(n: u32, interval_ns: u64, seed: u64) -> Report {
    let mut m = Machine::new(MachineConfig { seed, ..MachineConfig::default() });
    let mut report = Report::new("bench-time", seed);
    let e = m.create_enclave(Machine::epid_from(1), true);
    let mut s = Session::establish(&mut m, e).expect("honest session");
    let mut ts = TimeService::new(&mut m, &mut s, TimeConfig::default()).expect("clock present");
    let mut traces = Vec::new();
    let mut latency = Vec::new();
    for _ in 0..n {
        m.platform.charge("Think time", interval_ns, None);
        let t0 = m.now();
        let ok = ts.now(&mut m, &mut s).map(|v| v.verdict.ok).unwrap_or(false);
        report.count("verdicts_failed", u64::from(!ok));
        latency.push(Point { x: traces.len() as f64, y: (m.now() - t0) as f64 / 1000.0 });
        traces.push(s.last_trace.clone());
    }
    report.count("requests", u64::from(n));
    report.count("workflow_mismatches", traces.iter().filter(|t| !is_workflow(t, "Clock Service")).count() as u64);
    report.breakdown = breakdown(&traces);
    report.workflow = traces.first().map(|t| t.iter().map(|s| s.label.clone()).collect()).unwrap_or_default();
    report.series.insert("request_latency_us".into(), latency);
    machine_counters(&m, &mut report);
    report.event_log_sha256 = event_log_digest(&m);
    report
}

/// ICMP echo RTT against payload size between two enclave stacks.
pub fn bench_net(sizes: &[usize], count: u16, seed: u64) -> Report {
    let mut m = Machine::new(MachineConfig { seed, ..MachineConfig::default() });
    let mut report = Report::new("bench-net", seed);
    let a = Ipv4Addr::new(10, 0, 0, 1);
    let b = Ipv4Addr::new(10, 0, 0, 2);
    let mut net = Network::new();
    let src = net.spawn(&mut m, 1, a, RxMode::Notify).expect("stack a");
    net.spawn(&mut m, 2, b, RxMode::Notify).expect("stack b");
    // Resolve the peer first so no probe pays for ARP.
    let _ = net.icmp_echo(&mut m, src, b, &[0; 8], 1);
    let mut series = Vec::new();
    let mut lost = 0;
    for &size in sizes {
        let payload: Vec<u8> = (0..size).map(|i| i as u8).collect();
        let probes = net.icmp_echo(&mut m, src, b, &payload, count);
        let rtts: Vec<u64> = probes.iter().filter_map(|p| p.as_ref().ok()).filter(|p| p.data == payload).map(|p| p.rtt_ns).collect();
        lost += probes.len() - rtts.len();
        if !rtts.is_empty() {
            let mean = rtts.iter().sum::<u64>() as f64 / rtts.len() as f64;
            series.push(Point { x: size as f64, y: mean / 1000.0 });
        }
    }
    report.series.insert("rtt_us_vs_payload_bytes".into(), series);
    report.count("probes_lost", lost as u64);
    machine_counters(&m, &mut report);
    report.event_log_sha256 = event_log_digest(&m);
    report
}

/// Overhead of periodic trusted-time requests on a fixed amount of foreground
/// work, as a ratio of extra virtual time. `None` stands for no requests at
/// all. One series per SMM preemption length.
pub fn bench_overhead(intervals_ns: &[Option<u64>], preemptions_ns: &[u64], seed: u64) -> Report {
    let mut report = Report::new("bench-overhead", seed);
    for &stall in preemptions_ns {
        let mut series = Vec::new();
        for &interval in intervals_ns {
            let (ratio, requests) = overhead_once(interval, stall, seed);
            report.count(&format!("requests_{}ns", stall), requests);
            let x = interval.map_or(f64::INFINITY, |i| i as f64 / 1e6);
            series.push(Point { x, y: ratio });
        }
        report.series.insert(format!("overhead_preempt_{stall}ns_vs_interval_ms"), series);
    }
    report
}

fn overhead_once(interval: Option<u64>, stall: u64, seed: u64) -> (f64, u64) {
    let mut cfg = MachineConfig { seed, ..MachineConfig::default() };
    cfg.platform.costs.smm_extra_stall = stall;
    let mut m = Machine::new(cfg);
    let e = m.create_enclave(Machine::epid_from(1), true);
    let mut s = Session::establish(&mut m, e).expect("honest session");
    let mut ts = TimeService::new(&mut m, &mut s, TimeConfig::default()).expect("clock present");
    let start = m.now();
    let mut done = 0;
    let mut requests = 0;
    let mut next = interval.unwrap_or(u64::MAX);
    while done < FOREGROUND_NS {
        let chunk = next.min(FOREGROUND_NS) - done;
        m.platform.charge("Foreground work", chunk, None);
        done += chunk;
        if done >= next && done < FOREGROUND_NS {
            let _ = ts.now(&mut m, &mut s);
            requests += 1;
            next = next.saturating_add(interval.unwrap_or(u64::MAX));
        }
    }
    let elapsed = m.now() - start;
    ((elapsed - FOREGROUND_NS) as f64 / FOREGROUND_NS as f64, requests)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn no_requests_no_overhead() {
        let (r, n) = overhead_once(None, 0, 1);
        assert_eq!(n, 0);
        assert_eq!(r, 0.0);
    }
}

//! `aurora`: run scenarios, attack scripts and benchmarks on the simulator.
//! Exit status is 0 iff every expected outcome held.

use std::path::Path;
use std::process::ExitCode;

use aurora::adversary::AttackScript;
use aurora::harness::{self, corpus, Format, Report, Scenario, Verdict};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "aurora", version, about = "Secure SMM/enclave channel simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario file or a built-in scenario by name.
    Run {
        scenario: String,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        json: bool,
    },
    /// Virtual-time benchmarks.
    Bench {
        #[command(subcommand)]
        kind: Bench,
        #[arg(long, global = true, default_value_t = 1)]
        seed: u64,
        #[arg(long, global = true)]
        json: bool,
    },
    /// Run one attack script (file or built-in name) against its victim.
    Attack {
        script: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        json: bool,
    },
    /// List built-in scenarios and attack scripts.
    ListScenarios,
}

#[derive(Subcommand)]
enum Bench {
    /// Per-step breakdown of trusted-time requests.
    Time {
        #[arg(long, default_value_t = 1000)]
        requests: u32,
        #[arg(long, default_value_t = 1_000_000)]
        interval_ns: u64,
    },
    /// ICMP echo RTT against payload size.
    Net {
        #[arg(long, value_delimiter = ',', default_values_t = [0usize, 64, 256, 512, 1024, 1400, 4000, 8000])]
        sizes: Vec<usize>,
        #[arg(long, default_value_t = 5)]
        count: u16,
    },
    /// Foreground slowdown against request interval.
    Overhead {
        /// Request intervals in ms; `none` means no requests at all.
        #[arg(long, value_delimiter = ',', default_values_t = ["1".to_string(), "10".into(), "100".into(), "1000".into(), "none".into()])]
        intervals_ms: Vec<String>,
        /// SMM preemption lengths in ns, one series each.
        #[arg(long, value_delimiter = ',', default_values_t = [78_000u64, 152_000])]
        preempt_ns: Vec<u64>,
    },
}

fn load_scenario(arg: &str) -> Result<Scenario, String> {
    if Path::new(arg).is_file() {
        let text = std::fs::read_to_string(arg).map_err(|e| format!("{arg}: {e}"))?;
        Scenario::from_toml(&text).map_err(|e| format!("{arg}: {e}"))
    } else {
        corpus::scenario(arg).ok_or_else(|| format!("no scenario file or built-in scenario named {arg}"))
    }
}

fn load_script(arg: &str) -> Result<AttackScript, String> {
    if Path::new(arg).is_file() {
        let text = std::fs::read_to_string(arg).map_err(|e| format!("{arg}: {e}"))?;
        AttackScript::from_toml(&text).map_err(|e| format!("{arg}: {e}"))
    } else {
        corpus::attack(arg).ok_or_else(|| format!("no attack file or built-in script named {arg}"))
    }
}

fn parse_interval(s: &str) -> Result<Option<u64>, String> {
    match s.trim() {
        "none" | "inf" => Ok(None),
        ms => ms.parse::<f64>().map(|v| Some((v * 1e6) as u64)).map_err(|_| format!("bad interval {ms}")),
    }
}

fn format(json: bool) -> Format {
    if json {
        Format::Json
    } else {
        Format::Table
    }
}

fn execute(cli: Cli) -> Result<bool, String> {
    match cli.command {
        Command::Run { scenario, seed, json } => {
            let mut s = load_scenario(&scenario)?;
            if let Some(seed) = seed {
                s.seed = seed;
            }
            let report = harness::run(&s).map_err(|e| e.to_string())?;
            print!("{}", report.emit(format(json)));
            Ok(report.all_hold())
        }
        Command::Attack { script, seed, json } => {
            let script = load_script(&script)?;
            let run = harness::run_attack(&script, seed);
            let mut report = Report::new(&format!("attack-{}", run.name), seed);
            report.verdicts.insert(
                run.name.clone(),
                Verdict { expected: run.expected.to_string(), observed: run.outcome.to_string(), holds: run.holds },
            );
            report.count("hygiene_violations", run.hygiene_violations as u64);
            report.count("conservation_holds", u64::from(run.conservation.holds()));
            report.count("adversary_observations", run.observations as u64);
            report.count("os_frames", run.os_frames as u64);
            if let Some(n) = run.detection_samples {
                report.count("detection_samples", n as u64);
            }
            print!("{}", report.emit(format(json)));
            Ok(run.holds)
        }
        Command::Bench { kind, seed, json } => {
            let report = match kind {
                Bench::Time { requests, interval_ns } => harness::bench_time(requests, interval_ns, seed),
                Bench::Net { sizes, count } => harness::bench_net(&sizes, count, seed),
                Bench::Overhead { intervals_ms, preempt_ns } => {
                    let intervals = intervals_ms.iter().map(|s| parse_interval(s)).collect::<Result<Vec<_>, _>>()?;
                    harness::bench_overhead(&intervals, &preempt_ns, seed)
                }
            };
            print!("{}", report.emit(format(json)));
            Ok(true)
        }
        Command::ListScenarios => {
            println!("scenarios");
            for s in corpus::scenarios() {
                println!("  {:<16} {}", s.name, s.description);
            }
            println!("attack scripts");
            for a in corpus::attacks() {
                println!("  {:<16} expects {}", a.name, a.expected);
            }
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("aurora: {e}");
            ExitCode::from(2)
        }
    }
}

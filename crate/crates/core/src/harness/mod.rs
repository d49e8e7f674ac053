//! Scenario runner, benchmarks and reports.

pub mod bench;
pub mod corpus;
pub mod report;
pub mod run;
pub mod scenario;

pub use bench::{bench_net, bench_overhead, bench_time};
pub use report::{BreakdownRow, Format, Point, Report, Verdict};
pub use run::{run, run_attack, AttackRun, HarnessError, Scenario, WORKFLOW};
pub use scenario::Workload;

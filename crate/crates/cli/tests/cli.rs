use std::process::{Command, Output};

fn aurora(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_aurora")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn lists_builtins() {
    let o = aurora(&["list-scenarios"]);
    assert!(o.status.success());
    let text = stdout(&o);
    for name in ["honest-time", "attack-corpus", "replay", "cross-flow", "delay"] {
        assert!(text.contains(name), "{name}");
    }
}

#[test]
fn run_emits_json_and_is_seed_deterministic() {
    let a = aurora(&["run", "batched-time", "--seed", "9", "--json"]);
    let b = aurora(&["run", "batched-time", "--seed", "9", "--json"]);
    assert!(a.status.success());
    let text = stdout(&a);
    assert!(text.trim_start().starts_with('{') && text.contains("\"event_log_sha256\""));
    assert_eq!(text, stdout(&b));
}

#[test]
fn run_accepts_a_scenario_file() {
    let dir = std::env::temp_dir().join(format!("aurora-cli-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("tiny.toml");
    std::fs::write(&path, "name = \"tiny\"\nseed = 3\nworkloads = [{ kind = \"time\", samples = 5 }]\nattacks = [\"tamper\"]\n").unwrap();
    let o = aurora(&["run", path.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("tamper"));
}

#[test]
fn exit_status_reflects_expected_outcomes() {
    assert!(aurora(&["attack", "replay", "--seed", "4"]).status.success());
    // A script whose expectation is wrong must fail the run.
    let dir = std::env::temp_dir().join(format!("aurora-cli-wrong-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("wrong.toml");
    std::fs::write(
        &path,
        r#"
name = "replay-claimed-harmless"
expected = "no_effect"
victim = { kind = "time", samples = 6 }

[[steps]]
when = { on = "response_ready", nth = 1 }
action = { do = "snoop_shared" }

[[steps]]
when = { on = "request_enqueued", nth = 2 }
action = { do = "replay_frame", capture = 0 }
"#,
    )
    .unwrap();
    let o = aurora(&["attack", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1), "{}", stdout(&o));
    assert!(stdout(&o).contains("MISMATCH"));
}

#[test]
fn unknown_names_are_usage_errors() {
    assert_eq!(aurora(&["run", "no-such-scenario"]).status.code(), Some(2));
    assert_eq!(aurora(&["attack", "no-such-script"]).status.code(), Some(2));
}

#[test]
fn bench_overhead_accepts_custom_intervals() {
    let o = aurora(&["bench", "overhead", "--intervals-ms", "5,none", "--preempt-ns", "78000", "--json"]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.contains("overhead_preempt_78000ns_vs_interval_ms"));
    assert!(text.contains("\"inf\""));
}

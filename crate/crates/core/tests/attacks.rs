use aurora::adversary::ExpectedOutcome;
use aurora::harness::{corpus, run_attack};

/// Seeds every shipped script must hold on.
const SEEDS: u64 = 20;

#[test]
fn every_script_holds_on_every_seed() {
    let mut failures = Vec::new();
    for script in corpus::attacks() {
        for seed in 0..SEEDS {
            let run = run_attack(&script, seed);
            if !run.holds {
                failures.push(format!(
                    "{} seed {seed}: expected {} got {} ({:?}, conservation {:?}, hygiene {})",
                    script.name, run.expected, run.outcome, run.observed, run.conservation, run.hygiene_violations
                ));
            }
        }
    }
    assert!(failures.is_empty(), "{}", failures.join("\n"));
}

#[test]
fn time_attacks_are_caught_within_two_samples() {
    for name in ["rtc-rollback", "hpet-freeze", "rate-doubling"] {
        let script = corpus::attack(name).unwrap();
        for seed in 0..5 {
            let run = run_attack(&script, seed);
            let n = run.detection_samples.unwrap_or_else(|| panic!("{name} seed {seed} never detected"));
            assert!(n <= 2, "{name} seed {seed}: {n} samples");
        }
    }
}

#[test]
fn foreign_frame_reaches_the_os_path() {
    let run = run_attack(&corpus::attack("foreign-frame").unwrap(), 3);
    assert!(run.os_frames >= 1);
    assert_eq!(run.outcome, ExpectedOutcome::DetectedAs("AuthFail".into()));
}

#[test]
fn protected_memory_probe_faults() {
    let script = aurora::adversary::AttackScript::from_toml(
        r#"
        name = "probe"
        expected = "no_effect"
        victim = { kind = "time", samples = 3 }
        [[steps]]
        when = { on = "sample_taken", nth = 1 }
        action = { do = "probe_protected" }
        "#,
    )
    .unwrap();
    let run = run_attack(&script, 1);
    assert!(run.holds, "{run:?}");
    assert!(run.observations >= 2);
}

#[test]
fn attack_runs_are_deterministic() {
    let script = corpus::attack("replay").unwrap();
    assert_eq!(run_attack(&script, 11), run_attack(&script, 11));
}

//! Attack scripts and scenarios shipped with the crate.

use crate::adversary::AttackScript;

use super::run::Scenario;

const ATTACKS: [(&str, &str); 12] = [
    ("replay", include_str!("../../attacks/replay.toml")),
    ("tamper", include_str!("../../attacks/tamper.toml")),
    ("drop", include_str!("../../attacks/drop.toml")),
    ("reorder", include_str!("../../attacks/reorder.toml")),
    ("fake-ssv", include_str!("../../attacks/fake_ssv.toml")),
    ("fake-enclave", include_str!("../../attacks/fake_enclave.toml")),
    ("rtc-rollback", include_str!("../../attacks/rtc_rollback.toml")),
    ("hpet-freeze", include_str!("../../attacks/hpet_freeze.toml")),
    ("rate-doubling", include_str!("../../attacks/rate_doubling.toml")),
    ("foreign-frame", include_str!("../../attacks/foreign_frame.toml")),
    ("cross-flow", include_str!("../../attacks/cross_flow.toml")),
    ("delay", include_str!("../../attacks/delay.toml")),
];

const SCENARIOS: [(&str, &str); 4] = [
    ("honest-time", include_str!("../../scenarios/honest_time.toml")),
    ("batched-time", include_str!("../../scenarios/batched_time.toml")),
    ("udp-echo", include_str!("../../scenarios/udp_echo.toml")),
    ("attack-corpus", include_str!("../../scenarios/attack_corpus.toml")),
];

/// Every shipped attack script, in a fixed order.
pub fn attacks() -> Vec<AttackScript> {
    ATTACKS.iter().map(|(name, text)| parse_attack(name, text)).collect()
}

pub fn attack(name: &str) -> Option<AttackScript> {
    ATTACKS.iter().find(|(n, _)| *n == name).map(|(n, t)| parse_attack(n, t))
}

pub fn attack_names() -> Vec<&'static str> {
    ATTACKS.iter().map(|(n, _)| *n).collect()
}

fn parse_attack(name: &str, text: &str) -> AttackScript {
    AttackScript::from_toml(text).unwrap_or_else(|e| panic!("shipped attack {name} is invalid: {e}"))
}

pub fn scenarios() -> Vec<Scenario> {
    SCENARIOS.iter().map(|(name, text)| parse_scenario(name, text)).collect()
}

pub fn scenario(name: &str) -> Option<Scenario> {
    SCENARIOS.iter().find(|(n, _)| *n == name).map(|(n, t)| parse_scenario(n, t))
}

fn parse_scenario(name: &str, text: &str) -> Scenario {
    Scenario::from_toml(text).unwrap_or_else(|e| panic!("shipped scenario {name} is invalid: {e}"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corpus_parses_and_names_match() {
        let all = attacks();
        assert_eq!(all.len(), 12);
        for (script, name) in all.iter().zip(attack_names()) {
            assert_eq!(script.name, name);
            assert!(!script.steps.is_empty());
        }
        assert_eq!(scenarios().len(), SCENARIOS.len());
        for (s, (name, _)) in scenarios().iter().zip(SCENARIOS) {
            assert_eq!(s.name, name);
        }
    }
}

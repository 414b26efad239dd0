use std::collections::HashSet;

use resonance::decision_log::join_logs;
use resonance::learner::make_fixed_policy;
use resonance::sim::{
    build_scenario, compare_arms, compare_arms_with, run_loop, run_loop_from, LoopConfig,
    ScenarioName, SimError, TreatmentArm,
};
use resonance::stats::{mean, sample_variance};

fn small(seed: u64) -> LoopConfig {
    LoopConfig {
        rounds: 20_000,
        model_update_interval: 2_000,
        seed,
        ..LoopConfig::default()
    }
}

#[test]
fn one_round_logs_once_and_swaps_once() {
    let spec = build_scenario(ScenarioName::NetworkReconnect, 42);
    let cfg = LoopConfig {
        rounds: 1,
        model_update_interval: 1,
        ..LoopConfig::default()
    };
    let out = run_loop(&spec, &cfg).unwrap();
    assert_eq!(out.logs.decisions.len(), 1);
    assert_eq!(out.logs.rewards.len(), 1);
    assert_eq!(out.retrains, 1);
    assert_eq!(out.swaps, 1);
    assert_eq!(out.trajectory.len(), 2);
}

#[test]
fn loop_integrity() {
    for name in ScenarioName::ALL {
        let spec = build_scenario(name, 3);
        let out = run_loop(&spec, &small(3)).unwrap();
        assert_eq!(out.logs.decisions.len(), 20_000);
        let (joined, diag) = join_logs(&out.logs.decisions, &out.logs.rewards, 0.0);
        assert_eq!(joined.len(), 20_000);
        assert_eq!(diag.matched, 20_000);
        assert_eq!(diag.defaulted, 0);
        assert_eq!(diag.duplicate_rewards, 0);
        assert_eq!(diag.orphan_rewards, 0);
        assert!(joined.iter().all(|e| !e.reward_was_default));
        let ids: HashSet<_> = out.logs.decisions.iter().map(|d| &d.event_id).collect();
        assert_eq!(ids.len(), 20_000);
        assert_eq!(out.retrains, 10);
        assert!(out
            .rows
            .iter()
            .all(|r| (0.0..=1.0).contains(&r.reward) && r.prob > 0.0));
        for (d, r) in out.logs.decisions.iter().zip(&out.rows) {
            assert_eq!(d.context, spec.context(r.context_index));
            assert_eq!(d.action_index, r.action);
        }
    }
}

#[test]
fn oracle_start_without_exploration_has_zero_regret() {
    let spec = build_scenario(ScenarioName::JbHysteresis, 11);
    let cfg = LoopConfig {
        epsilon: 0.0,
        learn: false,
        ..small(11)
    };
    let oracle = spec.oracle_policy(cfg.hash_bits).unwrap();
    assert_eq!(spec.true_value(&oracle), 1.0);
    let out = run_loop_from(&spec, &cfg, oracle).unwrap();
    assert_eq!(out.mean_regret(&spec, 0..out.rows.len()), 0.0);
    assert!(out.rows.iter().all(|r| r.prob == 1.0));
}

#[test]
fn every_context_is_visited() {
    for name in ScenarioName::ALL {
        let spec = build_scenario(name, 7);
        let cfg = LoopConfig {
            rounds: 50 * spec.num_contexts(),
            model_update_interval: 50 * spec.num_contexts(),
            learn: false,
            ..LoopConfig::default()
        };
        let out = run_loop(&spec, &cfg).unwrap();
        let seen: HashSet<usize> = out.rows.iter().map(|r| r.context_index).collect();
        assert_eq!(seen.len(), spec.num_contexts(), "{name}");
    }
}

#[test]
fn monte_carlo_mean_matches_epsilon_mixture() {
    let spec = build_scenario(ScenarioName::ScreenshareEncoding, 5);
    let cfg = LoopConfig {
        rounds: 1_000_000,
        model_update_interval: 1_000_000,
        learn: false,
        use_broker: false,
        epsilon: 0.2,
        ..LoopConfig::default()
    };
    let policy = spec.oracle_policy(16).unwrap();
    let cfg = LoopConfig {
        hash_bits: 16,
        ..cfg
    };
    let want = spec.epsilon_greedy_value(&policy, 0.2);
    let out = run_loop_from(&spec, &cfg, policy).unwrap();
    let rewards: Vec<f64> = out.rows.iter().map(|r| r.reward).collect();
    let se = (sample_variance(&rewards) / rewards.len() as f64).sqrt();
    let got = mean(&rewards);
    assert!(
        (got - want).abs() < 3.0 * se,
        "mean {got} vs {want} (se {se})"
    );
}

#[test]
fn default_network_reconnect_run_beats_best_fixed() {
    let spec = build_scenario(ScenarioName::NetworkReconnect, 7);
    let out = run_loop(&spec, &LoopConfig::default()).unwrap();
    let (_, best) = spec.best_fixed_action();
    assert!(spec.true_value(&*out.final_policy) > best);
    assert_eq!(out.retrains, 40);
    assert!(out
        .trajectory
        .windows(2)
        .all(|w| w[0].model_id() != w[1].model_id()));
}

#[test]
fn deterministic_given_seed() {
    let spec = build_scenario(ScenarioName::ScreenshareEncoding, 1);
    let a = run_loop(&spec, &small(9)).unwrap();
    let b = run_loop(&spec, &small(9)).unwrap();
    assert_eq!(a.rows, b.rows);
    assert_eq!(a.final_policy.to_bytes(), b.final_policy.to_bytes());
    let c = run_loop(&spec, &small(10)).unwrap();
    assert_ne!(a.rows, c.rows);
}

#[test]
fn invalid_configs_are_rejected() {
    let spec = build_scenario(ScenarioName::JbHysteresis, 0);
    for cfg in [
        LoopConfig {
            rounds: 10,
            model_update_interval: 20,
            ..LoopConfig::default()
        },
        LoopConfig {
            model_update_interval: 0,
            ..LoopConfig::default()
        },
        LoopConfig {
            epsilon: 1.5,
            ..LoopConfig::default()
        },
        LoopConfig {
            learning_rate: 0.0,
            ..LoopConfig::default()
        },
    ] {
        assert!(
            matches!(run_loop(&spec, &cfg), Err(SimError::ConfigInvalid(_))),
            "{cfg:?}"
        );
    }
    assert!(matches!(
        compare_arms(&spec, 0, &small(0), 1),
        Err(SimError::ConfigInvalid(_))
    ));
}

#[test]
fn null_comparison_is_exactly_flat() {
    let spec = build_scenario(ScenarioName::NetworkReconnect, 7);
    let r = compare_arms_with(&spec, 2, &small(1), 4, TreatmentArm::Fixed(2)).unwrap();
    assert_eq!(r.lift_percent, 0.0);
    assert_eq!(r.p_value, 1.0);
    assert_eq!(r.control_means, r.treatment_means);
    assert_eq!(r.control_true_value, spec.fixed_action_value(2));
}

#[test]
fn fixed_start_policy_is_validated() {
    let spec = build_scenario(ScenarioName::NetworkReconnect, 7);
    let wrong = make_fixed_policy::<f64>(&spec.actions, 1, 12).unwrap();
    assert!(matches!(
        run_loop_from(&spec, &small(0), wrong),
        Err(SimError::ConfigInvalid(_))
    ));
}

//! Replicated A/B comparison of a fixed constant against the learning loop.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::learner::make_fixed_policy;
use crate::stats::{mean, welch_t_test};

use super::driver::{replication_seed, run_loop, run_loop_from, LoopConfig, LoopOutcome};
use super::scenario::{ScenarioName, ScenarioSpec};
use super::SimError;

/// What the treatment arm runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TreatmentArm {
    /// The learning loop from a zero policy.
    Learned,
    /// A frozen constant, run exactly like the control arm.
    Fixed(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct RunReport {
    pub scenario: ScenarioName,
    pub control_action: usize,
    pub replications: usize,
    /// Rounds per arm per replication.
    pub n_rounds: usize,
    pub mean_reward_control: f64,
    pub mean_reward_treatment: f64,
    pub lift_percent: f64,
    pub p_value: f64,
    pub t_statistic: f64,
    pub degrees_of_freedom: f64,
    pub control_means: Vec<f64>,
    pub treatment_means: Vec<f64>,
    pub control_true_value: f64,
    pub best_fixed_true_value: f64,
    /// Mean over replications of the final treatment policy's true value.
    pub treatment_true_value: f64,
    /// Expected regret of the final treatment policy per context, averaged over replications.
    pub per_context_regret: BTreeMap<String, f64>,
}

/// [`compare_arms_with`] against the learning loop.
pub fn compare_arms(
    spec: &ScenarioSpec,
    fixed_action: usize,
    cfg: &LoopConfig,
    replications: usize,
) -> Result<RunReport, SimError> {
    compare_arms_with(spec, fixed_action, cfg, replications, TreatmentArm::Learned)
}

/// Run both arms for `replications` independent seeds and Welch-test the
/// per-replication final-quarter mean rewards.
///
/// Within a replication both arms share the seed, so they see the same
/// context sequence and reward noise.
pub fn compare_arms_with(
    spec: &ScenarioSpec,
    fixed_action: usize,
    cfg: &LoopConfig,
    replications: usize,
    treatment: TreatmentArm,
) -> Result<RunReport, SimError> {
    if replications < 2 {
        return Err(SimError::ConfigInvalid(format!(
            "need at least 2 replications, got {replications}"
        )));
    }
    cfg.validate()?;
    let frozen = |seed: u64, action: usize| -> Result<LoopOutcome, SimError> {
        let fixed_cfg = LoopConfig {
            seed,
            epsilon: 0.0,
            learn: false,
            ..cfg.clone()
        };
        let policy = make_fixed_policy::<f64>(&spec.actions, action, cfg.hash_bits)?;
        run_loop_from(spec, &fixed_cfg, policy)
    };

    let n = spec.num_contexts();
    let mut control_means = Vec::with_capacity(replications);
    let mut treatment_means = Vec::with_capacity(replications);
    let mut treatment_values = Vec::with_capacity(replications);
    let mut regret = vec![0.0; n];
    for r in 0..replications {
        let seed = replication_seed(cfg.seed, r as u64);
        let control = frozen(seed, fixed_action)?;
        control_means.push(control.final_quarter_mean_reward());
        drop(control);

        let outcome = match treatment {
            TreatmentArm::Learned => run_loop(
                spec,
                &LoopConfig {
                    seed,
                    ..cfg.clone()
                },
            )?,
            TreatmentArm::Fixed(a) => frozen(seed, a)?,
        };
        treatment_means.push(outcome.final_quarter_mean_reward());
        treatment_values.push(spec.true_value(&*outcome.final_policy));
        for (i, acc) in regret.iter_mut().enumerate() {
            *acc += spec.regret(i, outcome.final_policy.greedy_action(&spec.context(i)));
        }
    }

    let welch = welch_t_test(&treatment_means, &control_means)?;
    let mean_control = mean(&control_means);
    let mean_treatment = mean(&treatment_means);
    let per_context_regret = regret
        .into_iter()
        .enumerate()
        .map(|(i, total)| (spec.context_id(i), total / replications as f64))
        .collect();
    Ok(RunReport {
        scenario: spec.name,
        control_action: fixed_action,
        replications,
        n_rounds: cfg.rounds,
        mean_reward_control: mean_control,
        mean_reward_treatment: mean_treatment,
        lift_percent: 100.0 * (mean_treatment - mean_control) / mean_control,
        p_value: welch.p_value,
        t_statistic: welch.t,
        degrees_of_freedom: welch.df,
        control_means,
        treatment_means,
        control_true_value: spec.fixed_action_value(fixed_action),
        best_fixed_true_value: spec.best_fixed_action().1,
        treatment_true_value: mean(&treatment_values),
        per_context_regret,
    })
}

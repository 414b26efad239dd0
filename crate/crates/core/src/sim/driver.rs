//! Single-threaded loop: broker → policy → logs → learner → model swap.

use std::io::Write;
use std::ops::Range;
use std::sync::Arc;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::bandit_model::{
    encode_context, PolicyModel, Scored, DEFAULT_EPSILON, DEFAULT_HASH_BITS,
};
use crate::decision_log::{join_logs, DecisionRecord, LogSink, MemoryLog, RewardRecord};
use crate::feature::{Context, FeatureValue, ValueKind};
use crate::feature_broker::{FeatureBroker, InputPipe, ModelHandle, OutputPipe, Poll};
use crate::learner::{train_encoded, EncodedExample, TrainConfig, DEFAULT_WEIGHT_CAP};
use crate::{HashedVector, Policy};

use super::scenario::{FeatureScope, ScenarioSpec};
use super::SimError;

pub const CSV_HEADER: [&str; 6] = [
    "round",
    "context_id",
    "action",
    "prob",
    "reward",
    "model_version",
];

#[derive(Debug, Clone, PartialEq)]
pub struct LoopConfig {
    pub rounds: usize,
    pub epsilon: f64,
    pub model_update_interval: usize,
    pub seed: u64,
    pub hash_bits: u32,
    pub learning_rate: f64,
    pub passes: u32,
    pub weight_cap: f64,
    /// Route features through a broker tree; otherwise score the policy directly.
    pub use_broker: bool,
    /// Retrain and swap every `model_update_interval` rounds.
    pub learn: bool,
}

impl Default for LoopConfig {
    fn default() -> Self {
        Self {
            rounds: 200_000,
            epsilon: DEFAULT_EPSILON,
            model_update_interval: 5_000,
            seed: 7,
            hash_bits: DEFAULT_HASH_BITS,
            learning_rate: 0.05,
            passes: 1,
            weight_cap: DEFAULT_WEIGHT_CAP,
            use_broker: true,
            learn: true,
        }
    }
}

impl LoopConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::ConfigInvalid(m));
        if self.model_update_interval == 0 {
            return bad("model update interval must be at least 1".into());
        }
        if self.rounds < self.model_update_interval {
            return bad(format!(
                "rounds ({}) must be at least the model update interval ({})",
                self.rounds, self.model_update_interval
            ));
        }
        if !(0.0..=1.0).contains(&self.epsilon) {
            return bad(format!("epsilon {} outside [0, 1]", self.epsilon));
        }
        self.train_config(0, String::new())
            .validate()
            .map_err(|e| SimError::ConfigInvalid(e.to_string()))
    }

    fn train_config(&self, retrain: u64, model_id: String) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            passes: self.passes,
            weight_cap: self.weight_cap,
            hash_bits: self.hash_bits,
            epsilon_out: self.epsilon,
            seed: replication_seed(self.seed ^ 0x7472_6169_6e00, retrain),
            model_id,
        }
    }
}

/// Seed for replication `index` of a run seeded with `base` (splitmix64 mixing).
pub fn replication_seed(base: u64, index: u64) -> u64 {
    let mut z = base.wrapping_add(index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoundRow {
    pub round: usize,
    pub context_index: usize,
    pub action: usize,
    pub prob: f64,
    pub reward: f64,
    pub model_version: usize,
}

#[derive(Debug, Clone)]
pub struct LoopOutcome {
    pub logs: MemoryLog,
    pub rows: Vec<RoundRow>,
    pub final_policy: Arc<Policy>,
    /// Initial policy followed by every retrained one.
    pub trajectory: Vec<Arc<Policy>>,
    pub retrains: usize,
    pub swaps: usize,
}

impl LoopOutcome {
    /// Rows of the last quarter of the run (at least one row).
    pub fn final_quarter(&self) -> Range<usize> {
        let n = self.rows.len();
        n - (n / 4).max(1).min(n)..n
    }

    pub fn first_quarter(&self) -> Range<usize> {
        0..(self.rows.len() / 4).max(1).min(self.rows.len())
    }

    pub fn mean_reward(&self, range: Range<usize>) -> f64 {
        let rows = &self.rows[range];
        rows.iter().map(|r| r.reward).sum::<f64>() / rows.len() as f64
    }

    pub fn final_quarter_mean_reward(&self) -> f64 {
        self.mean_reward(self.final_quarter())
    }

    /// Mean expected regret of the actions taken in `range`.
    pub fn mean_regret(&self, spec: &ScenarioSpec, range: Range<usize>) -> f64 {
        let rows = &self.rows[range];
        rows.iter()
            .map(|r| spec.regret(r.context_index, r.action))
            .sum::<f64>()
            / rows.len() as f64
    }

    pub fn actions(&self) -> Vec<usize> {
        self.rows.iter().map(|r| r.action).collect()
    }

    pub fn write_csv<W: Write>(&self, spec: &ScenarioSpec, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(CSV_HEADER)?;
        for r in &self.rows {
            w.write_record([
                r.round.to_string(),
                spec.context_id(r.context_index),
                r.action.to_string(),
                r.prob.to_string(),
                r.reward.to_string(),
                r.model_version.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

struct BrokerPath {
    broker: FeatureBroker<Scored<f64>>,
    pipes: Vec<InputPipe>,
    output: OutputPipe<Scored<f64>>,
    handle: ModelHandle,
    arity: usize,
}

impl BrokerPath {
    fn new(spec: &ScenarioSpec, policy: Arc<Policy>) -> Result<Self, SimError> {
        let broker = FeatureBroker::new();
        let root = broker.root();
        let local = root.fork();
        let pipes = spec
            .features
            .iter()
            .map(|f| match f.scope {
                FeatureScope::Shared => root.bind_input(f.key.clone(), ValueKind::Categorical),
                FeatureScope::Local => local.bind_input(f.key.clone(), ValueKind::Categorical),
            })
            .collect::<Result<Vec<_>, _>>()?;
        let keys = spec
            .features
            .iter()
            .map(|f| f.key.clone())
            .collect::<Vec<_>>();
        let arity = keys.len();
        let handle = local.associate_model(
            Arc::new(PolicyModel::new(policy, arity)),
            keys,
            spec.name.output_name(),
        )?;
        let output = local.bind_output(spec.name.output_name())?;
        Ok(Self {
            broker,
            pipes,
            output,
            handle,
            arity,
        })
    }

    fn score(&mut self, round: usize, context: &Context) -> Result<Scored<f64>, SimError> {
        let batch: Vec<(&InputPipe, FeatureValue)> = self
            .pipes
            .iter()
            .zip(context.features())
            .map(|(p, (_, v))| (p, v.clone()))
            .collect();
        self.broker.publish_batch(&batch)?;
        match self.output.poll() {
            Poll::Fresh { output, .. } => Ok(output),
            _ => Err(SimError::StaleOutput(round)),
        }
    }

    fn swap(&self, policy: Arc<Policy>) -> Result<(), SimError> {
        self.broker
            .swap_model(self.handle, Arc::new(PolicyModel::new(policy, self.arity)))?;
        Ok(())
    }
}

/// [`run_loop_from`] starting at the all-zero policy.
pub fn run_loop(spec: &ScenarioSpec, cfg: &LoopConfig) -> Result<LoopOutcome, SimError> {
    cfg.validate()?;
    let initial = Policy::new(
        format!("{}-v0", spec.name),
        spec.actions.clone(),
        cfg.hash_bits,
        cfg.epsilon,
    )?;
    run_loop_from(spec, cfg, initial)
}

/// Run `cfg.rounds` rounds starting from `initial` (its epsilon is replaced by `cfg.epsilon`).
///
/// The context, reward-noise and exploration draws come from separate
/// streams of one seed, so two runs that differ only in their policies see
/// the same contexts and noise.
pub fn run_loop_from(
    spec: &ScenarioSpec,
    cfg: &LoopConfig,
    initial: Policy,
) -> Result<LoopOutcome, SimError> {
    cfg.validate()?;
    if initial.hash_bits() != cfg.hash_bits || initial.actions() != spec.actions.as_slice() {
        return Err(SimError::ConfigInvalid(
            "initial policy must use the scenario's actions and the configured hash bits".into(),
        ));
    }
    let stream = |s: u64| {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(s);
        rng
    };
    let mut context_rng = stream(1);
    let mut noise_rng = stream(2);
    let mut explore_rng = stream(3);

    let contexts = spec.contexts();
    let encoded: Vec<Arc<HashedVector>> = contexts
        .iter()
        .map(|c| Arc::new(encode_context(c, cfg.hash_bits)))
        .collect();

    let mut policy = Arc::new(initial.with_epsilon(cfg.epsilon)?);
    let mut trajectory = vec![Arc::clone(&policy)];
    let mut broker = if cfg.use_broker {
        Some(BrokerPath::new(spec, Arc::clone(&policy))?)
    } else {
        None
    };

    let mut logs = MemoryLog::default();
    let mut rows = Vec::with_capacity(cfg.rounds);
    let mut examples: Vec<EncodedExample<f64>> = Vec::with_capacity(cfg.rounds);
    let mut joined_upto = 0;
    let mut swaps = 0;

    for round in 0..cfg.rounds {
        let idx = context_rng.random_range(0..contexts.len());
        let context = &contexts[idx];
        let prediction = match broker.as_mut() {
            Some(path) => path
                .score(round, context)?
                .select(&mut explore_rng as &mut dyn RngCore),
            None => policy.select_action(&encoded[idx], &mut explore_rng)?,
        };
        let event_id = format!("{}-{round}", spec.name);
        logs.append_decision(&DecisionRecord {
            event_id: event_id.clone(),
            timestamp: round as i64 * 1000,
            model_id: prediction.model_id.clone(),
            context: context.clone(),
            action_index: prediction.action_index,
            action_label: prediction.action.clone(),
            probability: prediction.probability,
        })?;
        let z: f64 = noise_rng.sample(StandardNormal);
        let reward = spec.sample_reward(idx, prediction.action_index, z);
        logs.append_reward(&RewardRecord { event_id, reward })?;
        rows.push(RoundRow {
            round,
            context_index: idx,
            action: prediction.action_index,
            prob: prediction.probability,
            reward,
            model_version: swaps,
        });

        if cfg.learn && (round + 1) % cfg.model_update_interval == 0 {
            // every reward arrives in its decision's round, so joining the
            // new slice and appending is the same as re-joining everything
            let (joined, diag) = join_logs(
                &logs.decisions[joined_upto..],
                &logs.rewards[joined_upto..],
                0.0,
            );
            debug_assert_eq!(diag.defaulted, 0);
            for (row, ex) in rows[joined_upto..].iter().zip(joined) {
                examples.push(EncodedExample {
                    x: Arc::clone(&encoded[row.context_index]),
                    action_index: ex.action_index,
                    probability: ex.probability,
                    reward: ex.reward,
                });
            }
            joined_upto = logs.decisions.len();

            let retrain = trajectory.len();
            let tc = cfg.train_config(retrain as u64, format!("{}-v{retrain}", spec.name));
            let next = Arc::new(train_encoded(&examples, &spec.actions, &tc)?);
            if let Some(path) = broker.as_ref() {
                path.swap(Arc::clone(&next))?;
            }
            swaps += 1;
            policy = next;
            trajectory.push(Arc::clone(&policy));
        }
    }

    Ok(LoopOutcome {
        logs,
        rows,
        final_policy: policy,
        retrains: trajectory.len() - 1,
        trajectory,
        swaps,
    })
}

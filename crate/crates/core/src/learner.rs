//! Offline training and evaluation from joined logs.
//!
//! Training fits one squared-loss regressor per action, each example
//! touching only its logged action with importance weight `min(1/p, cap)`.
//! The step for an example is the closed-form solution of gradient flow on
//! `h·(score − r)²` over a time of `learning_rate`, so a heavily weighted
//! example moves its prediction towards the reward but never past it.
//! Plain gradient steps diverge once `learning_rate · h · ‖x‖²` exceeds one,
//! which happens routinely for exploration propensities like 0.02.

use std::collections::HashMap;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::bandit_model::{
    bias_slot, encode_context, HashedVector, LinearPolicy, ModelError, DEFAULT_EPSILON,
    DEFAULT_HASH_BITS,
};
use crate::decision_log::JoinedExample;
use crate::feature::Context;
use crate::Scalar;

pub const DEFAULT_WEIGHT_CAP: f64 = 100.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LearnError {
    #[error("no training examples")]
    EmptyTrainingSet,
    #[error("example {0} has non-positive propensity")]
    ZeroPropensity(usize),
    #[error("example {index} logs action {action} but the policy has {k} actions")]
    ActionOutOfRange {
        index: usize,
        action: usize,
        k: usize,
    },
    #[error("fixed action {index} out of range for {k} actions")]
    IndexOutOfRange { index: usize, k: usize },
    #[error("invalid training config: {0}")]
    ConfigInvalid(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub passes: u32,
    pub weight_cap: f64,
    pub hash_bits: u32,
    pub epsilon_out: f64,
    pub seed: u64,
    pub model_id: String,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            passes: 4,
            weight_cap: DEFAULT_WEIGHT_CAP,
            hash_bits: DEFAULT_HASH_BITS,
            epsilon_out: DEFAULT_EPSILON,
            seed: 0,
            model_id: "trained".to_owned(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), LearnError> {
        let bad = |m: String| Err(LearnError::ConfigInvalid(m));
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad(format!(
                "learning rate {} must be positive",
                self.learning_rate
            ));
        }
        if self.passes == 0 {
            return bad("passes must be positive".into());
        }
        if !(self.weight_cap.is_finite() && self.weight_cap > 0.0) {
            return bad(format!("weight cap {} must be positive", self.weight_cap));
        }
        if !(0.0..=1.0).contains(&self.epsilon_out) {
            return bad(format!("epsilon {} outside [0, 1]", self.epsilon_out));
        }
        Ok(())
    }
}

fn check_examples(examples: &[JoinedExample]) -> Result<(), LearnError> {
    if examples.is_empty() {
        return Err(LearnError::EmptyTrainingSet);
    }
    if let Some(i) = examples
        .iter()
        .position(|e| e.probability.is_nan() || e.probability <= 0.0)
    {
        return Err(LearnError::ZeroPropensity(i));
    }
    Ok(())
}

/// A joined example with its context already hashed.
#[derive(Debug, Clone)]
pub struct EncodedExample<S> {
    pub x: Arc<HashedVector<S>>,
    pub action_index: usize,
    pub probability: f64,
    pub reward: f64,
}

pub fn encode_examples<S: Scalar>(
    examples: &[JoinedExample],
    hash_bits: u32,
) -> Vec<EncodedExample<S>> {
    examples
        .iter()
        .map(|e| EncodedExample {
            x: Arc::new(encode_context(&e.context, hash_bits)),
            action_index: e.action_index,
            probability: e.probability,
            reward: e.reward,
        })
        .collect()
}

/// Importance-weighted per-action regression over `actions`.
pub fn train_policy<S: Scalar>(
    examples: &[JoinedExample],
    actions: &[String],
    cfg: &TrainConfig,
) -> Result<LinearPolicy<S>, LearnError> {
    train_encoded(&encode_examples(examples, cfg.hash_bits), actions, cfg)
}

// Dense when K·2^b is small, keyed by slot otherwise.
enum Weights<S> {
    Dense { w: Vec<S>, stride: usize },
    Sparse(HashMap<(usize, u64), S>),
}

const DENSE_LIMIT: usize = 1 << 22;

impl<S: Scalar> Weights<S> {
    fn new(k: usize, hash_bits: u32) -> Self {
        let slots = 1usize.checked_shl(hash_bits).unwrap_or(usize::MAX);
        match slots.checked_mul(k) {
            Some(n) if n <= DENSE_LIMIT => Weights::Dense {
                w: vec![S::zero(); n],
                stride: slots,
            },
            _ => Weights::Sparse(HashMap::new()),
        }
    }

    fn get(&self, a: usize, slot: u64) -> S {
        match self {
            Weights::Dense { w, stride } => w[a * stride + slot as usize],
            Weights::Sparse(m) => m.get(&(a, slot)).copied().unwrap_or_else(S::zero),
        }
    }

    fn add(&mut self, a: usize, slot: u64, d: S) {
        match self {
            Weights::Dense { w, stride } => {
                w[a * *stride + slot as usize] = w[a * *stride + slot as usize] + d
            }
            Weights::Sparse(m) => {
                let e = m.entry((a, slot)).or_insert_with(S::zero);
                *e = *e + d;
            }
        }
    }

    fn nonzero(&self) -> Vec<(usize, u64, S)> {
        let mut out: Vec<(usize, u64, S)> = match self {
            Weights::Dense { w, stride } => w
                .iter()
                .enumerate()
                .filter(|(_, v)| **v != S::zero())
                .map(|(i, v)| (i / stride, (i % stride) as u64, *v))
                .collect(),
            Weights::Sparse(m) => m
                .iter()
                .filter(|(_, v)| **v != S::zero())
                .map(|(&(a, s), &v)| (a, s, v))
                .collect(),
        };
        out.sort_by_key(|&(a, s, _)| (a, s));
        out
    }
}

/// [`train_policy`] on examples encoded with `cfg.hash_bits`.
pub fn train_encoded<S: Scalar>(
    examples: &[EncodedExample<S>],
    actions: &[String],
    cfg: &TrainConfig,
) -> Result<LinearPolicy<S>, LearnError> {
    cfg.validate()?;
    if examples.is_empty() {
        return Err(LearnError::EmptyTrainingSet);
    }
    if let Some(i) = examples
        .iter()
        .position(|e| e.probability.is_nan() || e.probability <= 0.0)
    {
        return Err(LearnError::ZeroPropensity(i));
    }
    let k = actions.len();
    if let Some((index, e)) = examples
        .iter()
        .enumerate()
        .find(|(_, e)| e.action_index >= k)
    {
        return Err(LearnError::ActionOutOfRange {
            index,
            action: e.action_index,
            k,
        });
    }
    if let Some(e) = examples.iter().find(|e| e.x.hash_bits() != cfg.hash_bits) {
        return Err(ModelError::HashBitsMismatch {
            expected: cfg.hash_bits,
            got: e.x.hash_bits(),
        }
        .into());
    }
    let mut policy = LinearPolicy::<S>::new(
        cfg.model_id.clone(),
        actions.to_vec(),
        cfg.hash_bits,
        cfg.epsilon_out,
    )?;
    let mut weights = Weights::<S>::new(k, cfg.hash_bits);

    let lr = S::of(cfg.learning_rate);
    let two = S::of(2.0);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    for _ in 0..cfg.passes {
        order.shuffle(&mut rng);
        for &i in &order {
            let ex = &examples[i];
            let norm_sq = ex.x.norm_sq();
            if norm_sq == S::zero() {
                continue;
            }
            let a = ex.action_index;
            let h = S::of((1.0 / ex.probability).min(cfg.weight_cap));
            let score =
                ex.x.entries()
                    .iter()
                    .fold(S::zero(), |acc, (&slot, &m)| acc + weights.get(a, slot) * m);
            let shrink = S::one() - (-two * lr * h * norm_sq).exp();
            let step = (S::of(ex.reward) - score) * shrink / norm_sq;
            for (&slot, &m) in ex.x.entries() {
                weights.add(a, slot, step * m);
            }
        }
    }
    for (a, slot, w) in weights.nonzero() {
        policy.set_weight(a, slot, w)?;
    }
    Ok(policy)
}

/// A deterministic policy evaluated offline.
pub trait TargetPolicy {
    fn target_action(&self, context: &Context) -> usize;
}

impl<S: Scalar> TargetPolicy for LinearPolicy<S> {
    fn target_action(&self, context: &Context) -> usize {
        self.greedy_action(context)
    }
}

impl<T: TargetPolicy + ?Sized> TargetPolicy for &T {
    fn target_action(&self, context: &Context) -> usize {
        (**self).target_action(context)
    }
}

impl<T: TargetPolicy + ?Sized> TargetPolicy for std::sync::Arc<T> {
    fn target_action(&self, context: &Context) -> usize {
        (**self).target_action(context)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct OpeReport {
    pub ips_value: f64,
    pub stderr: f64,
    #[serde(rename = "n")]
    pub n_examples: usize,
    pub clipped_fraction: f64,
}

/// Clipped inverse propensity estimate of `policy`'s value on logged data.
pub fn ips_value(
    examples: &[JoinedExample],
    policy: &impl TargetPolicy,
    weight_cap: f64,
) -> Result<OpeReport, LearnError> {
    check_examples(examples)?;
    if !(weight_cap.is_finite() && weight_cap > 0.0) {
        return Err(LearnError::ConfigInvalid(format!(
            "weight cap {weight_cap} must be positive"
        )));
    }
    let mut clipped = 0usize;
    let terms: Vec<f64> = examples
        .iter()
        .map(|e| {
            if policy.target_action(&e.context) != e.action_index {
                return 0.0;
            }
            let w = 1.0 / e.probability;
            if w > weight_cap {
                clipped += 1;
            }
            e.reward * w.min(weight_cap)
        })
        .collect();
    let n = terms.len();
    let mean = terms.iter().sum::<f64>() / n as f64;
    let stderr = if n > 1 {
        let var = terms.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        (var / n as f64).sqrt()
    } else {
        0.0
    };
    Ok(OpeReport {
        ips_value: mean,
        stderr,
        n_examples: n,
        clipped_fraction: clipped as f64 / n as f64,
    })
}

/// Policy that always picks `action_index` with probability one.
pub fn make_fixed_policy<S: Scalar>(
    actions: &[String],
    action_index: usize,
    hash_bits: u32,
) -> Result<LinearPolicy<S>, LearnError> {
    let k = actions.len();
    if action_index >= k {
        return Err(LearnError::IndexOutOfRange {
            index: action_index,
            k,
        });
    }
    let mut p = LinearPolicy::<S>::new(
        format!("fixed-{action_index}"),
        actions.to_vec(),
        hash_bits,
        0.0,
    )?;
    p.set_weight(action_index, bias_slot(hash_bits), S::one())?;
    Ok(p)
}

/// Action labels `action0..action{k-1}`.
pub fn default_labels(k: usize) -> Vec<String> {
    (0..k).map(|i| format!("action{i}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feature::{FeatureKey, FeatureValue};
    use rand::{Rng, SeedableRng};

    fn ctx(token: &str) -> Context {
        Context::new(vec![(
            FeatureKey::new("t", "c").unwrap(),
            FeatureValue::cat(token),
        )])
        .unwrap()
    }

    fn ex(c: &Context, a: usize, p: f64, r: f64) -> JoinedExample {
        JoinedExample {
            context: c.clone(),
            action_index: a,
            probability: p,
            reward: r,
            reward_was_default: false,
        }
    }

    #[test]
    fn separable_single_context() {
        let c = ctx("only");
        let examples: Vec<_> = (0..200)
            .map(|i| ex(&c, i % 2, 0.5, if i % 2 == 0 { 1.0 } else { 0.0 }))
            .collect();
        let p: LinearPolicy<f64> =
            train_policy(&examples, &default_labels(2), &TrainConfig::default()).unwrap();
        assert_eq!(p.greedy_action(&c), 0);
        assert_eq!(p.epsilon(), 0.2);
        let p32: LinearPolicy<f32> =
            train_policy(&examples, &default_labels(2), &TrainConfig::default()).unwrap();
        assert_eq!(p32.greedy_action(&c), 0);
    }

    #[test]
    fn empty_and_zero_propensity() {
        let cfg = TrainConfig::default();
        assert_eq!(
            train_policy::<f64>(&[], &default_labels(2), &cfg).unwrap_err(),
            LearnError::EmptyTrainingSet
        );
        let bad = vec![ex(&ctx("a"), 0, 0.0, 1.0)];
        assert_eq!(
            train_policy::<f64>(&bad, &default_labels(2), &cfg).unwrap_err(),
            LearnError::ZeroPropensity(0)
        );
        assert_eq!(
            ips_value(
                &[],
                &make_fixed_policy::<f64>(&default_labels(2), 0, 10).unwrap(),
                100.0
            )
            .unwrap_err(),
            LearnError::EmptyTrainingSet
        );
    }

    #[test]
    fn training_is_deterministic() {
        let c1 = ctx("x");
        let c2 = ctx("y");
        let examples: Vec<_> = (0..500)
            .map(|i| {
                ex(
                    if i % 3 == 0 { &c1 } else { &c2 },
                    i % 4,
                    0.25,
                    (i % 7) as f64 / 7.0,
                )
            })
            .collect();
        let cfg = TrainConfig {
            seed: 11,
            ..TrainConfig::default()
        };
        let a: LinearPolicy<f64> = train_policy(&examples, &default_labels(4), &cfg).unwrap();
        let b: LinearPolicy<f64> = train_policy(&examples, &default_labels(4), &cfg).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
    }

    #[test]
    fn two_context_matches_tabular_oracle() {
        // c1 favours action 2, c2 favours action 0
        let means = [[0.2, 0.4, 0.9], [0.8, 0.5, 0.1]];
        let contexts = [ctx("c1"), ctx("c2")];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let examples: Vec<_> = (0..10_000)
            .map(|_| {
                let c = rng.random_range(0..2);
                let a = rng.random_range(0..3);
                let r = means[c][a] + rng.random_range(-0.1..0.1);
                ex(&contexts[c], a, 1.0 / 3.0, r)
            })
            .collect();

        // tabular oracle from the same data
        let mut sums: HashMap<(usize, usize), (f64, usize)> = HashMap::new();
        for e in &examples {
            let c = contexts.iter().position(|c| *c == e.context).unwrap();
            let s = sums.entry((c, e.action_index)).or_default();
            s.0 += e.reward;
            s.1 += 1;
        }
        let oracle = |c: usize| {
            (0..3)
                .max_by(|&a, &b| {
                    let m = |a| sums[&(c, a)].0 / sums[&(c, a)].1 as f64;
                    m(a).total_cmp(&m(b))
                })
                .unwrap()
        };

        let p: LinearPolicy<f64> =
            train_policy(&examples, &default_labels(3), &TrainConfig::default()).unwrap();
        for (i, c) in contexts.iter().enumerate() {
            assert_eq!(p.greedy_action(c), oracle(i), "context {i}");
        }

        // regret against the best fixed action
        let value = |pol: &dyn Fn(usize) -> usize| (means[0][pol(0)] + means[1][pol(1)]) / 2.0;
        let best = |c: usize| if c == 0 { 2 } else { 0 };
        let trained = value(&|c| p.greedy_action(&contexts[c]));
        let best_fixed = (0..3).map(|a| value(&|_| a)).fold(f64::MIN, f64::max);
        let optimum = value(&best);
        assert!(optimum - trained < optimum - best_fixed);
    }

    #[test]
    fn on_policy_ips_is_mean_reward() {
        let c = ctx("a");
        let examples: Vec<_> = [0.2, 0.5, 0.9].iter().map(|&r| ex(&c, 1, 1.0, r)).collect();
        let fixed = make_fixed_policy::<f64>(&default_labels(3), 1, 10).unwrap();
        let rep = ips_value(&examples, &fixed, 100.0).unwrap();
        assert!((rep.ips_value - (0.2 + 0.5 + 0.9) / 3.0).abs() < 1e-12);
        assert_eq!(rep.n_examples, 3);
        assert_eq!(rep.clipped_fraction, 0.0);

        let other = make_fixed_policy::<f64>(&default_labels(3), 2, 10).unwrap();
        let rep = ips_value(&examples, &other, 100.0).unwrap();
        assert_eq!(rep.ips_value, 0.0);
        assert_eq!(rep.stderr, 0.0);
    }

    #[test]
    fn fixed_policy_weights_and_cap() {
        let fixed = make_fixed_policy::<f64>(&default_labels(5), 2, 10).unwrap();
        assert_eq!(fixed.greedy_action(&ctx("anything")), 2);
        assert_eq!(fixed.epsilon(), 0.0);
        assert_eq!(
            make_fixed_policy::<f64>(&default_labels(5), 7, 10).unwrap_err(),
            LearnError::IndexOutOfRange { index: 7, k: 5 }
        );

        // ε-greedy(0.2) around action 0: action 2 was logged with p = 0.2/5
        let c = ctx("a");
        let examples = vec![ex(&c, 2, 0.04, 1.0), ex(&c, 0, 0.84, 1.0)];
        let rep = ips_value(&examples, &fixed, 100.0).unwrap();
        assert!((rep.ips_value - 25.0 / 2.0).abs() < 1e-9);
        assert_eq!(rep.clipped_fraction, 0.0);
        let capped = ips_value(&examples, &fixed, 10.0).unwrap();
        assert!((capped.ips_value - 10.0 / 2.0).abs() < 1e-12);
        assert_eq!(capped.clipped_fraction, 0.5);
    }

    #[test]
    fn config_validation() {
        let cfg = TrainConfig {
            learning_rate: 0.0,
            ..TrainConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(LearnError::ConfigInvalid(_))));
        let cfg = TrainConfig {
            epsilon_out: 1.2,
            ..TrainConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(LearnError::ConfigInvalid(_))));
        let cfg = TrainConfig {
            passes: 0,
            ..TrainConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(LearnError::ConfigInvalid(_))));
    }

    #[test]
    fn out_of_range_logged_action() {
        let examples = vec![ex(&ctx("a"), 3, 0.5, 1.0)];
        assert!(matches!(
            train_policy::<f64>(&examples, &default_labels(2), &TrainConfig::default()),
            Err(LearnError::ActionOutOfRange { action: 3, .. })
        ));
    }
}

//! Hashed linear contextual-bandit policy.
//!
//! Contexts are hashed into `2^b` slots with FNV-1a 64. Each action owns a
//! sparse weight vector over the slots; the greedy action is the argmax of
//! the per-action dot products and exploration is ε-greedy.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::RngCore;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::feature::{Context, FeatureKey, FeatureValue};
use crate::feature_broker::Model;
use crate::Scalar;

pub const POLICY_MAGIC: &str = "resonance-policy";
pub const POLICY_VERSION: u32 = 1;
pub const DEFAULT_HASH_BITS: u32 = 10;
pub const DEFAULT_EPSILON: f64 = 0.2;
pub const MAX_HASH_BITS: u32 = 32;

const BIAS_TOKEN: &str = "__bias__";

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("context hashed with {got} bits, policy uses {expected}")]
    HashBitsMismatch { expected: u32, got: u32 },
    #[error("malformed model: {0}")]
    MalformedModel(String),
    #[error("non-finite weight for action {action} slot {slot}")]
    NonFiniteWeight { action: usize, slot: u64 },
    #[error("invalid policy: {0}")]
    InvalidPolicy(String),
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    bytes
        .iter()
        .fold(OFFSET, |h, &b| (h ^ u64::from(b)).wrapping_mul(PRIME))
}

fn slot_of(s: &str, hash_bits: u32) -> u64 {
    let h = fnv1a64(s.as_bytes());
    if hash_bits >= 64 {
        h
    } else {
        h & ((1u64 << hash_bits) - 1)
    }
}

/// Slot of the always-present bias term.
pub fn bias_slot(hash_bits: u32) -> u64 {
    slot_of(BIAS_TOKEN, hash_bits)
}

/// Slot and multiplier contributed by a single feature.
pub fn feature_slot<S: Scalar>(key: &FeatureKey, value: &FeatureValue, hash_bits: u32) -> (u64, S) {
    let ns = key.namespace();
    let name = key.name();
    match value {
        FeatureValue::Bool(b) => (slot_of(&format!("{ns}|{name}={b}"), hash_bits), S::one()),
        FeatureValue::Categorical(t) => (slot_of(&format!("{ns}|{name}={t}"), hash_bits), S::one()),
        FeatureValue::Int(i) => (
            slot_of(&format!("{ns}|{name}"), hash_bits),
            S::of(*i as f64),
        ),
        FeatureValue::Real(r) => (slot_of(&format!("{ns}|{name}"), hash_bits), S::of(*r)),
    }
}

/// Sparse slot → multiplier vector.
#[derive(Debug, Clone, PartialEq)]
pub struct HashedVector<S> {
    hash_bits: u32,
    entries: BTreeMap<u64, S>,
}

impl<S: Scalar> HashedVector<S> {
    pub fn hash_bits(&self) -> u32 {
        self.hash_bits
    }

    pub fn entries(&self) -> &BTreeMap<u64, S> {
        &self.entries
    }

    pub fn get(&self, slot: u64) -> S {
        self.entries.get(&slot).copied().unwrap_or_else(S::zero)
    }

    /// Squared Euclidean norm.
    pub fn norm_sq(&self) -> S {
        self.entries.values().fold(S::zero(), |acc, &m| acc + m * m)
    }
}

/// Hash a context. Features are visited in canonical order, colliding slots sum.
pub fn encode_context<S: Scalar>(context: &Context, hash_bits: u32) -> HashedVector<S> {
    let mut entries = BTreeMap::new();
    entries.insert(bias_slot(hash_bits), S::one());
    for (key, value) in context.canonical() {
        let (slot, m) = feature_slot::<S>(key, value, hash_bits);
        let e = entries.entry(slot).or_insert_with(S::zero);
        *e = *e + m;
    }
    HashedVector { hash_bits, entries }
}

/// Index of the highest score, ties broken by lowest index.
pub fn argmax<S: Scalar>(scores: &[S]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// ε-greedy probability of choosing `chosen` when `greedy` is the argmax.
pub fn selection_probability(epsilon: f64, k: usize, chosen: usize, greedy: usize) -> f64 {
    let explore = epsilon / k as f64;
    if chosen == greedy {
        (1.0 - epsilon) + explore
    } else {
        explore
    }
}

// Top 53 bits as a uniform double in [0, 1).
fn unit_f64(x: u64) -> f64 {
    (x >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

// Multiply-high map of a uniform u64 onto 0..k.
fn index_below(x: u64, k: usize) -> usize {
    ((u128::from(x) * k as u128) >> 64) as usize
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct Prediction<S> {
    pub action: String,
    pub action_index: usize,
    pub probability: f64,
    pub scores: Vec<S>,
    pub model_id: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearPolicy<S> {
    model_id: String,
    actions: Vec<String>,
    hash_bits: u32,
    weights: Vec<BTreeMap<u64, S>>,
    epsilon: f64,
}

impl<S: Scalar> LinearPolicy<S> {
    /// All-zero policy over `actions`.
    pub fn new(
        model_id: impl Into<String>,
        actions: Vec<String>,
        hash_bits: u32,
        epsilon: f64,
    ) -> Result<Self, ModelError> {
        if actions.len() < 2 {
            return Err(ModelError::InvalidPolicy(format!(
                "need at least 2 actions, got {}",
                actions.len()
            )));
        }
        let mut sorted: Vec<&String> = actions.iter().collect();
        sorted.sort();
        if let Some(w) = sorted.windows(2).find(|w| w[0] == w[1]) {
            return Err(ModelError::InvalidPolicy(format!(
                "duplicate action label {:?}",
                w[0]
            )));
        }
        if hash_bits == 0 || hash_bits > MAX_HASH_BITS {
            return Err(ModelError::InvalidPolicy(format!(
                "hash bits must be in 1..={MAX_HASH_BITS}, got {hash_bits}"
            )));
        }
        if !(0.0..=1.0).contains(&epsilon) {
            return Err(ModelError::InvalidPolicy(format!(
                "epsilon {epsilon} outside [0, 1]"
            )));
        }
        let weights = vec![BTreeMap::new(); actions.len()];
        Ok(Self {
            model_id: model_id.into(),
            actions,
            hash_bits,
            weights,
            epsilon,
        })
    }

    pub fn model_id(&self) -> &str {
        &self.model_id
    }

    pub fn actions(&self) -> &[String] {
        &self.actions
    }

    pub fn num_actions(&self) -> usize {
        self.actions.len()
    }

    pub fn hash_bits(&self) -> u32 {
        self.hash_bits
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn with_epsilon(mut self, epsilon: f64) -> Result<Self, ModelError> {
        if !(0.0..=1.0).contains(&epsilon) {
            return Err(ModelError::InvalidPolicy(format!(
                "epsilon {epsilon} outside [0, 1]"
            )));
        }
        self.epsilon = epsilon;
        Ok(self)
    }

    pub fn with_model_id(mut self, model_id: impl Into<String>) -> Self {
        self.model_id = model_id.into();
        self
    }

    pub fn weights(&self, action: usize) -> &BTreeMap<u64, S> {
        &self.weights[action]
    }

    pub fn weight(&self, action: usize, slot: u64) -> S {
        self.weights[action]
            .get(&slot)
            .copied()
            .unwrap_or_else(S::zero)
    }

    /// Number of stored (nonzero) weights across all actions.
    pub fn nonzero_weights(&self) -> usize {
        self.weights.iter().map(BTreeMap::len).sum()
    }

    pub fn set_weight(&mut self, action: usize, slot: u64, w: S) -> Result<(), ModelError> {
        if !w.is_finite() {
            return Err(ModelError::NonFiniteWeight { action, slot });
        }
        if slot >> self.hash_bits != 0 {
            return Err(ModelError::InvalidPolicy(format!(
                "slot {slot} outside {} hash bits",
                self.hash_bits
            )));
        }
        if w == S::zero() {
            self.weights[action].remove(&slot);
        } else {
            self.weights[action].insert(slot, w);
        }
        Ok(())
    }

    pub fn encode(&self, context: &Context) -> HashedVector<S> {
        encode_context(context, self.hash_bits)
    }

    pub fn score_actions(&self, x: &HashedVector<S>) -> Result<Vec<S>, ModelError> {
        if x.hash_bits != self.hash_bits {
            return Err(ModelError::HashBitsMismatch {
                expected: self.hash_bits,
                got: x.hash_bits,
            });
        }
        Ok(self
            .weights
            .iter()
            .map(|w| {
                x.entries.iter().fold(S::zero(), |acc, (slot, &m)| {
                    acc + w.get(slot).copied().unwrap_or_else(S::zero) * m
                })
            })
            .collect())
    }

    pub fn score_context(&self, context: &Context) -> Vec<S> {
        self.score_actions(&self.encode(context))
            .expect("policy encodes with its own hash bits")
    }

    pub fn greedy_action(&self, context: &Context) -> usize {
        argmax(&self.score_context(context))
    }

    /// ε-greedy choice over precomputed scores.
    ///
    /// Always consumes exactly two `u64` draws from `rng`: one for the
    /// explore coin and one for the uniform index.
    pub fn select_from_scores(&self, scores: Vec<S>, rng: &mut dyn RngCore) -> Prediction<S> {
        let k = self.actions.len();
        let coin = unit_f64(rng.next_u64());
        let uniform = index_below(rng.next_u64(), k);
        let greedy = argmax(&scores);
        let chosen = if coin < self.epsilon { uniform } else { greedy };
        Prediction {
            action: self.actions[chosen].clone(),
            action_index: chosen,
            probability: selection_probability(self.epsilon, k, chosen, greedy),
            scores,
            model_id: self.model_id.clone(),
        }
    }

    pub fn select_action(
        &self,
        x: &HashedVector<S>,
        rng: &mut dyn RngCore,
    ) -> Result<Prediction<S>, ModelError> {
        let scores = self.score_actions(x)?;
        Ok(self.select_from_scores(scores, rng))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let file = PolicyFile {
            magic: POLICY_MAGIC.to_owned(),
            version: POLICY_VERSION,
            model_id: self.model_id.clone(),
            epsilon: self.epsilon,
            hash_bits: self.hash_bits,
            actions: self.actions.clone(),
            weights: self
                .weights
                .iter()
                .map(|ws| {
                    ws.iter()
                        .map(|(&slot, &w)| WeightEntry { slot, w })
                        .collect()
                })
                .collect(),
        };
        serde_json::to_vec(&file).expect("policy serializes")
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ModelError> {
        // parsed wide so that weights overflowing `S` surface as NonFiniteWeight
        let file: PolicyFile<f64> =
            serde_json::from_slice(bytes).map_err(|e| ModelError::MalformedModel(e.to_string()))?;
        if file.magic != POLICY_MAGIC {
            return Err(ModelError::MalformedModel(format!(
                "bad magic {:?}",
                file.magic
            )));
        }
        if file.version != POLICY_VERSION {
            return Err(ModelError::MalformedModel(format!(
                "unsupported version {}",
                file.version
            )));
        }
        if file.weights.len() != file.actions.len() {
            return Err(ModelError::MalformedModel(format!(
                "{} weight vectors for {} actions",
                file.weights.len(),
                file.actions.len()
            )));
        }
        let mut policy = Self::new(file.model_id, file.actions, file.hash_bits, file.epsilon)
            .map_err(|e| ModelError::MalformedModel(e.to_string()))?;
        for (action, entries) in file.weights.into_iter().enumerate() {
            let mut last = None;
            for WeightEntry { slot, w: wide } in entries {
                let w = S::of(wide);
                if last.is_some_and(|prev| slot <= prev) {
                    return Err(ModelError::MalformedModel(format!(
                        "slots for action {action} not strictly increasing at {slot}"
                    )));
                }
                last = Some(slot);
                if !w.is_finite() {
                    return Err(ModelError::NonFiniteWeight { action, slot });
                }
                if w == S::zero() {
                    return Err(ModelError::MalformedModel(format!(
                        "explicit zero weight for action {action} slot {slot}"
                    )));
                }
                policy
                    .set_weight(action, slot, w)
                    .map_err(|e| ModelError::MalformedModel(e.to_string()))?;
            }
        }
        Ok(policy)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
struct PolicyFile<S> {
    magic: String,
    version: u32,
    model_id: String,
    epsilon: f64,
    hash_bits: u32,
    actions: Vec<String>,
    weights: Vec<Vec<WeightEntry<S>>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WeightEntry<S> {
    slot: u64,
    w: S,
}

/// Scores produced by a policy evaluated inside the broker.
///
/// Exploration happens on the consumer side so the caller keeps ownership of
/// its random stream.
#[derive(Debug, Clone)]
pub struct Scored<S> {
    pub context: Context,
    pub scores: Vec<S>,
    pub policy: Arc<LinearPolicy<S>>,
}

impl<S: Scalar> Scored<S> {
    pub fn select(self, rng: &mut dyn RngCore) -> Prediction<S> {
        self.policy.select_from_scores(self.scores, rng)
    }
}

/// Broker adapter: turns the resolved input features into action scores.
pub struct PolicyModel<S> {
    policy: Arc<LinearPolicy<S>>,
    arity: usize,
}

impl<S: Scalar> PolicyModel<S> {
    pub fn new(policy: Arc<LinearPolicy<S>>, arity: usize) -> Self {
        Self { policy, arity }
    }
}

impl<S: Scalar> Model<Scored<S>> for PolicyModel<S> {
    fn arity(&self) -> usize {
        self.arity
    }

    fn evaluate(&self, features: &[(FeatureKey, FeatureValue)]) -> Scored<S> {
        let context = Context::new(features.to_vec()).expect("broker keys are unique and finite");
        let scores = self.policy.score_context(&context);
        Scored {
            context,
            scores,
            policy: Arc::clone(&self.policy),
        }
    }
}

//! Synthetic environments standing in for the three production scenarios.
//!
//! The reward surfaces are invented: each context has an optimal action
//! index `a*` and a sharpness `s`, and the expected reward of action `a` is
//! `clamp(1 − (a − a*)²/s, 0, 1)`. `a*` is the rounded sum of seeded
//! per-feature effects, so contexts sharing a feature value have related
//! optima. Sampled rewards add Gaussian noise clipped symmetrically to stay
//! inside `[0, 1]`, which keeps the expectation equal to the noiseless value.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::bandit_model::{bias_slot, feature_slot};
use crate::feature::{Context, FeatureKey, FeatureValue};
use crate::learner::TargetPolicy;
use crate::Policy;

use super::SimError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioName {
    JbHysteresis,
    ScreenshareEncoding,
    NetworkReconnect,
}

impl ScenarioName {
    pub const ALL: [ScenarioName; 3] = [
        ScenarioName::JbHysteresis,
        ScenarioName::ScreenshareEncoding,
        ScenarioName::NetworkReconnect,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ScenarioName::JbHysteresis => "jb_hysteresis",
            ScenarioName::ScreenshareEncoding => "screenshare_encoding",
            ScenarioName::NetworkReconnect => "network_reconnect",
        }
    }

    /// Accepts `snake_case` and `kebab-case`.
    pub fn parse(s: &str) -> Result<Self, SimError> {
        let norm = s.replace('-', "_");
        Self::ALL
            .into_iter()
            .find(|n| n.as_str() == norm)
            .ok_or_else(|| SimError::UnknownScenario(s.to_owned()))
    }

    /// Broker output name for the scenario's model.
    pub fn output_name(self) -> &'static str {
        match self {
            ScenarioName::JbHysteresis => "jbHysteresis",
            ScenarioName::ScreenshareEncoding => "screenshareEncoding",
            ScenarioName::NetworkReconnect => "networkReconnect",
        }
    }
}

impl std::fmt::Display for ScenarioName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Where a context feature is produced in the broker tree.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureScope {
    /// Bound on the root, visible to every scenario.
    Shared,
    /// Bound on the scenario's own fork.
    Local,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContextFeature {
    pub key: FeatureKey,
    pub tokens: Vec<String>,
    pub scope: FeatureScope,
}

impl ContextFeature {
    pub fn cardinality(&self) -> usize {
        self.tokens.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioSpec {
    pub name: ScenarioName,
    pub features: Vec<ContextFeature>,
    pub actions: Vec<String>,
    /// Optimal action index per context.
    pub optimal_action: Vec<usize>,
    /// Sharpness `s(x)` per context.
    pub sharpness: Vec<f64>,
    pub noise_std: f64,
    pub seed: u64,
    /// Latent optimum before rounding: `center + Σ effects[f][value]`.
    pub center: f64,
    pub effects: Vec<Vec<f64>>,
}

struct Layout {
    features: Vec<(FeatureKey, Vec<String>, FeatureScope, Effect)>,
    actions: Vec<String>,
    center: f64,
    sharpness: (f64, f64),
}

enum Effect {
    /// Seeded effects in `[-span/2, span/2]`, unordered.
    Free(f64),
    /// Sorted ascending (or descending when negative span).
    Monotone(f64),
    /// Explicit offsets.
    Fixed(Vec<f64>),
}

fn key(ns: &str, name: &str) -> FeatureKey {
    FeatureKey::new(ns, name).expect("static keys are valid")
}

fn tokens(prefix: &str, n: usize) -> Vec<String> {
    (0..n).map(|i| format!("{prefix}{i:02}")).collect()
}

fn strs(v: &[&str]) -> Vec<String> {
    v.iter().map(|s| (*s).to_owned()).collect()
}

fn platform() -> Vec<String> {
    strs(&["desktop", "mobile"])
}

fn network_types() -> Vec<String> {
    strs(&["wired", "wifi", "lte", "3g", "other"])
}

fn layout(name: ScenarioName) -> Layout {
    use FeatureScope::{Local, Shared};
    match name {
        // 2 × 7 = 14 contexts, 10 hysteresis levels
        ScenarioName::JbHysteresis => Layout {
            features: vec![
                (
                    key("audio", "callType"),
                    strs(&["audio", "video"]),
                    Local,
                    Effect::Free(2.0),
                ),
                (
                    key("call", "networkBucket"),
                    tokens("jitter", 7),
                    Shared,
                    Effect::Monotone(6.0),
                ),
            ],
            actions: (0..10).map(|i| format!("hyst{i}")).collect(),
            center: 4.5,
            sharpness: (4.0, 12.0),
        },
        // 2 × 5 × 44 = 440 contexts, 10 rate/freeze trade-off weights
        ScenarioName::ScreenshareEncoding => Layout {
            features: vec![
                (
                    key("call", "platform"),
                    platform(),
                    Shared,
                    Effect::Free(1.5),
                ),
                (
                    key("call", "nwType"),
                    network_types(),
                    Shared,
                    Effect::Free(2.0),
                ),
                (
                    key("screenshare", "bandwidthBucket"),
                    tokens("bw", 44),
                    Local,
                    Effect::Monotone(5.0),
                ),
            ],
            actions: (0..10).map(|i| format!("weight{i}")).collect(),
            center: 4.5,
            sharpness: (4.0, 12.0),
        },
        // 2 × 5 × 3 × 13 = 390 contexts, 5 reconnect thresholds
        ScenarioName::NetworkReconnect => Layout {
            features: vec![
                // mobile optimum sits exactly one threshold below desktop
                (
                    key("call", "platform"),
                    platform(),
                    Shared,
                    Effect::Fixed(vec![0.0, -1.0]),
                ),
                (
                    key("call", "nwType"),
                    network_types(),
                    Shared,
                    Effect::Free(1.0),
                ),
                (
                    key("reconnect", "lossBucket"),
                    strs(&["low", "mid", "high"]),
                    Local,
                    Effect::Monotone(-1.2),
                ),
                (
                    key("reconnect", "rttBucket"),
                    tokens("rtt", 13),
                    Local,
                    Effect::Monotone(1.6),
                ),
            ],
            actions: strs(&["1000ms", "2000ms", "4000ms", "8000ms", "16000ms"]),
            center: 2.5,
            sharpness: (1.5, 4.0),
        },
    }
}

const NOISE_STD: f64 = 0.1;

/// Deterministic scenario from `(name, seed)`.
pub fn build_scenario(name: ScenarioName, seed: u64) -> ScenarioSpec {
    let layout = layout(name);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(name as u64 + 1);

    let effects: Vec<Vec<f64>> = layout
        .features
        .iter()
        .map(|(_, toks, _, effect)| match effect {
            Effect::Fixed(v) => v.clone(),
            Effect::Free(span) => (0..toks.len())
                .map(|_| span * (rng.random::<f64>() - 0.5))
                .collect(),
            Effect::Monotone(span) => {
                let mut v: Vec<f64> = (0..toks.len())
                    .map(|_| span.abs() * (rng.random::<f64>() - 0.5))
                    .collect();
                v.sort_by(f64::total_cmp);
                if *span < 0.0 {
                    v.reverse();
                }
                v
            }
        })
        .collect();

    let features: Vec<ContextFeature> = layout
        .features
        .into_iter()
        .map(|(key, tokens, scope, _)| ContextFeature { key, tokens, scope })
        .collect();
    let k = layout.actions.len();
    let n: usize = features.iter().map(ContextFeature::cardinality).product();

    let mut spec = ScenarioSpec {
        name,
        features,
        actions: layout.actions,
        optimal_action: Vec::with_capacity(n),
        sharpness: Vec::with_capacity(n),
        noise_std: NOISE_STD,
        seed,
        center: layout.center,
        effects,
    };
    let (lo, hi) = layout.sharpness;
    for idx in 0..n {
        let z = spec.latent_optimum(idx);
        spec.optimal_action
            .push(z.round().clamp(0.0, (k - 1) as f64) as usize);
        spec.sharpness.push(lo + (hi - lo) * rng.random::<f64>());
    }
    spec
}

impl ScenarioSpec {
    pub fn by_name(name: &str, seed: u64) -> Result<Self, SimError> {
        Ok(build_scenario(ScenarioName::parse(name)?, seed))
    }

    pub fn num_contexts(&self) -> usize {
        self.optimal_action.len()
    }

    pub fn num_actions(&self) -> usize {
        self.actions.len()
    }

    /// Token index of each feature for context `idx` (first feature most significant).
    pub fn decompose(&self, mut idx: usize) -> Vec<usize> {
        let mut out = vec![0; self.features.len()];
        for (slot, f) in out.iter_mut().zip(&self.features).rev() {
            *slot = idx % f.cardinality();
            idx /= f.cardinality();
        }
        out
    }

    fn latent_optimum(&self, idx: usize) -> f64 {
        self.center
            + self
                .decompose(idx)
                .iter()
                .zip(&self.effects)
                .map(|(&t, e)| e[t])
                .sum::<f64>()
    }

    pub fn context(&self, idx: usize) -> Context {
        let features = self
            .decompose(idx)
            .into_iter()
            .zip(&self.features)
            .map(|(t, f)| {
                (
                    f.key.clone(),
                    FeatureValue::Categorical(f.tokens[t].clone()),
                )
            })
            .collect();
        Context::new(features).expect("scenario keys are unique")
    }

    pub fn contexts(&self) -> Vec<Context> {
        (0..self.num_contexts()).map(|i| self.context(i)).collect()
    }

    /// Human-readable id, e.g. `mobile/wifi/low/rtt03`.
    pub fn context_id(&self, idx: usize) -> String {
        self.decompose(idx)
            .into_iter()
            .zip(&self.features)
            .map(|(t, f)| f.tokens[t].as_str())
            .collect::<Vec<_>>()
            .join("/")
    }

    /// Inverse of [`context`](Self::context); `None` if the context is not in this scenario.
    pub fn index_of(&self, context: &Context) -> Option<usize> {
        let mut idx = 0;
        for f in &self.features {
            let t = match context.get(&f.key)? {
                FeatureValue::Categorical(tok) => f.tokens.iter().position(|x| x == tok)?,
                _ => return None,
            };
            idx = idx * f.cardinality() + t;
        }
        (context.len() == self.features.len()).then_some(idx)
    }

    pub fn expected_reward(&self, idx: usize, action: usize) -> f64 {
        let d = action as f64 - self.optimal_action[idx] as f64;
        (1.0 - d * d / self.sharpness[idx]).clamp(0.0, 1.0)
    }

    /// Noisy reward given a standard normal draw.
    pub fn sample_reward(&self, idx: usize, action: usize, standard_normal: f64) -> f64 {
        let mean = self.expected_reward(idx, action);
        let room = mean.min(1.0 - mean);
        mean + (self.noise_std * standard_normal).clamp(-room, room)
    }

    pub fn regret(&self, idx: usize, action: usize) -> f64 {
        1.0 - self.expected_reward(idx, action)
    }

    /// Exact expected reward of a deterministic policy under uniform contexts.
    pub fn true_value(&self, policy: &impl TargetPolicy) -> f64 {
        let n = self.num_contexts();
        (0..n)
            .map(|i| self.expected_reward(i, policy.target_action(&self.context(i))))
            .sum::<f64>()
            / n as f64
    }

    /// Exact expected reward of ε-greedy exploration around `policy`.
    pub fn epsilon_greedy_value(&self, policy: &impl TargetPolicy, epsilon: f64) -> f64 {
        let n = self.num_contexts();
        let k = self.num_actions();
        (0..n)
            .map(|i| {
                let greedy = self.expected_reward(i, policy.target_action(&self.context(i)));
                let uniform = (0..k).map(|a| self.expected_reward(i, a)).sum::<f64>() / k as f64;
                (1.0 - epsilon) * greedy + epsilon * uniform
            })
            .sum::<f64>()
            / n as f64
    }

    pub fn fixed_action_value(&self, action: usize) -> f64 {
        let n = self.num_contexts();
        (0..n).map(|i| self.expected_reward(i, action)).sum::<f64>() / n as f64
    }

    /// Best constant action by enumeration (lowest index on ties).
    pub fn best_fixed_action(&self) -> (usize, f64) {
        (0..self.num_actions())
            .map(|a| (a, self.fixed_action_value(a)))
            .fold((0, f64::NEG_INFINITY), |best, cur| {
                if cur.1 > best.1 {
                    cur
                } else {
                    best
                }
            })
    }

    /// Linear policy whose greedy action is `a*` in every context, unless two
    /// of the scenario's tokens collide at `hash_bits`.
    ///
    /// Scores are `2a·z(x) − a²`, maximised at the action nearest the latent
    /// optimum `z(x)`; the expression is linear in one-hot features.
    pub fn oracle_policy(&self, hash_bits: u32) -> Result<Policy, SimError> {
        let mut p = Policy::new(
            format!("{}-oracle", self.name),
            self.actions.clone(),
            hash_bits,
            0.0,
        )?;
        for a in 0..self.num_actions() {
            let af = a as f64;
            let add = |p: &mut Policy, slot: u64, w: f64| {
                let cur = p.weight(a, slot);
                p.set_weight(a, slot, cur + w)
            };
            add(
                &mut p,
                bias_slot(hash_bits),
                2.0 * af * self.center - af * af,
            )?;
            for (f, effects) in self.features.iter().zip(&self.effects) {
                for (tok, e) in f.tokens.iter().zip(effects) {
                    let (slot, _) = feature_slot::<f64>(
                        &f.key,
                        &FeatureValue::Categorical(tok.clone()),
                        hash_bits,
                    );
                    add(&mut p, slot, 2.0 * af * e)?;
                }
            }
        }
        Ok(p)
    }
}

/// Target policy backed by the scenario's true optima.
pub struct OraclePolicy<'a>(pub &'a ScenarioSpec);

impl TargetPolicy for OraclePolicy<'_> {
    fn target_action(&self, context: &Context) -> usize {
        let idx = self
            .0
            .index_of(context)
            .expect("context belongs to scenario");
        self.0.optimal_action[idx]
    }
}

/// Target policy that ignores the context.
pub struct ConstantPolicy(pub usize);

impl TargetPolicy for ConstantPolicy {
    fn target_action(&self, _: &Context) -> usize {
        self.0
    }
}

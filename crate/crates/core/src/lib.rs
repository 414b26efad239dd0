//! Contextual-bandit replacement of fixed application constants.
//!
//! The crate is organised bottom-up:
//!
//! * [`feature`] holds the feature key/value vocabulary shared by every layer.
//! * [`feature_broker`] mediates between feature producers (input pipes) and
//!   model consumers (output pipes), with coherent snapshots and forkable
//!   hierarchy.
//! * [`bandit_model`] is the compact hashed linear policy with ε-greedy
//!   selection and its JSON model file.
//! * [`decision_log`] captures decisions and rewards as JSONL and joins them.
//! * [`learner`] trains policies from joined logs and evaluates them with IPS.
//! * [`sim`] provides synthetic scenarios and the decide-log-retrain loop.
//! * [`stats`] has the Welch t-test used to compare control and treatment.
//! * [`cli`] binds everything into the `resonance` command.
//!
//! Numeric code in [`bandit_model`] and [`learner`] is generic over a
//! [`Scalar`] (`f32` or `f64`); the aliases below fix the common choice.

pub mod bandit_model;
pub mod cli;
pub mod decision_log;
pub mod feature;
pub mod feature_broker;
pub mod learner;
pub mod scalar;
pub mod sim;
pub mod stats;

pub use scalar::Scalar;

/// Double-precision policy, the default used by the simulator and CLI.
pub type Policy = bandit_model::LinearPolicy<f64>;
/// Single-precision policy for memory-constrained deployments.
pub type PolicyF32 = bandit_model::LinearPolicy<f32>;
/// Double-precision hashed feature vector.
pub type HashedVector = bandit_model::HashedVector<f64>;
/// Double-precision prediction.
pub type Prediction = bandit_model::Prediction<f64>;

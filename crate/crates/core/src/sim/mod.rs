//! Synthetic scenarios, the decide-log-retrain loop and fixed-vs-learned comparisons.

mod compare;
mod driver;
mod scenario;

use thiserror::Error;

use crate::bandit_model::ModelError;
use crate::decision_log::LogError;
use crate::feature_broker::BrokerError;
use crate::learner::LearnError;
use crate::stats::StatsError;

pub use compare::{compare_arms, compare_arms_with, RunReport, TreatmentArm};
pub use driver::{
    replication_seed, run_loop, run_loop_from, LoopConfig, LoopOutcome, RoundRow, CSV_HEADER,
};
pub use scenario::{
    build_scenario, ConstantPolicy, ContextFeature, FeatureScope, OraclePolicy, ScenarioName,
    ScenarioSpec,
};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("unknown scenario {0:?}")]
    UnknownScenario(String),
    #[error("invalid loop config: {0}")]
    ConfigInvalid(String),
    #[error(transparent)]
    Broker(#[from] BrokerError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Learn(#[from] LearnError),
    #[error(transparent)]
    Log(#[from] LogError),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error("broker output was not fresh in round {0}")]
    StaleOutput(usize),
}

//! Deterministic federated-learning simulation with validation-score
//! aggregation.
//!
//! The crate is organised around the communication round: clients train a
//! small MLP ([`model`]) on shards of a dataset ([`data`]), some of them
//! misbehave ([`adversary`]), updates may be clipped and noised
//! ([`privacy`]), and the server combines them with one of several rules
//! ([`aggregators`], [`fedval`]). [`orchestrator`] drives the rounds and
//! [`metrics`] scores the resulting global model.

pub mod adversary;
pub mod aggregators;
pub mod data;
pub mod error;
pub mod fedval;
pub mod metrics;
pub mod model;
pub mod orchestrator;
pub mod privacy;
pub mod seed;

pub use adversary::{AttackKind, AttackSpec};
pub use aggregators::{Aggregate, Aggregator, ClientUpdate, RoundContext, Strategy, StrategyKind};
pub use data::{Dataset, ValidationSet};
pub use error::{Error, Result};
pub use fedval::{ScoreDims, ScoreParams, ScoreTable, ValidationReport};
pub use metrics::MetricRecord;
pub use model::{MlpSpec, ParamVector, TrainSpec};
pub use orchestrator::{run_experiment, ExperimentConfig, ExperimentResult, RoundLog, Simulation};
pub use privacy::{DpConfig, DpState};

//! The communication-round loop.
//!
//! Each round selects clients from `(selection_seed, round)` alone, trains
//! them in parallel (malicious clients substitute their attack), optionally
//! clips and noises the deltas, aggregates, and records metrics. All
//! randomness is derived from explicit seeds and parallel results are
//! collected in order, so output does not depend on the worker count.

mod analysis;
mod config;

pub use analysis::{malicious_round_probability, Cutoff, RoundProbability};
pub use config::{ExperimentConfig, HoldoutSpec, TaskSpec};

use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adversary::{pga_update, place_malicious, poison_dataset, AttackKind};
use crate::aggregators::{
    Aggregator, ClientUpdate, FedAvg, Lfr, MultiKrum, PreTransform, RoundContext, StrategyKind,
    TrimmedMean,
};
use crate::data::{
    build_validation, gen_synthetic, load_csv, partition, stratified_split, Dataset, ValidationSet,
};
use crate::error::{Error, Result};
use crate::fedval::FedVal;
use crate::metrics::{evaluate, MetricRecord};
use crate::model::{eval_losses, init_params, local_train, MlpSpec, ParamVector, TrainSpec};
use crate::privacy::{adapt_bound, add_noise, clip, DpState};
use crate::seed;

const SELECTION_STREAM: u64 = 0x5e1e;
const TRAIN_STREAM: u64 = 0x7a19;
const NOISE_STREAM: u64 = 0x9015;

/// `count` distinct client ids in ascending order, drawn uniformly from
/// `(selection_seed, round)` only.
pub fn select_clients(
    population: usize,
    count: usize,
    round: usize,
    selection_seed: u64,
) -> Result<Vec<usize>> {
    if count > population {
        return Err(Error::config(
            "clients_per_round",
            format!("{count} exceeds the {population} clients"),
        ));
    }
    let mut rng = seed::derived_rng(selection_seed, &[SELECTION_STREAM, round as u64]);
    let mut ids = index::sample(&mut rng, population, count).into_vec();
    ids.sort_unstable();
    Ok(ids)
}

/// What happened in one round.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundLog {
    /// 1-based round number.
    pub round: usize,
    pub selected: Vec<usize>,
    pub malicious_selected: usize,
    /// Aggregation weight per selected client, in `selected` order.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weights: Option<Vec<f64>>,
    /// Raw validation scores, when the strategy computes them.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scores: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub s2: Option<f64>,
    pub zero_update: bool,
    /// Clip bound used this round, when norm bounding is active.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub clip_bound: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub metrics: Option<MetricRecord>,
}

/// Output of a full run.
#[derive(Clone, Debug)]
pub struct ExperimentResult {
    pub records: Vec<MetricRecord>,
    pub logs: Vec<RoundLog>,
    pub final_model: ParamVector,
}

/// Data and model state of a running experiment.
pub struct Simulation {
    config: ExperimentConfig,
    clients: Vec<Dataset>,
    malicious: Vec<bool>,
    test: Dataset,
    validation: ValidationSet,
    global: ParamVector,
    aggregator: Box<dyn Aggregator>,
    dp: Option<DpState>,
    round: usize,
}

fn make_aggregator(config: &ExperimentConfig) -> Box<dyn Aggregator> {
    match config.strategy.kind {
        StrategyKind::Fedavg => Box::new(FedAvg),
        StrategyKind::Fedval => Box::new(FedVal::new(config.score.clone(), config.fedval.clone())),
        StrategyKind::MultiKrum { remove_fraction } => Box::new(MultiKrum { remove_fraction }),
        StrategyKind::Lfr { remove_fraction } => Box::new(Lfr { remove_fraction }),
        StrategyKind::TrimmedMean { trim_fraction } => Box::new(TrimmedMean { trim_fraction }),
    }
}

fn load_task(config: &ExperimentConfig) -> Result<Dataset> {
    let data = match &config.task {
        TaskSpec::Synthetic(spec) => gen_synthetic(spec)?,
        TaskSpec::Csv { path, schema } => load_csv(path, schema)?,
    };
    if data.dim() != config.model.input_dim() {
        return Err(Error::config(
            "model.layer_sizes",
            format!(
                "input size {} does not match {} data features",
                config.model.input_dim(),
                data.dim()
            ),
        ));
    }
    if data.class_count() != config.model.class_count() {
        return Err(Error::config(
            "model.layer_sizes",
            format!(
                "output size {} does not match {} data classes",
                config.model.class_count(),
                data.class_count()
            ),
        ));
    }
    Ok(data)
}

impl Simulation {
    /// Validates the config, builds the data splits and the initial model.
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let data = load_task(&config)?;
        let h = &config.holdout;
        let (test_idx, rest_idx) = stratified_split(&data, h.test_fraction, h.seed)?;
        let test = data.subset(&test_idx)?;
        let rest = data.subset(&rest_idx)?;
        let split = build_validation(&rest, h.validation_per_label, h.balanced_validation, h.seed)?;
        let pool = rest.subset(&split.remainder_indices)?;
        let mut clients = partition(&pool, &config.partition)?;

        let n = config.partition.client_count;
        let mut malicious = vec![false; n];
        if config.attack.is_active() {
            for id in place_malicious(
                n,
                config.attack.malicious_fraction,
                config.attack.placement_seed,
            )? {
                malicious[id] = true;
            }
        }
        if let AttackKind::LabelFlip {
            source_label,
            target_label,
        } = config.attack.kind
        {
            for (c, bad) in clients.iter_mut().zip(&malicious) {
                if *bad {
                    *c = poison_dataset(c, source_label, target_label)?;
                }
            }
        }
        let dp = match &config.dp {
            Some(d) => Some(DpState::new(d)?),
            None => None,
        };
        Ok(Simulation {
            global: init_params(&config.model)?,
            aggregator: make_aggregator(&config),
            config,
            clients,
            malicious,
            test,
            validation: split.validation,
            dp,
            round: 0,
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    pub fn global(&self) -> &ParamVector {
        &self.global
    }

    pub fn clients(&self) -> &[Dataset] {
        &self.clients
    }

    pub fn malicious(&self) -> Vec<usize> {
        (0..self.malicious.len())
            .filter(|&i| self.malicious[i])
            .collect()
    }

    pub fn test_set(&self) -> &Dataset {
        &self.test
    }

    pub fn validation_set(&self) -> &ValidationSet {
        &self.validation
    }

    /// Rounds completed so far.
    pub fn rounds_done(&self) -> usize {
        self.round
    }

    fn client_train_spec(&self, round: usize, client: usize) -> TrainSpec {
        TrainSpec {
            seed: seed::derive(
                self.config.train.seed,
                &[TRAIN_STREAM, round as u64, client as u64],
            ),
            ..self.config.train.clone()
        }
    }

    fn client_update(&self, round: usize, client: usize) -> Result<ClientUpdate> {
        let spec: &MlpSpec = &self.config.model;
        let data = &self.clients[client];
        let train = self.client_train_spec(round, client);
        let model = match self.config.attack.kind {
            AttackKind::Pga {
                scale_factor,
                ascent_epochs,
            } if self.malicious[client] => {
                let honest = TrainSpec {
                    prox_mu: 0.0,
                    ..train
                };
                pga_update(
                    &self.global,
                    spec,
                    data,
                    &honest,
                    scale_factor,
                    ascent_epochs,
                )?
            }
            _ => local_train(&self.global, spec, data, &train)?,
        };
        Ok(ClientUpdate {
            client_id: client,
            delta: model.sub(&self.global)?,
            sample_count: data.len(),
        })
    }

    /// Clips and noises deltas in the configured order; returns the bound
    /// used, if any.
    fn apply_privacy(&mut self, round: usize, updates: &mut [ClientUpdate]) -> Result<Option<f64>> {
        let Some(state) = self.dp.as_mut() else {
            return Ok(None);
        };
        let bound = state.clip_bound;
        let participants = updates.len();
        let noise_seed = self.config.dp.as_ref().map_or(0, |d| d.seed);
        let mut flags = None;
        for t in &self.config.strategy.pre_transforms {
            match t {
                PreTransform::NormBound => {
                    let f = updates
                        .iter_mut()
                        .map(|u| {
                            let (c, was) = clip(&u.delta, bound);
                            u.delta = c;
                            was
                        })
                        .collect::<Vec<_>>();
                    flags = Some(f);
                }
                PreTransform::DpNoise => {
                    for u in updates.iter_mut() {
                        let s = seed::derive(
                            noise_seed,
                            &[NOISE_STREAM, round as u64, u.client_id as u64],
                        );
                        u.delta =
                            add_noise(&u.delta, state.noise_multiplier, bound, participants, s)?;
                    }
                }
            }
        }
        if let Some(f) = flags {
            state.clip_bound = adapt_bound(state, &f)?;
            Ok(Some(bound))
        } else {
            Ok(None)
        }
    }

    /// Runs one round and advances the global model.
    pub fn run_round(&mut self) -> Result<RoundLog> {
        let round = self.round + 1;
        self.step(round).map_err(|e| Error::Round {
            round,
            source: Box::new(e),
        })
    }

    fn step(&mut self, round: usize) -> Result<RoundLog> {
        let selected = select_clients(
            self.config.partition.client_count,
            self.config.clients_per_round,
            round,
            self.config.selection_seed,
        )?;
        let mut updates = selected
            .par_iter()
            .map(|&c| self.client_update(round, c))
            .collect::<Result<Vec<_>>>()?;
        let clip_bound = self.apply_privacy(round, &mut updates)?;
        let ctx = RoundContext {
            spec: &self.config.model,
            validation: &self.validation,
        };
        let agg = self.aggregator.aggregate(&self.global, &updates, &ctx)?;
        if !agg.model.is_finite() {
            return Err(Error::InsufficientData(
                "aggregated model has non-finite parameters".into(),
            ));
        }
        self.global = agg.model;
        self.round = round;

        let metrics = if round % self.config.metrics_every == 0 || round == self.config.rounds {
            Some(self.evaluate(round)?)
        } else {
            None
        };
        Ok(RoundLog {
            round,
            malicious_selected: selected.iter().filter(|&&c| self.malicious[c]).count(),
            selected,
            weights: agg.weights,
            scores: agg
                .scores
                .map(|t| t.clients.iter().map(|c| c.raw).collect()),
            s2: agg.s2,
            zero_update: agg.zero_update,
            clip_bound,
            metrics,
        })
    }

    /// Test metrics of the current global model, with the loss on the
    /// server validation set.
    pub fn evaluate(&self, round: usize) -> Result<MetricRecord> {
        let mut record = evaluate(
            &self.global,
            &self.config.model,
            &self.test,
            self.config.attack.backdoor(),
        )?;
        record.round = round;
        record.mean_validation_loss =
            eval_losses(&self.global, &self.config.model, &self.validation.data)?.mean_loss();
        Ok(record)
    }

    /// Runs the remaining rounds, handing each log to `on_round`.
    pub fn run(mut self, mut on_round: impl FnMut(&RoundLog)) -> Result<ExperimentResult> {
        let mut logs = Vec::with_capacity(self.config.rounds);
        while self.round < self.config.rounds {
            let log = self.run_round()?;
            on_round(&log);
            logs.push(log);
        }
        let records = logs.iter().filter_map(|l| l.metrics.clone()).collect();
        Ok(ExperimentResult {
            records,
            logs,
            final_model: self.global,
        })
    }
}

/// Runs a whole experiment on a pool of `workers` threads (0 picks the
/// number of logical cores).
pub fn run_experiment(config: &ExperimentConfig, workers: usize) -> Result<ExperimentResult> {
    run_experiment_with(config, workers, |_| {})
}

/// [`run_experiment`] with a per-round callback.
pub fn run_experiment_with(
    config: &ExperimentConfig,
    workers: usize,
    on_round: impl FnMut(&RoundLog) + Send,
) -> Result<ExperimentResult> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::config("workers", e.to_string()))?;
    pool.install(|| Simulation::new(config.clone())?.run(on_round))
}

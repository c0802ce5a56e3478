//! Declarative experiment description, parsed from TOML.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::adversary::AttackSpec;
use crate::aggregators::{PreTransform, Strategy, StrategyKind};
use crate::data::{CsvSchema, PartitionScheme, PartitionSpec, SyntheticSpec};
use crate::error::{Error, Result};
use crate::fedval::{ScoreDims, ScoreParams};
use crate::model::{MlpSpec, TrainSpec};
use crate::privacy::DpConfig;

/// Where the samples come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum TaskSpec {
    Synthetic(SyntheticSpec),
    Csv {
        /// Relative paths are resolved by the caller.
        path: PathBuf,
        schema: CsvSchema,
    },
}

impl TaskSpec {
    /// Feature dimension when it is known without reading data.
    fn feature_count(&self) -> usize {
        match self {
            TaskSpec::Synthetic(s) => s.features,
            TaskSpec::Csv { schema, .. } => schema.feature_columns.len(),
        }
    }

    fn class_count(&self) -> Option<usize> {
        match self {
            TaskSpec::Synthetic(s) => Some(s.classes),
            TaskSpec::Csv { schema, .. } => schema.class_count,
        }
    }

    fn has_groups(&self) -> bool {
        match self {
            TaskSpec::Synthetic(s) => s.groups > 0,
            TaskSpec::Csv { schema, .. } => schema.group_column.is_some(),
        }
    }
}

/// How the test and validation sets are carved out of the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HoldoutSpec {
    /// Stratified share of all samples held out for test metrics.
    pub test_fraction: f64,
    /// Server validation samples per label.
    pub validation_per_label: usize,
    /// Exactly `validation_per_label` of every label when true; otherwise a
    /// uniform draw of the same total size.
    pub balanced_validation: bool,
    pub seed: u64,
}

impl Default for HoldoutSpec {
    fn default() -> Self {
        HoldoutSpec {
            test_fraction: 0.2,
            validation_per_label: 10,
            balanced_validation: true,
            seed: 0,
        }
    }
}

fn default_metrics_every() -> usize {
    1
}

/// Full description of one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub rounds: usize,
    pub clients_per_round: usize,
    pub selection_seed: u64,
    #[serde(default = "default_metrics_every")]
    pub metrics_every: usize,
    pub task: TaskSpec,
    pub partition: PartitionSpec,
    pub model: MlpSpec,
    #[serde(default)]
    pub train: TrainSpec,
    pub strategy: Strategy,
    #[serde(default)]
    pub score: ScoreParams,
    #[serde(default)]
    pub fedval: ScoreDims,
    #[serde(default)]
    pub attack: AttackSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dp: Option<DpConfig>,
    #[serde(default)]
    pub holdout: HoldoutSpec,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let config: ExperimentConfig = toml::from_str(text).map_err(|e| {
            let field = e
                .span()
                .map(|s| format!("config (bytes {}..{})", s.start, s.end))
                .unwrap_or_else(|| "config".into());
            Error::config(field, e.message().to_string())
        })?;
        Ok(config)
    }

    /// Serializes with every default filled in. Parsing the output yields an
    /// equal config.
    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config("config", e.to_string()))
    }

    /// Checks every cross-field constraint that can be decided without
    /// loading data.
    pub fn validate(&self) -> Result<()> {
        if self.clients_per_round == 0 {
            return Err(Error::config("clients_per_round", "must be >= 1"));
        }
        if self.partition.client_count == 0 {
            return Err(Error::config("partition.client_count", "must be >= 1"));
        }
        if self.clients_per_round > self.partition.client_count {
            return Err(Error::config(
                "clients_per_round",
                format!(
                    "{} exceeds partition.client_count ({})",
                    self.clients_per_round, self.partition.client_count
                ),
            ));
        }
        if self.metrics_every == 0 {
            return Err(Error::config("metrics_every", "must be >= 1"));
        }
        self.model.validate()?;
        let input = self.model.input_dim();
        if input != self.task.feature_count() {
            return Err(Error::config(
                "model.layer_sizes",
                format!(
                    "input size {input} does not match the task's {} features",
                    self.task.feature_count()
                ),
            ));
        }
        let classes = self.model.class_count();
        if let Some(k) = self.task.class_count() {
            if k != classes {
                return Err(Error::config(
                    "model.layer_sizes",
                    format!("output size {classes} does not match the task's {k} classes"),
                ));
            }
        }
        self.train.validate()?;
        self.strategy.kind.validate()?;
        self.score.validate()?;
        self.attack.validate(classes)?;
        self.validate_partition(classes)?;
        self.validate_holdout()?;
        if self.fedval.recall && !self.task.has_groups() {
            return Err(Error::config(
                "fedval.recall",
                "recall scoring needs group ids (task.groups or task.schema.group_column)",
            ));
        }
        if !self.fedval.labels && !self.fedval.overall && !self.fedval.recall {
            return Err(Error::config(
                "fedval",
                "at least one scoring dimension must be enabled",
            ));
        }
        match &self.dp {
            Some(dp) => {
                dp.validate()?;
                if self.strategy.pre_transforms.is_empty() {
                    return Err(Error::config(
                        "strategy.pre_transforms",
                        "a [dp] section is set but no transform uses it",
                    ));
                }
            }
            None => {
                if !self.strategy.pre_transforms.is_empty() {
                    return Err(Error::config(
                        "dp",
                        "strategy.pre_transforms requires a [dp] section",
                    ));
                }
            }
        }
        let mut seen = Vec::new();
        for t in &self.strategy.pre_transforms {
            if seen.contains(t) {
                return Err(Error::config(
                    "strategy.pre_transforms",
                    format!("{t:?} listed twice"),
                ));
            }
            seen.push(*t);
        }
        Ok(())
    }

    fn validate_partition(&self, classes: usize) -> Result<()> {
        let bad =
            |field: &str, msg: &str| Err(Error::config(format!("partition.scheme.{field}"), msg));
        match &self.partition.scheme {
            PartitionScheme::Iid => Ok(()),
            PartitionScheme::Lda { alpha } | PartitionScheme::QuantitySkew { alpha } => {
                if alpha.is_finite() && *alpha > 0.0 {
                    Ok(())
                } else {
                    bad("alpha", "must be finite and > 0")
                }
            }
            PartitionScheme::MissingLabels {
                missing,
                affected_fraction,
            } => {
                if !(0.0..=1.0).contains(affected_fraction) {
                    return bad("affected_fraction", "must lie in [0, 1]");
                }
                if missing.iter().any(|&l| l >= classes) {
                    return bad("missing", "label outside the class range");
                }
                Ok(())
            }
        }
    }

    fn validate_holdout(&self) -> Result<()> {
        let h = &self.holdout;
        if !(h.test_fraction > 0.0 && h.test_fraction < 1.0) {
            return Err(Error::config("holdout.test_fraction", "must lie in (0, 1)"));
        }
        if h.validation_per_label == 0 {
            return Err(Error::config(
                "holdout.validation_per_label",
                "must be >= 1",
            ));
        }
        Ok(())
    }

    /// Applies a strategy override of the form `name[:param]`.
    ///
    /// Recognized names: `fedavg`, `fedval`, `fedprox[:mu]` (FedAvg with a
    /// proximal term, default mu 1), `multi_krum[:remove_fraction]`,
    /// `lfr[:remove_fraction]` and `trimmed_mean[:trim_fraction]`. The proximal
    /// coefficient is reset unless the override is `fedprox`; pre-transforms of
    /// the base config are kept.
    pub fn with_strategy(&self, spec: &str) -> Result<ExperimentConfig> {
        let (name, param) = match spec.split_once(':') {
            Some((n, p)) => {
                let value: f64 = p.trim().parse().map_err(|_| {
                    Error::config(
                        "strategies",
                        format!("{spec}: parameter {p:?} is not a number"),
                    )
                })?;
                (n.trim(), Some(value))
            }
            None => (spec.trim(), None),
        };
        let mut out = self.clone();
        out.train.prox_mu = 0.0;
        out.strategy.kind = match name {
            "fedavg" | "fedval" if param.is_some() => {
                return Err(Error::config(
                    "strategies",
                    format!("{name} takes no parameter"),
                ))
            }
            "fedavg" => StrategyKind::Fedavg,
            "fedval" => StrategyKind::Fedval,
            "fedprox" => {
                out.train.prox_mu = param.unwrap_or(1.0);
                StrategyKind::Fedavg
            }
            "multi_krum" => StrategyKind::MultiKrum {
                remove_fraction: param.unwrap_or(0.5),
            },
            "lfr" => StrategyKind::Lfr {
                remove_fraction: param.unwrap_or(0.4),
            },
            "trimmed_mean" => StrategyKind::TrimmedMean {
                trim_fraction: param.unwrap_or(0.1),
            },
            other => {
                return Err(Error::config(
                    "strategies",
                    format!("unknown strategy {other:?}"),
                ))
            }
        };
        out.validate()?;
        Ok(out)
    }

    pub fn uses(&self, transform: PreTransform) -> bool {
        self.strategy.pre_transforms.contains(&transform)
    }
}

//! Malicious clients: label-flip data poisoning and norm-matched gradient
//! ascent.

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{local_train, run_sgd, Direction, MlpSpec, ParamVector, TrainSpec};
use crate::seed;

const ASCENT_STREAM: u64 = 0xa5c3;
const PLACEMENT_STREAM: u64 = 0x91ac;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum AttackKind {
    #[default]
    None,
    LabelFlip {
        source_label: usize,
        target_label: usize,
    },
    Pga {
        scale_factor: f64,
        ascent_epochs: usize,
    },
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSpec {
    #[serde(default)]
    pub kind: AttackKind,
    #[serde(default)]
    pub malicious_fraction: f64,
    #[serde(default)]
    pub placement_seed: u64,
}

impl AttackSpec {
    pub fn validate(&self, class_count: usize) -> Result<()> {
        if !(0.0..=1.0).contains(&self.malicious_fraction) {
            return Err(Error::config(
                "attack.malicious_fraction",
                "must lie in [0, 1]",
            ));
        }
        match self.kind {
            AttackKind::None => Ok(()),
            AttackKind::LabelFlip {
                source_label,
                target_label,
            } => {
                if source_label == target_label {
                    return Err(Error::config(
                        "attack.kind.target_label",
                        "must differ from source_label",
                    ));
                }
                for (field, l) in [
                    ("attack.kind.source_label", source_label),
                    ("attack.kind.target_label", target_label),
                ] {
                    if l >= class_count {
                        return Err(Error::config(
                            field,
                            format!("label {l} is outside the {class_count} classes"),
                        ));
                    }
                }
                Ok(())
            }
            AttackKind::Pga {
                scale_factor,
                ascent_epochs,
            } => {
                if !(scale_factor.is_finite() && scale_factor >= 0.0) {
                    return Err(Error::config(
                        "attack.kind.scale_factor",
                        "must be finite and >= 0",
                    ));
                }
                if ascent_epochs == 0 {
                    return Err(Error::config("attack.kind.ascent_epochs", "must be >= 1"));
                }
                Ok(())
            }
        }
    }

    /// The (source, target) pair when this is a label-flip attack.
    pub fn backdoor(&self) -> Option<(usize, usize)> {
        match self.kind {
            AttackKind::LabelFlip {
                source_label,
                target_label,
            } => Some((source_label, target_label)),
            _ => None,
        }
    }

    pub fn is_active(&self) -> bool {
        self.kind != AttackKind::None && self.malicious_fraction > 0.0
    }
}

/// Relabels every `source_label` sample as `target_label`.
pub fn poison_dataset(data: &Dataset, source_label: usize, target_label: usize) -> Result<Dataset> {
    let labels = data
        .labels()
        .iter()
        .map(|&l| if l == source_label { target_label } else { l })
        .collect();
    data.with_labels(labels)
}

/// Gradient-ascent update rescaled so its norm is `scale_factor` times the
/// norm of an honest update computed from the same data.
pub fn pga_update(
    global: &ParamVector,
    spec: &MlpSpec,
    data: &Dataset,
    train: &TrainSpec,
    scale_factor: f64,
    ascent_epochs: usize,
) -> Result<ParamVector> {
    if scale_factor == 0.0 {
        return Ok(global.clone());
    }
    let benign = local_train(global, spec, data, train)?.sub(global)?;
    let ascent_train = TrainSpec {
        epochs: ascent_epochs,
        seed: seed::derive(train.seed, &[ASCENT_STREAM]),
        ..train.clone()
    };
    let ascent = run_sgd(global, spec, data, &ascent_train, Direction::Ascent, 0.0)?.sub(global)?;
    let (ascent_norm, benign_norm) = (ascent.norm(), benign.norm());
    if ascent_norm == 0.0 || benign_norm == 0.0 || !ascent_norm.is_finite() {
        log::warn!(
            "degenerate ascent (ascent norm {ascent_norm}, benign norm {benign_norm}); returning the global model"
        );
        return Ok(global.clone());
    }
    let mut out = global.clone();
    out.add_scaled(scale_factor * benign_norm / ascent_norm, &ascent)?;
    Ok(out)
}

/// `floor(fraction * client_count)` distinct ids drawn uniformly, ascending.
pub fn place_malicious(client_count: usize, fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::config(
            "attack.malicious_fraction",
            "must lie in [0, 1]",
        ));
    }
    let count = seed::fraction_count(fraction, client_count).min(client_count);
    let mut rng = seed::derived_rng(seed, &[PLACEMENT_STREAM]);
    let mut ids = index::sample(&mut rng, client_count, count).into_vec();
    ids.sort_unstable();
    Ok(ids)
}

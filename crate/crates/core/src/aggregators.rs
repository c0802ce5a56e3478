//! Baseline aggregation rules behind a common [`Aggregator`] interface.
//!
//! Ties are always broken toward the lower client position so every rule is
//! deterministic.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::ValidationSet;
use crate::error::{Error, Result};
use crate::fedval::ScoreTable;
use crate::model::{eval_losses, MlpSpec, ParamVector};
use crate::seed;

/// One client's contribution to a round.
#[derive(Clone, Debug, PartialEq)]
pub struct ClientUpdate {
    pub client_id: usize,
    /// `theta_client - theta_global`.
    pub delta: ParamVector,
    pub sample_count: usize,
}

/// Server-side resources available to validation-based rules.
#[derive(Clone, Copy, Debug)]
pub struct RoundContext<'a> {
    pub spec: &'a MlpSpec,
    pub validation: &'a ValidationSet,
}

/// Result of one aggregation step.
#[derive(Clone, Debug, PartialEq)]
pub struct Aggregate {
    pub model: ParamVector,
    /// Effective weight of each update, aligned with the input order. `None`
    /// for rules that do not weight whole updates (trimmed mean).
    pub weights: Option<Vec<f64>>,
    pub scores: Option<ScoreTable>,
    pub s2: Option<f64>,
    /// The rule produced no update and the global model was kept.
    pub zero_update: bool,
}

impl Aggregate {
    fn weighted(model: ParamVector, weights: Vec<f64>) -> Self {
        Aggregate {
            model,
            weights: Some(weights),
            scores: None,
            s2: None,
            zero_update: false,
        }
    }
}

pub trait Aggregator: Send + Sync {
    fn name(&self) -> &'static str;

    fn aggregate(
        &mut self,
        global: &ParamVector,
        updates: &[ClientUpdate],
        ctx: &RoundContext<'_>,
    ) -> Result<Aggregate>;
}

/// Transformations applied to deltas before aggregation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PreTransform {
    NormBound,
    DpNoise,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum StrategyKind {
    Fedavg,
    Fedval,
    MultiKrum {
        #[serde(default = "default_krum_fraction")]
        remove_fraction: f64,
    },
    Lfr {
        #[serde(default = "default_lfr_fraction")]
        remove_fraction: f64,
    },
    TrimmedMean {
        #[serde(default = "default_trim_fraction")]
        trim_fraction: f64,
    },
}

fn default_krum_fraction() -> f64 {
    0.5
}
fn default_lfr_fraction() -> f64 {
    0.4
}
fn default_trim_fraction() -> f64 {
    0.1
}

impl StrategyKind {
    pub fn name(&self) -> &'static str {
        match self {
            StrategyKind::Fedavg => "fedavg",
            StrategyKind::Fedval => "fedval",
            StrategyKind::MultiKrum { .. } => "multi_krum",
            StrategyKind::Lfr { .. } => "lfr",
            StrategyKind::TrimmedMean { .. } => "trimmed_mean",
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (field, f) = match self {
            StrategyKind::MultiKrum { remove_fraction } | StrategyKind::Lfr { remove_fraction } => {
                ("strategy.kind.remove_fraction", *remove_fraction)
            }
            StrategyKind::TrimmedMean { trim_fraction } => {
                ("strategy.kind.trim_fraction", *trim_fraction)
            }
            _ => return Ok(()),
        };
        if (0.0..1.0).contains(&f) {
            Ok(())
        } else {
            Err(Error::config(field, format!("{f} is outside [0, 1)")))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Strategy {
    pub kind: StrategyKind,
    #[serde(default)]
    pub pre_transforms: Vec<PreTransform>,
}

fn check_updates(global: &ParamVector, updates: &[ClientUpdate]) -> Result<()> {
    if updates.is_empty() {
        return Err(Error::Empty("update list"));
    }
    for u in updates {
        if u.delta.len() != global.len() {
            return Err(Error::DimensionMismatch {
                expected: global.len(),
                actual: u.delta.len(),
            });
        }
    }
    Ok(())
}

/// `global + sum_d weights[d] * delta_d`.
pub fn apply_weighted(
    global: &ParamVector,
    updates: &[ClientUpdate],
    weights: &[f64],
) -> Result<ParamVector> {
    check_updates(global, updates)?;
    if weights.len() != updates.len() {
        return Err(Error::DimensionMismatch {
            expected: updates.len(),
            actual: weights.len(),
        });
    }
    let mut out = global.clone();
    for (u, &w) in updates.iter().zip(weights) {
        if w != 0.0 {
            out.add_scaled(w, &u.delta)?;
        }
    }
    Ok(out)
}

/// Sample-count weights, normalized.
pub fn sample_weights(updates: &[ClientUpdate]) -> Result<Vec<f64>> {
    let total: usize = updates.iter().map(|u| u.sample_count).sum();
    if total == 0 {
        return Err(Error::InsufficientData(
            "updates report zero samples".into(),
        ));
    }
    Ok(updates
        .iter()
        .map(|u| u.sample_count as f64 / total as f64)
        .collect())
}

/// Sample-weighted mean of the full client models `global + delta_d`.
pub fn fedavg(global: &ParamVector, updates: &[ClientUpdate]) -> Result<ParamVector> {
    check_updates(global, updates)?;
    let weights = sample_weights(updates)?;
    let mut out = ParamVector::zeros(global.len());
    for (u, w) in updates.iter().zip(&weights) {
        let values = out.as_mut_slice();
        for ((o, g), d) in values
            .iter_mut()
            .zip(global.as_slice())
            .zip(u.delta.as_slice())
        {
            *o += w * (g + d);
        }
    }
    Ok(out)
}

/// Positions (into `updates`) kept by multi-Krum, in ascending order.
///
/// With `f = floor(remove_fraction * n)`, a client's score is the sum of
/// squared distances to its `n - f - 2` nearest other updates (at least one
/// neighbour); the `n - f` lowest scores are kept.
pub fn multi_krum_select(updates: &[ClientUpdate], remove_fraction: f64) -> Result<Vec<usize>> {
    if updates.is_empty() {
        return Err(Error::Empty("update list"));
    }
    if !(0.0..1.0).contains(&remove_fraction) {
        return Err(Error::config(
            "strategy.kind.remove_fraction",
            format!("{remove_fraction} is outside [0, 1)"),
        ));
    }
    let scores = krum_scores(updates, remove_fraction)?;
    let n = updates.len();
    let keep = n - seed::fraction_count(remove_fraction, n);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    let mut kept = order[..keep].to_vec();
    kept.sort_unstable();
    Ok(kept)
}

/// Krum score of every update.
pub fn krum_scores(updates: &[ClientUpdate], remove_fraction: f64) -> Result<Vec<f64>> {
    let n = updates.len();
    let f = seed::fraction_count(remove_fraction, n);
    if f >= n {
        return Err(Error::config(
            "strategy.kind.remove_fraction",
            "multi-Krum must keep at least one client",
        ));
    }
    let neighbours = match (n - f).checked_sub(2) {
        Some(m) if m >= 1 => m,
        _ => {
            if n > 1 {
                log::debug!(
                    "multi-Krum with n={n}, f={f}: scoring by the single nearest neighbour"
                );
            }
            1
        }
    };
    let mut dist = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let d = updates[i].delta.distance_squared(&updates[j].delta)?;
            dist[i][j] = d;
            dist[j][i] = d;
        }
    }
    Ok((0..n)
        .map(|i| {
            let mut others: Vec<f64> = (0..n).filter(|&j| j != i).map(|j| dist[i][j]).collect();
            others.sort_by(f64::total_cmp);
            others.iter().take(neighbours).sum()
        })
        .collect())
}

/// Mean validation loss of each client model `global + delta`.
pub fn client_validation_losses(
    global: &ParamVector,
    updates: &[ClientUpdate],
    ctx: &RoundContext<'_>,
) -> Result<Vec<f64>> {
    updates
        .par_iter()
        .map(|u| {
            let mut model = global.clone();
            model.add_scaled(1.0, &u.delta)?;
            Ok(eval_losses(&model, ctx.spec, &ctx.validation.data)?.mean_loss())
        })
        .collect()
}

/// Loss-function-based rejection: drops the `ceil(remove_fraction * n)`
/// clients with the highest validation loss and sample-averages the rest.
/// Returns the new model and the kept positions.
pub fn lfr(
    global: &ParamVector,
    updates: &[ClientUpdate],
    ctx: &RoundContext<'_>,
    remove_fraction: f64,
) -> Result<(ParamVector, Vec<usize>)> {
    check_updates(global, updates)?;
    let n = updates.len();
    let drop = seed::fraction_count_ceil(remove_fraction, n);
    if drop >= n {
        return Err(Error::config(
            "strategy.kind.remove_fraction",
            format!("removing {drop} of {n} clients leaves nobody to aggregate"),
        ));
    }
    let losses = client_validation_losses(global, updates, ctx)?;
    let mut order: Vec<usize> = (0..n).collect();
    // Highest loss first; among equal losses the higher position goes first
    // so that lower positions are kept.
    order.sort_by(|&a, &b| losses[b].total_cmp(&losses[a]).then(b.cmp(&a)));
    let mut kept = order[drop..].to_vec();
    kept.sort_unstable();
    let selected: Vec<ClientUpdate> = kept.iter().map(|&i| updates[i].clone()).collect();
    Ok((fedavg(global, &selected)?, kept))
}

/// Coordinate-wise trimmed mean of the deltas, added to `global`.
pub fn trimmed_mean(
    global: &ParamVector,
    updates: &[ClientUpdate],
    trim_fraction: f64,
) -> Result<ParamVector> {
    check_updates(global, updates)?;
    let n = updates.len();
    let trim = seed::fraction_count(trim_fraction, n);
    if !(0.0..1.0).contains(&trim_fraction) || 2 * trim >= n {
        return Err(Error::config(
            "strategy.kind.trim_fraction",
            format!("trimming {trim} from each side of {n} updates leaves nothing"),
        ));
    }
    let kept = (n - 2 * trim) as f64;
    let mut column = vec![0.0; n];
    let values = (0..global.len())
        .map(|j| {
            for (c, u) in column.iter_mut().zip(updates) {
                *c = u.delta.as_slice()[j];
            }
            column.sort_by(f64::total_cmp);
            global.as_slice()[j] + column[trim..n - trim].iter().sum::<f64>() / kept
        })
        .collect();
    Ok(ParamVector::new(values))
}

pub struct FedAvg;

impl Aggregator for FedAvg {
    fn name(&self) -> &'static str {
        "fedavg"
    }

    fn aggregate(
        &mut self,
        global: &ParamVector,
        updates: &[ClientUpdate],
        _ctx: &RoundContext<'_>,
    ) -> Result<Aggregate> {
        Ok(Aggregate::weighted(
            fedavg(global, updates)?,
            sample_weights(updates)?,
        ))
    }
}

pub struct MultiKrum {
    pub remove_fraction: f64,
}

impl Aggregator for MultiKrum {
    fn name(&self) -> &'static str {
        "multi_krum"
    }

    fn aggregate(
        &mut self,
        global: &ParamVector,
        updates: &[ClientUpdate],
        _ctx: &RoundContext<'_>,
    ) -> Result<Aggregate> {
        check_updates(global, updates)?;
        let kept = multi_krum_select(updates, self.remove_fraction)?;
        let mut weights = vec![0.0; updates.len()];
        for &i in &kept {
            weights[i] = 1.0 / kept.len() as f64;
        }
        Ok(Aggregate::weighted(
            apply_weighted(global, updates, &weights)?,
            weights,
        ))
    }
}

pub struct Lfr {
    pub remove_fraction: f64,
}

impl Aggregator for Lfr {
    fn name(&self) -> &'static str {
        "lfr"
    }

    fn aggregate(
        &mut self,
        global: &ParamVector,
        updates: &[ClientUpdate],
        ctx: &RoundContext<'_>,
    ) -> Result<Aggregate> {
        let (model, kept) = lfr(global, updates, ctx, self.remove_fraction)?;
        let total: usize = kept.iter().map(|&i| updates[i].sample_count).sum();
        let mut weights = vec![0.0; updates.len()];
        for &i in &kept {
            weights[i] = updates[i].sample_count as f64 / total as f64;
        }
        Ok(Aggregate::weighted(model, weights))
    }
}

pub struct TrimmedMean {
    pub trim_fraction: f64,
}

impl Aggregator for TrimmedMean {
    fn name(&self) -> &'static str {
        "trimmed_mean"
    }

    fn aggregate(
        &mut self,
        global: &ParamVector,
        updates: &[ClientUpdate],
        _ctx: &RoundContext<'_>,
    ) -> Result<Aggregate> {
        Ok(Aggregate {
            model: trimmed_mean(global, updates, self.trim_fraction)?,
            weights: None,
            scores: None,
            s2: None,
            zero_update: false,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn update(id: usize, delta: Vec<f64>, samples: usize) -> ClientUpdate {
        ClientUpdate {
            client_id: id,
            delta: ParamVector::new(delta),
            sample_count: samples,
        }
    }

    #[test]
    fn fedavg_examples() {
        let g = ParamVector::new(vec![1.0, 1.0]);
        // Models a = (2, 0), b = (4, 2).
        let a = update(0, vec![1.0, -1.0], 10);
        let b = update(1, vec![3.0, 1.0], 10);
        let avg = fedavg(&g, &[a.clone(), b.clone()]).unwrap();
        assert_eq!(avg.as_slice(), &[3.0, 1.0]);
        assert_eq!(
            fedavg(&g, std::slice::from_ref(&a)).unwrap().as_slice(),
            &[2.0, 0.0]
        );
        let weighted = fedavg(
            &g,
            &[update(0, vec![1.0, -1.0], 3), update(1, vec![3.0, 1.0], 1)],
        )
        .unwrap();
        assert!((weighted.as_slice()[0] - (0.75 * 2.0 + 0.25 * 4.0)).abs() < 1e-12);
        assert!((weighted.as_slice()[1] - (0.75 * 0.0 + 0.25 * 2.0)).abs() < 1e-12);
        assert!(fedavg(&g, &[update(0, vec![1.0, 1.0], 0)]).is_err());
    }

    #[test]
    fn krum_excludes_far_update() {
        let ups = vec![
            update(0, vec![0.0, 0.0], 1),
            update(1, vec![0.0, 0.0], 1),
            update(2, vec![100.0, 0.0], 1),
            update(3, vec![0.0, 0.0], 1),
        ];
        assert_eq!(multi_krum_select(&ups, 0.25).unwrap(), vec![0, 1, 3]);
    }

    #[test]
    fn krum_ties_keep_lowest_positions() {
        let ups: Vec<_> = (0..6).map(|i| update(i, vec![1.0, 2.0], 1)).collect();
        assert_eq!(multi_krum_select(&ups, 0.5).unwrap(), vec![0, 1, 2]);
    }

    #[test]
    fn krum_single_client() {
        let ups = vec![update(0, vec![1.0], 1)];
        assert_eq!(multi_krum_select(&ups, 0.5).unwrap(), vec![0]);
    }

    #[test]
    fn trimmed_mean_examples() {
        let g = ParamVector::new(vec![0.0]);
        let ups: Vec<_> = [0.0, 1.0, 2.0, 3.0, 100.0]
            .iter()
            .enumerate()
            .map(|(i, &v)| update(i, vec![v], 1))
            .collect();
        assert!((trimmed_mean(&g, &ups, 0.2).unwrap().as_slice()[0] - 2.0).abs() < 1e-12);
        assert!((trimmed_mean(&g, &ups, 0.0).unwrap().as_slice()[0] - 21.2).abs() < 1e-12);
        let same: Vec<_> = (0..4).map(|i| update(i, vec![7.5], 1)).collect();
        assert_eq!(trimmed_mean(&g, &same, 0.25).unwrap().as_slice(), &[7.5]);
        assert!(trimmed_mean(&g, &ups, 0.6).is_err());
    }
}

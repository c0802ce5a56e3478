//! Validation-score aggregation.
//!
//! Every client model is evaluated on a small server-side validation set.
//! For each scoring dimension (one per label, the overall loss, and
//! optionally per-group recall) a client earns
//!
//! ```text
//! reducer * s1 * div / MAD + C * s1
//! ```
//!
//! where `div` is how much better than the cross-client mean the client did,
//! `MAD` is the mean absolute deviation of the clients on that dimension, and
//! `reducer = max(1, (dimension mean / overall mean) ^ s2)` amplifies
//! dimensions that lag behind the rest of the model. Scores are clamped at a
//! floor and normalized into aggregation weights. `s2` is re-chosen every
//! round from a small candidate set by validation loss of the resulting
//! global model.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregators::{apply_weighted, Aggregate, Aggregator, ClientUpdate, RoundContext};
use crate::data::ValidationSet;
use crate::error::{Error, Result};
use crate::metrics::group_recall;
use crate::model::{eval_losses, MlpSpec, ParamVector};

/// Dimensions whose MAD falls below this contribute only their baseline.
pub const MAD_EPSILON: f64 = 1e-9;
/// Lower bound on the bias-reducer exponent.
pub const MIN_S2: f64 = 0.5;
/// Mean group recall is floored here before dividing by it.
pub const RECALL_FLOOR: f64 = 1e-3;
/// Upper bound on any bias-reducer term; large exponents would otherwise
/// overflow to infinity and poison the weights with NaN.
pub const REDUCER_CAP: f64 = 1e100;
/// Relative tolerance under which two candidate losses count as tied.
const TIE_TOLERANCE: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScoreParams {
    pub s1_label: f64,
    pub s1_avg: f64,
    /// Bias-reducer exponent for label dimensions; the starting value when
    /// adaptive selection is on.
    pub s2: f64,
    pub s2_recall: f64,
    pub c: f64,
    pub clamp_floor: f64,
}

impl Default for ScoreParams {
    fn default() -> Self {
        ScoreParams {
            s1_label: 3.0,
            s1_avg: 5.0,
            s2: 3.0,
            s2_recall: 30.0,
            c: 3.0,
            clamp_floor: 0.0,
        }
    }
}

impl ScoreParams {
    pub fn validate(&self) -> Result<()> {
        let finite = [
            ("score.s1_label", self.s1_label),
            ("score.s1_avg", self.s1_avg),
            ("score.s2", self.s2),
            ("score.s2_recall", self.s2_recall),
            ("score.c", self.c),
            ("score.clamp_floor", self.clamp_floor),
        ];
        if let Some((field, _)) = finite.iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::config(*field, "must be finite"));
        }
        if self.s1_label <= 0.0 {
            return Err(Error::config("score.s1_label", "must be > 0"));
        }
        if self.c < 0.0 {
            return Err(Error::config("score.c", "must be >= 0"));
        }
        Ok(())
    }
}

/// Which scoring dimensions are active, and whether `s2` adapts per round.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScoreDims {
    pub labels: bool,
    pub overall: bool,
    pub recall: bool,
    pub adaptive_s2: bool,
}

impl Default for ScoreDims {
    fn default() -> Self {
        ScoreDims {
            labels: true,
            overall: true,
            recall: false,
            adaptive_s2: true,
        }
    }
}

/// Per-client validation losses and recalls with their cross-client
/// statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    /// `label_losses[d][k]`: mean loss of client `d` on validation label `k`.
    pub label_losses: Vec<Vec<f64>>,
    /// Mean loss of each client over the whole validation set.
    pub overall_losses: Vec<f64>,
    /// Group ids with a defined recall, in ascending order.
    pub recall_groups: Vec<usize>,
    /// `group_recalls[d][j]`: recall of client `d` on `recall_groups[j]`.
    pub group_recalls: Vec<Vec<f64>>,
    pub mean_label_losses: Vec<f64>,
    pub mean_overall_loss: f64,
    pub mean_group_recalls: Vec<f64>,
    pub label_mad: Vec<f64>,
    pub overall_mad: f64,
    pub recall_mad: Vec<f64>,
}

/// Mean absolute deviation from the mean.
pub fn mad(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    values.iter().map(|v| (v - mean).abs()).sum::<f64>() / n
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

fn column(rows: &[Vec<f64>], j: usize) -> Vec<f64> {
    rows.iter().map(|r| r[j]).collect()
}

impl ValidationReport {
    /// Builds a report from per-client measurements and fills the
    /// cross-client means and MADs.
    pub fn from_parts(
        label_losses: Vec<Vec<f64>>,
        overall_losses: Vec<f64>,
        recall_groups: Vec<usize>,
        group_recalls: Vec<Vec<f64>>,
    ) -> Result<Self> {
        let n = overall_losses.len();
        if n == 0 {
            return Err(Error::Empty("client list"));
        }
        let k = label_losses.first().map_or(0, Vec::len);
        let g = recall_groups.len();
        if label_losses.len() != n || label_losses.iter().any(|r| r.len() != k) {
            return Err(Error::DimensionMismatch {
                expected: n,
                actual: label_losses.len(),
            });
        }
        if g > 0 && (group_recalls.len() != n || group_recalls.iter().any(|r| r.len() != g)) {
            return Err(Error::DimensionMismatch {
                expected: n,
                actual: group_recalls.len(),
            });
        }
        let losses_ok = label_losses
            .iter()
            .flatten()
            .chain(&overall_losses)
            .all(|l| l.is_finite() && *l >= 0.0);
        if !losses_ok {
            return Err(Error::InsufficientData(
                "validation losses must be finite and non-negative".into(),
            ));
        }
        if group_recalls
            .iter()
            .flatten()
            .any(|r| !(0.0..=1.0).contains(r))
        {
            return Err(Error::InsufficientData("recalls must lie in [0, 1]".into()));
        }
        let by_label: Vec<Vec<f64>> = (0..k).map(|j| column(&label_losses, j)).collect();
        let by_group: Vec<Vec<f64>> = if g > 0 {
            (0..g).map(|j| column(&group_recalls, j)).collect()
        } else {
            Vec::new()
        };
        Ok(ValidationReport {
            mean_label_losses: by_label.iter().map(|c| mean(c)).collect(),
            label_mad: by_label.iter().map(|c| mad(c)).collect(),
            mean_overall_loss: mean(&overall_losses),
            overall_mad: mad(&overall_losses),
            mean_group_recalls: by_group.iter().map(|c| mean(c)).collect(),
            recall_mad: by_group.iter().map(|c| mad(c)).collect(),
            label_losses,
            overall_losses,
            recall_groups,
            group_recalls: if g > 0 { group_recalls } else { Vec::new() },
        })
    }

    pub fn client_count(&self) -> usize {
        self.overall_losses.len()
    }

    pub fn label_count(&self) -> usize {
        self.mean_label_losses.len()
    }

    /// Positive when the client beats the cross-client mean on label `k`.
    pub fn label_div(&self, client: usize, k: usize) -> f64 {
        self.mean_label_losses[k] - self.label_losses[client][k]
    }

    pub fn overall_div(&self, client: usize) -> f64 {
        self.mean_overall_loss - self.overall_losses[client]
    }

    /// Positive when the client's recall on the `j`-th group exceeds the mean.
    pub fn recall_div(&self, client: usize, j: usize) -> f64 {
        self.group_recalls[client][j] - self.mean_group_recalls[j]
    }
}

/// Evaluates every client model on the validation set.
pub fn compute_report(
    client_models: &[ParamVector],
    spec: &MlpSpec,
    val: &ValidationSet,
    recall_dim: bool,
) -> Result<ValidationReport> {
    if client_models.is_empty() {
        return Err(Error::Empty("client model list"));
    }
    if let Some(k) = val.label_indices.iter().position(Vec::is_empty) {
        return Err(Error::config(
            "holdout",
            format!(
                "validation set has no samples of label {k}; its scoring dimension is undefined"
            ),
        ));
    }
    let groups =
        if recall_dim {
            Some(val.data.groups().ok_or_else(|| {
                Error::config("fedval.recall", "validation set carries no group ids")
            })?)
        } else {
            None
        };

    struct ClientEval {
        label: Vec<f64>,
        overall: f64,
        recall: Vec<Option<f64>>,
    }
    let evals: Vec<ClientEval> = client_models
        .par_iter()
        .map(|model| {
            let ev = eval_losses(model, spec, &val.data)?;
            let label = val
                .label_indices
                .iter()
                .map(|idx| idx.iter().map(|&i| ev.losses[i]).sum::<f64>() / idx.len() as f64)
                .collect();
            let recall = match groups {
                Some(g) => group_recall(
                    val.data.labels(),
                    &ev.predictions,
                    g,
                    val.data.group_count(),
                    val.data.class_count(),
                ),
                None => Vec::new(),
            };
            Ok(ClientEval {
                label,
                overall: ev.mean_loss(),
                recall,
            })
        })
        .collect::<Result<_>>()?;

    // Recall is undefined for a group exactly when it has no positives,
    // which depends on the labels alone and so is the same for every client.
    let recall_groups: Vec<usize> = match evals.first() {
        Some(e) => (0..e.recall.len())
            .filter(|&g| e.recall[g].is_some())
            .collect(),
        None => Vec::new(),
    };
    if let Some(first) = evals.first() {
        for (g, r) in first.recall.iter().enumerate() {
            if r.is_none() {
                log::warn!(
                    "group {g} has no positive validation samples; recall dimension dropped"
                );
            }
        }
    }
    let group_recalls = evals
        .iter()
        .map(|e| {
            recall_groups
                .iter()
                .map(|&g| e.recall[g].expect("defined for every client"))
                .collect()
        })
        .collect();
    ValidationReport::from_parts(
        evals.iter().map(|e| e.label.clone()).collect(),
        evals.iter().map(|e| e.overall).collect(),
        recall_groups,
        group_recalls,
    )
}

/// One client's entry in a [`ScoreTable`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClientScore {
    pub raw: f64,
    pub clamped: f64,
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreTable {
    pub clients: Vec<ClientScore>,
    pub s2: f64,
    /// Every clamped score was zero; the round contributes no update.
    pub zero_update: bool,
}

impl ScoreTable {
    pub fn weights(&self) -> Vec<f64> {
        self.clients.iter().map(|c| c.weight).collect()
    }
}

/// `max(1, ratio^exponent)`, capped at [`REDUCER_CAP`].
pub fn bias_reducer(ratio: f64, exponent: f64) -> f64 {
    if !(ratio.is_finite() && ratio > 0.0) {
        return 1.0;
    }
    let r = ratio.powf(exponent);
    if r.is_nan() {
        1.0
    } else {
        r.clamp(1.0, REDUCER_CAP)
    }
}

/// Slope contribution of one dimension, zero when its MAD is degenerate.
fn slope(reducer: f64, s1: f64, div: f64, mad: f64) -> f64 {
    if mad < MAD_EPSILON {
        0.0
    } else {
        reducer * s1 * div / mad
    }
}

/// Scores every client in `report` and normalizes the clamped scores into
/// aggregation weights.
pub fn score(report: &ValidationReport, params: &ScoreParams, dims: &ScoreDims) -> ScoreTable {
    let label_reducers: Vec<f64> = report
        .mean_label_losses
        .iter()
        .map(|&l| {
            if report.mean_overall_loss < MAD_EPSILON {
                1.0
            } else {
                bias_reducer(l / report.mean_overall_loss, params.s2)
            }
        })
        .collect();
    let recall_avg = if report.mean_group_recalls.is_empty() {
        0.0
    } else {
        mean(&report.mean_group_recalls)
    };
    let recall_reducers: Vec<f64> = report
        .mean_group_recalls
        .iter()
        .map(|&r| bias_reducer(recall_avg / r.max(RECALL_FLOOR), params.s2_recall))
        .collect();

    let raw: Vec<f64> = (0..report.client_count())
        .map(|d| {
            let mut s = 0.0;
            if dims.labels {
                for (k, &reducer) in label_reducers.iter().enumerate() {
                    s += slope(
                        reducer,
                        params.s1_label,
                        report.label_div(d, k),
                        report.label_mad[k],
                    ) + params.c * params.s1_label;
                }
            }
            if dims.overall {
                s += slope(
                    1.0,
                    params.s1_avg,
                    report.overall_div(d),
                    report.overall_mad,
                ) + params.c * params.s1_avg;
            }
            if dims.recall {
                for (j, &reducer) in recall_reducers.iter().enumerate() {
                    s += slope(
                        reducer,
                        params.s1_label,
                        report.recall_div(d, j),
                        report.recall_mad[j],
                    ) + params.c * params.s1_label;
                }
            }
            s
        })
        .collect();

    let clamped: Vec<f64> = raw.iter().map(|&s| s.max(params.clamp_floor)).collect();
    let total: f64 = clamped.iter().sum();
    let zero_update = !(total > 0.0 && total.is_finite());
    let clients = raw
        .iter()
        .zip(&clamped)
        .map(|(&raw, &clamped)| ClientScore {
            raw,
            clamped,
            weight: if zero_update { 0.0 } else { clamped / total },
        })
        .collect();
    ScoreTable {
        clients,
        s2: params.s2,
        zero_update,
    }
}

/// `global + sum_d weight_d * delta_d`.
pub fn aggregate(
    global: &ParamVector,
    updates: &[ClientUpdate],
    weights: &[f64],
) -> Result<ParamVector> {
    apply_weighted(global, updates, weights)
}

/// The candidate exponents tried around `current`, floored at [`MIN_S2`]
/// and deduplicated in order.
pub fn s2_candidates(current: f64) -> Vec<f64> {
    let mut out: Vec<f64> = Vec::with_capacity(5);
    for c in [
        current,
        current + 0.5,
        current - 0.5,
        current - 5.0,
        current + 5.0,
    ] {
        let c = c.max(MIN_S2);
        if !out.contains(&c) {
            out.push(c);
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct S2Candidate {
    pub s2: f64,
    pub validation_loss: f64,
}

/// Outcome of the per-round exponent search.
#[derive(Clone, Debug, PartialEq)]
pub struct S2Selection {
    pub s2: f64,
    pub table: ScoreTable,
    pub model: ParamVector,
    pub candidates: Vec<S2Candidate>,
}

/// Scores and aggregates once per candidate exponent and keeps the candidate
/// whose global model has the lowest mean validation loss. Ties go to the
/// candidate closest to `params.s2`, then to the smaller value.
pub fn adapt_s2(
    report: &ValidationReport,
    params: &ScoreParams,
    dims: &ScoreDims,
    global: &ParamVector,
    updates: &[ClientUpdate],
    spec: &MlpSpec,
    val: &ValidationSet,
) -> Result<S2Selection> {
    let current = params.s2.max(MIN_S2);
    let evaluated: Vec<(f64, ScoreTable, ParamVector, f64)> = s2_candidates(current)
        .into_par_iter()
        .map(|s2| {
            let table = score(
                report,
                &ScoreParams {
                    s2,
                    ..params.clone()
                },
                dims,
            );
            let model = if table.zero_update {
                global.clone()
            } else {
                aggregate(global, updates, &table.weights())?
            };
            let loss = eval_losses(&model, spec, &val.data)?.mean_loss();
            Ok((s2, table, model, loss))
        })
        .collect::<Result<_>>()?;

    let better = |a: &(f64, ScoreTable, ParamVector, f64),
                  b: &(f64, ScoreTable, ParamVector, f64)| {
        let tol = TIE_TOLERANCE * a.3.abs().max(b.3.abs()).max(1.0);
        if (a.3 - b.3).abs() > tol {
            return a.3.total_cmp(&b.3);
        }
        (a.0 - current)
            .abs()
            .total_cmp(&(b.0 - current).abs())
            .then(a.0.total_cmp(&b.0))
    };
    let best = evaluated
        .iter()
        .min_by(|a, b| better(a, b))
        .expect("at least one candidate");
    let candidates = evaluated
        .iter()
        .map(|(s2, _, _, loss)| S2Candidate {
            s2: *s2,
            validation_loss: *loss,
        })
        .collect();
    Ok(S2Selection {
        s2: best.0,
        table: best.1.clone(),
        model: best.2.clone(),
        candidates,
    })
}

/// Stateful aggregator carrying the adaptive exponent across rounds.
pub struct FedVal {
    pub params: ScoreParams,
    pub dims: ScoreDims,
}

impl FedVal {
    pub fn new(params: ScoreParams, dims: ScoreDims) -> Self {
        FedVal { params, dims }
    }

    pub fn current_s2(&self) -> f64 {
        self.params.s2
    }
}

impl Aggregator for FedVal {
    fn name(&self) -> &'static str {
        "fedval"
    }

    fn aggregate(
        &mut self,
        global: &ParamVector,
        updates: &[ClientUpdate],
        ctx: &RoundContext<'_>,
    ) -> Result<Aggregate> {
        let models = updates
            .iter()
            .map(|u| {
                let mut m = global.clone();
                m.add_scaled(1.0, &u.delta)?;
                Ok(m)
            })
            .collect::<Result<Vec<_>>>()?;
        let report = compute_report(&models, ctx.spec, ctx.validation, self.dims.recall)?;
        let (table, model) = if self.dims.adaptive_s2 {
            let sel = adapt_s2(
                &report,
                &self.params,
                &self.dims,
                global,
                updates,
                ctx.spec,
                ctx.validation,
            )?;
            self.params.s2 = sel.s2;
            (sel.table, sel.model)
        } else {
            let table = score(&report, &self.params, &self.dims);
            let model = if table.zero_update {
                global.clone()
            } else {
                aggregate(global, updates, &table.weights())?
            };
            (table, model)
        };
        if table.zero_update {
            log::info!("every client scored zero; global model unchanged this round");
        }
        Ok(Aggregate {
            model,
            weights: Some(table.weights()),
            s2: Some(table.s2),
            zero_update: table.zero_update,
            scores: Some(table),
        })
    }
}

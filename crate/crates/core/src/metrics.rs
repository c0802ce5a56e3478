//! Model evaluation: accuracy per label, fairness spread, group recall and
//! backdoor success.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::fedval::mad;
use crate::model::{eval_losses, MlpSpec, ParamVector};

/// One evaluation snapshot of the global model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub round: usize,
    pub overall_accuracy: f64,
    pub per_label_accuracy: Vec<f64>,
    pub label_accuracy_mad: f64,
    pub per_group_recall: Option<BTreeMap<usize, f64>>,
    pub backdoor_accuracy: Option<f64>,
    pub mean_validation_loss: f64,
}

impl MetricRecord {
    /// Column names of the tabular export, in field order.
    pub const FIELDS: [&'static str; 7] = [
        "round",
        "overall_accuracy",
        "per_label_accuracy",
        "label_accuracy_mad",
        "per_group_recall",
        "backdoor_accuracy",
        "mean_validation_loss",
    ];

    pub fn min_label_accuracy(&self) -> f64 {
        self.per_label_accuracy
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min)
    }
}

/// Recall of each group.
///
/// Binary tasks use class 1 as the positive class. With more classes the
/// group's recall is the macro average of per-class recall over the classes
/// present in the group. Groups without positives yield `None`.
pub fn group_recall(
    labels: &[usize],
    predictions: &[usize],
    groups: &[usize],
    group_count: usize,
    class_count: usize,
) -> Vec<Option<f64>> {
    // hits[g][c], totals[g][c]
    let mut hits = vec![vec![0usize; class_count]; group_count];
    let mut totals = vec![vec![0usize; class_count]; group_count];
    for ((&y, &p), &g) in labels.iter().zip(predictions).zip(groups) {
        totals[g][y] += 1;
        if p == y {
            hits[g][y] += 1;
        }
    }
    (0..group_count)
        .map(|g| {
            if class_count == 2 {
                (totals[g][1] > 0).then(|| hits[g][1] as f64 / totals[g][1] as f64)
            } else {
                let present: Vec<f64> = (0..class_count)
                    .filter(|&c| totals[g][c] > 0)
                    .map(|c| hits[g][c] as f64 / totals[g][c] as f64)
                    .collect();
                (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64)
            }
        })
        .collect()
}

/// Evaluates `model` on `test`. `mean_validation_loss` is filled with the
/// mean loss on `test`; callers that track a separate validation set
/// overwrite it.
pub fn evaluate(
    model: &ParamVector,
    spec: &MlpSpec,
    test: &Dataset,
    backdoor: Option<(usize, usize)>,
) -> Result<MetricRecord> {
    let eval = eval_losses(model, spec, test)?;
    let k = test.class_count();
    let mut correct = vec![0usize; k];
    let counts = test.label_counts();
    for (&y, &p) in test.labels().iter().zip(&eval.predictions) {
        if y == p {
            correct[y] += 1;
        }
    }
    if let Some(missing) = counts.iter().position(|&c| c == 0) {
        return Err(Error::InsufficientData(format!(
            "test set has no samples of label {missing}"
        )));
    }
    let per_label_accuracy: Vec<f64> = correct
        .iter()
        .zip(&counts)
        .map(|(&c, &n)| c as f64 / n as f64)
        .collect();
    let overall_accuracy = correct.iter().sum::<usize>() as f64 / test.len() as f64;

    let per_group_recall = test.groups().map(|groups| {
        group_recall(
            test.labels(),
            &eval.predictions,
            groups,
            test.group_count(),
            k,
        )
        .into_iter()
        .enumerate()
        .filter_map(|(g, r)| r.map(|r| (g, r)))
        .collect()
    });

    let backdoor_accuracy = match backdoor {
        None => None,
        Some((source, target)) => {
            if source >= k || target >= k {
                return Err(Error::LabelOutOfRange {
                    label: source.max(target),
                    classes: k,
                });
            }
            let flipped = test
                .labels()
                .iter()
                .zip(&eval.predictions)
                .filter(|&(&y, &p)| y == source && p == target)
                .count();
            Some(flipped as f64 / counts[source] as f64)
        }
    };

    Ok(MetricRecord {
        round: 0,
        label_accuracy_mad: mad(&per_label_accuracy),
        overall_accuracy,
        per_label_accuracy,
        per_group_recall,
        backdoor_accuracy,
        mean_validation_loss: eval.mean_loss(),
    })
}

fn join<T: std::fmt::Display>(items: impl IntoIterator<Item = T>) -> String {
    items
        .into_iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(";")
}

/// Writes records as CSV with [`MetricRecord::FIELDS`] as the header.
///
/// List cells are `;`-joined, group recalls are written as `group:recall`
/// and absent values as empty cells. Floats use the shortest text that
/// round-trips, so equal records always produce equal bytes.
pub fn write_csv<W: std::io::Write>(records: &[MetricRecord], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let io = |e: csv::Error| Error::Io(e.into());
    w.write_record(MetricRecord::FIELDS).map_err(io)?;
    for r in records {
        w.write_record([
            r.round.to_string(),
            r.overall_accuracy.to_string(),
            join(&r.per_label_accuracy),
            r.label_accuracy_mad.to_string(),
            r.per_group_recall
                .as_ref()
                .map(|m| join(m.iter().map(|(g, v)| format!("{g}:{v}"))))
                .unwrap_or_default(),
            r.backdoor_accuracy
                .map(|b| b.to_string())
                .unwrap_or_default(),
            r.mean_validation_loss.to_string(),
        ])
        .map_err(io)?;
    }
    w.flush()?;
    Ok(())
}

/// Trailing-window means of a metric series.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub window: usize,
    pub overall_accuracy: f64,
    pub per_label_accuracy: Vec<f64>,
    pub label_accuracy_mad: f64,
    pub min_label_accuracy: f64,
    pub per_group_recall: Option<BTreeMap<usize, f64>>,
    pub backdoor_accuracy: Option<f64>,
    pub mean_validation_loss: f64,
}

pub fn summarize(records: &[MetricRecord], window: usize) -> Result<MetricSummary> {
    if window == 0 {
        return Err(Error::config("window", "must be >= 1"));
    }
    if window > records.len() {
        return Err(Error::InsufficientData(format!(
            "window {window} exceeds {} records",
            records.len()
        )));
    }
    let tail = &records[records.len() - window..];
    let w = window as f64;
    let mean = |f: &dyn Fn(&MetricRecord) -> f64| tail.iter().map(f).sum::<f64>() / w;
    let k = tail[0].per_label_accuracy.len();
    let per_label_accuracy: Vec<f64> = (0..k)
        .map(|c| mean(&|r| r.per_label_accuracy.get(c).copied().unwrap_or(f64::NAN)))
        .collect();
    let backdoor_accuracy = tail
        .iter()
        .map(|r| r.backdoor_accuracy)
        .collect::<Option<Vec<f64>>>()
        .map(|v| v.iter().sum::<f64>() / w);
    let per_group_recall = tail[0].per_group_recall.as_ref().map(|first| {
        first
            .keys()
            .filter_map(|g| {
                let vals: Option<Vec<f64>> = tail
                    .iter()
                    .map(|r| r.per_group_recall.as_ref().and_then(|m| m.get(g).copied()))
                    .collect();
                vals.map(|v| (*g, v.iter().sum::<f64>() / w))
            })
            .collect()
    });
    Ok(MetricSummary {
        window,
        overall_accuracy: mean(&|r| r.overall_accuracy),
        label_accuracy_mad: mean(&|r| r.label_accuracy_mad),
        min_label_accuracy: per_label_accuracy
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min),
        per_label_accuracy,
        per_group_recall,
        backdoor_accuracy,
        mean_validation_loss: mean(&|r| r.mean_validation_loss),
    })
}

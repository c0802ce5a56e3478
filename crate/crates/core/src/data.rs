//! Datasets, synthetic task generation, client partitioning and validation holdouts.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

/// A labelled sample matrix stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    features: Vec<f64>,
    dim: usize,
    labels: Vec<usize>,
    groups: Option<Vec<usize>>,
    group_count: usize,
    class_count: usize,
}

impl Dataset {
    pub fn new(
        features: Vec<f64>,
        dim: usize,
        labels: Vec<usize>,
        groups: Option<Vec<usize>>,
        class_count: usize,
    ) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Empty("dataset"));
        }
        if dim == 0 {
            return Err(Error::config(
                "dataset.dim",
                "feature dimension must be >= 1",
            ));
        }
        if features.len() != labels.len() * dim {
            return Err(Error::DimensionMismatch {
                expected: labels.len() * dim,
                actual: features.len(),
            });
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= class_count) {
            return Err(Error::LabelOutOfRange {
                label,
                classes: class_count,
            });
        }
        let group_count = match &groups {
            Some(g) => {
                if g.len() != labels.len() {
                    return Err(Error::DimensionMismatch {
                        expected: labels.len(),
                        actual: g.len(),
                    });
                }
                g.iter().max().map_or(0, |m| m + 1)
            }
            None => 0,
        };
        Ok(Dataset {
            features,
            dim,
            labels,
            groups,
            group_count,
            class_count,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    /// Number of demographic groups, zero when the dataset carries none.
    pub fn group_count(&self) -> usize {
        self.group_count
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn groups(&self) -> Option<&[usize]> {
        self.groups.as_deref()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    /// Copies the given rows into a new dataset. Class and group counts are
    /// inherited from `self` so shards stay comparable with their source.
    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        if indices.is_empty() {
            return Err(Error::Empty("dataset subset"));
        }
        let mut features = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            features.extend_from_slice(self.row(i));
        }
        Ok(Dataset {
            features,
            dim: self.dim,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            groups: self
                .groups
                .as_ref()
                .map(|g| indices.iter().map(|&i| g[i]).collect()),
            group_count: self.group_count,
            class_count: self.class_count,
        })
    }

    /// Same samples with a replacement label vector.
    pub fn with_labels(&self, labels: Vec<usize>) -> Result<Dataset> {
        if labels.len() != self.len() {
            return Err(Error::DimensionMismatch {
                expected: self.len(),
                actual: labels.len(),
            });
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= self.class_count) {
            return Err(Error::LabelOutOfRange {
                label,
                classes: self.class_count,
            });
        }
        Ok(Dataset {
            labels,
            ..self.clone()
        })
    }

    pub fn label_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.class_count];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    pub fn indices_by_label(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.class_count];
        for (i, &l) in self.labels.iter().enumerate() {
            out[l].push(i);
        }
        out
    }

    pub fn indices_by_group(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.group_count];
        if let Some(groups) = &self.groups {
            for (i, &g) in groups.iter().enumerate() {
                out[g].push(i);
            }
        }
        out
    }
}

/// Parameters of the Gaussian-blob classification task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub features: usize,
    pub samples: usize,
    pub separation: f64,
    pub seed: u64,
    /// Demographic groups assigned uniformly at random; 0 for none.
    #[serde(default)]
    pub groups: usize,
}

/// Generates `samples` points from `classes` unit-covariance Gaussian blobs
/// whose means are pairwise `separation` apart.
///
/// When `features >= classes` the means are `separation / sqrt(2)` times the
/// columns of a random orthonormal frame (a regular simplex). Otherwise the
/// frame cannot be orthonormal and each mean is an independent random
/// direction of the same length.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    let (k, d, n) = (spec.classes, spec.features, spec.samples);
    if k < 2 {
        return Err(Error::config("task.classes", "need at least 2 classes"));
    }
    if d < 1 {
        return Err(Error::config("task.features", "need at least 1 feature"));
    }
    if n < k {
        return Err(Error::config(
            "task.samples",
            format!("need at least one sample per class ({k}), got {n}"),
        ));
    }
    if !(spec.separation.is_finite() && spec.separation >= 0.0) {
        return Err(Error::config("task.separation", "must be finite and >= 0"));
    }

    let mut rng = seed::derived_rng(spec.seed, &[0]);
    let radius = spec.separation / std::f64::consts::SQRT_2;
    let means = random_frame(&mut rng, k, d)
        .into_iter()
        .map(|v| v.into_iter().map(|x| x * radius).collect::<Vec<_>>())
        .collect::<Vec<_>>();

    let mut labels: Vec<usize> = (0..n).map(|i| i % k).collect();
    labels.shuffle(&mut rng);
    let mut features = Vec::with_capacity(n * d);
    for &label in &labels {
        for mean in &means[label] {
            let noise: f64 = StandardNormal.sample(&mut rng);
            features.push(mean + noise);
        }
    }
    let groups = (spec.groups > 0).then(|| {
        let mut g: Vec<usize> = (0..n).map(|i| i % spec.groups).collect();
        g.shuffle(&mut rng);
        g
    });
    Dataset::new(features, d, labels, groups, k)
}

/// `k` unit vectors in `d` dimensions, orthonormal when `d >= k`.
fn random_frame<R: Rng>(rng: &mut R, k: usize, d: usize) -> Vec<Vec<f64>> {
    let mut frame: Vec<Vec<f64>> = Vec::with_capacity(k);
    while frame.len() < k {
        let mut v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        if d >= k {
            for u in &frame {
                let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(u).for_each(|(a, b)| *a -= dot * b);
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-8 {
            continue;
        }
        v.iter_mut().for_each(|x| *x /= norm);
        frame.push(v);
    }
    frame
}

/// How samples are distributed over clients.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum PartitionScheme {
    Iid,
    /// Label and quantity skew driven by a Dirichlet concentration.
    Lda {
        alpha: f64,
    },
    /// `affected_fraction` of clients hold no samples of the `missing` labels.
    MissingLabels {
        missing: Vec<usize>,
        affected_fraction: f64,
    },
    /// IID labels, client sizes drawn from a Dirichlet over clients.
    QuantitySkew {
        alpha: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionSpec {
    pub scheme: PartitionScheme,
    pub client_count: usize,
    pub seed: u64,
}

const MAX_REDRAWS: usize = 1000;

/// Splits `data` into `client_count` disjoint, non-empty shards.
pub fn partition(data: &Dataset, spec: &PartitionSpec) -> Result<Vec<Dataset>> {
    partition_indices(data, spec)?
        .iter()
        .map(|idx| data.subset(idx))
        .collect()
}

/// Index form of [`partition`]: one sorted index list per client.
pub fn partition_indices(data: &Dataset, spec: &PartitionSpec) -> Result<Vec<Vec<usize>>> {
    let n_clients = spec.client_count;
    if n_clients == 0 {
        return Err(Error::config("partition.client_count", "must be >= 1"));
    }
    if data.len() < n_clients {
        return Err(Error::config(
            "partition.client_count",
            format!("{n_clients} clients but only {} samples", data.len()),
        ));
    }
    let mut rng = seed::derived_rng(spec.seed, &[1]);
    let by_label = data.indices_by_label();

    let mut shards = match &spec.scheme {
        PartitionScheme::Iid => {
            let mut shards = vec![Vec::new(); n_clients];
            deal_stratified(
                &mut rng,
                &by_label,
                &(0..n_clients).collect::<Vec<_>>(),
                &mut shards,
            );
            shards
        }
        PartitionScheme::Lda { alpha } => {
            check_alpha(*alpha, "partition.scheme.alpha")?;
            lda(&mut rng, &by_label, n_clients, *alpha)?
        }
        PartitionScheme::MissingLabels {
            missing,
            affected_fraction,
        } => {
            if !(0.0..=1.0).contains(affected_fraction) {
                return Err(Error::config(
                    "partition.scheme.affected_fraction",
                    "must lie in [0, 1]",
                ));
            }
            if let Some(&l) = missing.iter().find(|&&l| l >= data.class_count()) {
                return Err(Error::config(
                    "partition.scheme.missing",
                    format!("label {l} out of range for {} classes", data.class_count()),
                ));
            }
            let affected_count = seed::fraction_count(*affected_fraction, n_clients);
            if affected_count == n_clients && !missing.is_empty() {
                return Err(Error::config(
                    "partition.scheme.affected_fraction",
                    "every client would lack the missing labels",
                ));
            }
            let mut clients: Vec<usize> = (0..n_clients).collect();
            clients.shuffle(&mut rng);
            let unaffected: Vec<usize> = {
                let mut u = clients[affected_count..].to_vec();
                u.sort_unstable();
                u
            };
            let missing: BTreeSet<usize> = missing.iter().copied().collect();
            let (held_back, common): (Vec<_>, Vec<_>) = by_label
                .iter()
                .enumerate()
                .map(|(label, idx)| (label, idx.clone()))
                .partition(|(label, _)| missing.contains(label));
            let strip =
                |v: Vec<(usize, Vec<usize>)>| v.into_iter().map(|(_, i)| i).collect::<Vec<_>>();
            let mut shards = vec![Vec::new(); n_clients];
            deal_stratified(
                &mut rng,
                &strip(common),
                &(0..n_clients).collect::<Vec<_>>(),
                &mut shards,
            );
            deal_stratified(&mut rng, &strip(held_back), &unaffected, &mut shards);
            shards
        }
        PartitionScheme::QuantitySkew { alpha } => {
            check_alpha(*alpha, "partition.scheme.alpha")?;
            let sizes = loop_redraw(|| {
                let w = dirichlet(&mut rng, *alpha, n_clients);
                let sizes = apportion(data.len(), &w);
                sizes.iter().all(|&s| s > 0).then_some(sizes)
            })?;
            let mut all: Vec<usize> = (0..data.len()).collect();
            all.shuffle(&mut rng);
            let mut shards = Vec::with_capacity(n_clients);
            let mut start = 0;
            for size in sizes {
                shards.push(all[start..start + size].to_vec());
                start += size;
            }
            shards
        }
    };

    if let Some(empty) = shards.iter().position(|s| s.is_empty()) {
        return Err(Error::config(
            "partition",
            format!("client {empty} received no samples"),
        ));
    }
    shards.iter_mut().for_each(|s| s.sort_unstable());
    Ok(shards)
}

fn check_alpha(alpha: f64, field: &str) -> Result<()> {
    if alpha.is_finite() && alpha > 0.0 {
        Ok(())
    } else {
        Err(Error::config(field, "must be finite and > 0"))
    }
}

fn loop_redraw<T>(mut f: impl FnMut() -> Option<T>) -> Result<T> {
    for _ in 0..MAX_REDRAWS {
        if let Some(v) = f() {
            return Ok(v);
        }
    }
    Err(Error::config(
        "partition",
        format!("no feasible partition after {MAX_REDRAWS} redraws"),
    ))
}

/// Deals each label's samples round-robin over `clients`, rotating the start
/// so totals stay balanced within one sample.
fn deal_stratified<R: Rng>(
    rng: &mut R,
    by_label: &[Vec<usize>],
    clients: &[usize],
    shards: &mut [Vec<usize>],
) {
    if clients.is_empty() {
        return;
    }
    let mut offset = 0;
    for indices in by_label {
        let mut idx = indices.clone();
        idx.shuffle(rng);
        for (j, i) in idx.into_iter().enumerate() {
            shards[clients[(offset + j) % clients.len()]].push(i);
        }
        offset = (offset + indices.len()) % clients.len();
    }
}

/// Latent-Dirichlet partition. Each client draws label proportions from
/// Dirichlet(alpha); every label's samples are then apportioned over clients
/// in proportion to the clients' weight on that label. Clients that end up
/// empty have their row redrawn.
fn lda<R: Rng>(
    rng: &mut R,
    by_label: &[Vec<usize>],
    n_clients: usize,
    alpha: f64,
) -> Result<Vec<Vec<usize>>> {
    let k = by_label.len();
    let mut rows: Vec<Vec<f64>> = (0..n_clients).map(|_| dirichlet(rng, alpha, k)).collect();
    for _ in 0..MAX_REDRAWS {
        let mut counts = vec![vec![0usize; k]; n_clients];
        for (label, indices) in by_label.iter().enumerate() {
            let column: Vec<f64> = rows.iter().map(|r| r[label]).collect();
            let total: f64 = column.iter().sum();
            let weights: Vec<f64> = column.iter().map(|w| w / total).collect();
            for (c, n) in apportion(indices.len(), &weights).into_iter().enumerate() {
                counts[c][label] = n;
            }
        }
        let empty: Vec<usize> = (0..n_clients)
            .filter(|&c| counts[c].iter().sum::<usize>() == 0)
            .collect();
        if empty.is_empty() {
            let mut shards = vec![Vec::new(); n_clients];
            for (label, indices) in by_label.iter().enumerate() {
                let mut idx = indices.clone();
                idx.shuffle(rng);
                let mut start = 0;
                for (c, shard) in shards.iter_mut().enumerate() {
                    let n = counts[c][label];
                    shard.extend_from_slice(&idx[start..start + n]);
                    start += n;
                }
            }
            return Ok(shards);
        }
        for c in empty {
            rows[c] = dirichlet(rng, alpha, k);
        }
    }
    Err(Error::config(
        "partition.scheme.alpha",
        format!("no partition without empty clients after {MAX_REDRAWS} redraws"),
    ))
}

/// One Dirichlet(alpha * 1_n) draw via normalized Gamma variates.
pub(crate) fn dirichlet<R: Rng>(rng: &mut R, alpha: f64, n: usize) -> Vec<f64> {
    let gamma = Gamma::new(alpha, 1.0).expect("alpha validated positive");
    loop {
        let draws: Vec<f64> = (0..n).map(|_| gamma.sample(rng)).collect();
        let total: f64 = draws.iter().sum();
        if total > 0.0 && total.is_finite() {
            return draws.into_iter().map(|x| x / total).collect();
        }
    }
}

/// Largest-remainder apportionment of `total` items by `weights` (summing to 1).
pub(crate) fn apportion(total: usize, weights: &[f64]) -> Vec<usize> {
    let exact: Vec<f64> = weights.iter().map(|w| w * total as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|x| x.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

/// A server-side holdout with per-label and per-group index lists.
#[derive(Clone, Debug)]
pub struct ValidationSet {
    pub data: Dataset,
    pub label_indices: Vec<Vec<usize>>,
    pub group_indices: Vec<Vec<usize>>,
    /// Row indices of the holdout in the source dataset.
    pub source_indices: Vec<usize>,
}

impl ValidationSet {
    pub fn from_dataset(data: Dataset, source_indices: Vec<usize>) -> Self {
        ValidationSet {
            label_indices: data.indices_by_label(),
            group_indices: data.indices_by_group(),
            data,
            source_indices,
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// A validation holdout together with the source rows left for training.
#[derive(Clone, Debug)]
pub struct ValidationSplit {
    pub validation: ValidationSet,
    pub remainder_indices: Vec<usize>,
}

/// Draws a validation holdout of `per_label * K` samples.
///
/// Balanced mode takes exactly `per_label` samples of every label. Otherwise
/// the holdout is a uniform draw and follows the source label distribution.
pub fn build_validation(
    data: &Dataset,
    per_label: usize,
    balanced: bool,
    seed: u64,
) -> Result<ValidationSplit> {
    if per_label == 0 {
        return Err(Error::config(
            "holdout.validation_per_label",
            "must be >= 1",
        ));
    }
    let mut rng = seed::derived_rng(seed, &[2]);
    let k = data.class_count();
    let mut chosen = if balanced {
        let mut chosen = Vec::with_capacity(per_label * k);
        for (label, indices) in data.indices_by_label().into_iter().enumerate() {
            if indices.len() < per_label {
                return Err(Error::InsufficientData(format!(
                    "label {label} has {} samples, validation needs {per_label}",
                    indices.len()
                )));
            }
            chosen.extend(indices.choose_multiple(&mut rng, per_label).copied());
        }
        chosen
    } else {
        let want = per_label * k;
        if data.len() <= want {
            return Err(Error::InsufficientData(format!(
                "{} samples cannot supply a {want}-sample validation set",
                data.len()
            )));
        }
        rand::seq::index::sample(&mut rng, data.len(), want).into_vec()
    };
    chosen.sort_unstable();
    if chosen.len() >= data.len() {
        return Err(Error::InsufficientData(
            "validation set would consume the whole dataset".into(),
        ));
    }
    let taken: BTreeSet<usize> = chosen.iter().copied().collect();
    let remainder_indices = (0..data.len()).filter(|i| !taken.contains(i)).collect();
    let validation = ValidationSet::from_dataset(data.subset(&chosen)?, chosen);
    Ok(ValidationSplit {
        validation,
        remainder_indices,
    })
}

/// Stratified holdout: takes `floor(fraction * n_k)` samples of each label
/// `k`. Returns `(held_out, rest)` as sorted source indices.
pub fn stratified_split(
    data: &Dataset,
    fraction: f64,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::config("holdout.test_fraction", "must lie in (0, 1)"));
    }
    let mut rng = seed::derived_rng(seed, &[3]);
    let mut held = Vec::new();
    let mut rest = Vec::new();
    for mut indices in data.indices_by_label() {
        indices.shuffle(&mut rng);
        let take = seed::fraction_count(fraction, indices.len());
        held.extend_from_slice(&indices[..take]);
        rest.extend_from_slice(&indices[take..]);
    }
    held.sort_unstable();
    rest.sort_unstable();
    if held.is_empty() || rest.is_empty() {
        return Err(Error::InsufficientData(format!(
            "test fraction {fraction} leaves an empty split"
        )));
    }
    Ok((held, rest))
}

/// Column roles for CSV ingestion.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvSchema {
    pub feature_columns: Vec<String>,
    pub label_column: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group_column: Option<String>,
    /// Number of classes; inferred as `max label + 1` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_count: Option<usize>,
}

/// Loads a headered CSV file. Features are standardized per column
/// (population standard deviation, constant columns divide by 1); group
/// values are mapped to ids in sorted order.
pub fn load_csv(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<Dataset> {
    let path = path.as_ref();
    let csv_err = |row: usize, message: String| Error::Csv {
        path: path.to_path_buf(),
        row,
        message,
    };
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_err(1, e.to_string()))?;
    let headers = reader
        .headers()
        .map_err(|e| csv_err(1, e.to_string()))?
        .clone();
    let column = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| csv_err(1, format!("missing column `{name}`")))
    };
    if schema.feature_columns.is_empty() {
        return Err(Error::config(
            "task.schema.feature_columns",
            "must not be empty",
        ));
    }
    let feature_cols = schema
        .feature_columns
        .iter()
        .map(|c| column(c))
        .collect::<Result<Vec<_>>>()?;
    let label_col = column(&schema.label_column)?;
    let group_col = schema.group_column.as_deref().map(column).transpose()?;

    let d = feature_cols.len();
    let mut features = Vec::new();
    let mut labels = Vec::new();
    let mut raw_groups = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let row = e.position().map_or(0, |p| p.line() as usize);
            csv_err(row, e.to_string())
        })?;
        let row = record
            .position()
            .map_or(labels.len() + 2, |p| p.line() as usize);
        let field = |col: usize| {
            record
                .get(col)
                .map(str::trim)
                .ok_or_else(|| csv_err(row, format!("missing field {col}")))
        };
        for &col in &feature_cols {
            let text = field(col)?;
            let value: f64 = text
                .parse()
                .map_err(|_| csv_err(row, format!("non-numeric feature `{text}`")))?;
            if !value.is_finite() {
                return Err(csv_err(row, format!("non-finite feature `{text}`")));
            }
            features.push(value);
        }
        let text = field(label_col)?;
        let label: usize = text
            .parse()
            .map_err(|_| csv_err(row, format!("label `{text}` is not a class id")))?;
        if let Some(k) = schema.class_count {
            if label >= k {
                return Err(csv_err(
                    row,
                    format!("unknown label {label} for {k} classes"),
                ));
            }
        }
        labels.push(label);
        if let Some(col) = group_col {
            raw_groups.push(field(col)?.to_string());
        }
    }
    if labels.is_empty() {
        return Err(Error::Empty("csv file"));
    }

    let n = labels.len();
    for j in 0..d {
        let mean = (0..n).map(|i| features[i * d + j]).sum::<f64>() / n as f64;
        let var = (0..n)
            .map(|i| (features[i * d + j] - mean).powi(2))
            .sum::<f64>()
            / n as f64;
        let sd = if var.sqrt() > 1e-12 { var.sqrt() } else { 1.0 };
        for i in 0..n {
            features[i * d + j] = (features[i * d + j] - mean) / sd;
        }
    }

    let groups = group_col.map(|_| {
        let ids: BTreeMap<&str, usize> = raw_groups
            .iter()
            .map(String::as_str)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .enumerate()
            .map(|(i, g)| (g, i))
            .collect();
        raw_groups.iter().map(|g| ids[g.as_str()]).collect()
    });
    let class_count = schema
        .class_count
        .unwrap_or_else(|| labels.iter().max().map_or(0, |m| m + 1).max(2));
    Dataset::new(features, d, labels, groups, class_count)
}

/// Label histogram normalized to proportions.
pub fn label_distribution(data: &Dataset) -> Vec<f64> {
    let n = data.len() as f64;
    data.label_counts()
        .into_iter()
        .map(|c| c as f64 / n)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blobs(k: usize, n: usize, seed: u64) -> Dataset {
        gen_synthetic(&SyntheticSpec {
            classes: k,
            features: k.max(2),
            samples: n,
            separation: 4.0,
            seed,
            groups: 0,
        })
        .unwrap()
    }

    fn tv_from_uniform(shard: &Dataset) -> f64 {
        let k = shard.class_count() as f64;
        label_distribution(shard)
            .iter()
            .map(|p| (p - 1.0 / k).abs())
            .sum::<f64>()
            / 2.0
    }

    #[test]
    fn synthetic_is_deterministic_and_balanced() {
        let a = blobs(3, 301, 5);
        let b = blobs(3, 301, 5);
        assert_eq!(a, b);
        let counts = a.label_counts();
        assert!(
            counts.iter().all(|&c| (100..=101).contains(&c)),
            "{counts:?}"
        );
        assert_ne!(a, blobs(3, 301, 6));
    }

    #[test]
    fn synthetic_means_are_separation_apart() {
        let data = gen_synthetic(&SyntheticSpec {
            classes: 4,
            features: 6,
            samples: 40_000,
            separation: 10.0,
            seed: 1,
            groups: 0,
        })
        .unwrap();
        let d = data.dim();
        let mut means = vec![vec![0.0; d]; 4];
        let counts = data.label_counts();
        for i in 0..data.len() {
            let l = data.labels()[i];
            for (m, x) in means[l].iter_mut().zip(data.row(i)) {
                *m += x / counts[l] as f64;
            }
        }
        for a in 0..4 {
            for b in a + 1..4 {
                let dist = means[a]
                    .iter()
                    .zip(&means[b])
                    .map(|(x, y)| (x - y).powi(2))
                    .sum::<f64>()
                    .sqrt();
                assert!((dist - 10.0).abs() < 0.1, "{a}-{b}: {dist}");
            }
        }
    }

    #[test]
    fn synthetic_rejects_bad_shapes() {
        let mut spec = SyntheticSpec {
            classes: 1,
            features: 2,
            samples: 10,
            separation: 1.0,
            seed: 0,
            groups: 0,
        };
        assert!(gen_synthetic(&spec).is_err());
        spec.classes = 3;
        spec.samples = 2;
        assert!(gen_synthetic(&spec).is_err());
    }

    #[test]
    fn iid_partition_is_stratified() {
        let data = blobs(10, 400, 1);
        let shards = partition(
            &data,
            &PartitionSpec {
                scheme: PartitionScheme::Iid,
                client_count: 4,
                seed: 9,
            },
        )
        .unwrap();
        for shard in &shards {
            assert_eq!(shard.len(), 100);
            assert!(shard.label_counts().iter().all(|&c| (9..=11).contains(&c)));
        }
    }

    #[test]
    fn lda_with_large_alpha_is_near_uniform() {
        let data = blobs(10, 4000, 2);
        let shards = partition(
            &data,
            &PartitionSpec {
                scheme: PartitionScheme::Lda { alpha: 1000.0 },
                client_count: 40,
                seed: 3,
            },
        )
        .unwrap();
        for shard in &shards {
            let tv = tv_from_uniform(shard);
            assert!(tv <= 0.05, "tv {tv}");
        }
    }

    #[test]
    fn lda_with_small_alpha_is_skewed() {
        let data = blobs(10, 4000, 2);
        let shards = partition(
            &data,
            &PartitionSpec {
                scheme: PartitionScheme::Lda { alpha: 0.1 },
                client_count: 20,
                seed: 3,
            },
        )
        .unwrap();
        let mean_tv = shards.iter().map(tv_from_uniform).sum::<f64>() / shards.len() as f64;
        assert!(mean_tv > 0.4, "mean tv {mean_tv}");
    }

    #[test]
    fn lda_histograms_average_to_source_marginal() {
        use statrs::distribution::{ChiSquared, ContinuousCDF};
        // Skewed source so the marginal is not uniform.
        let counts = [300usize, 200, 100];
        let labels: Vec<usize> = counts
            .iter()
            .enumerate()
            .flat_map(|(l, &c)| std::iter::repeat(l).take(c))
            .collect();
        let n = labels.len();
        let data = Dataset::new((0..n).map(|i| i as f64).collect(), 1, labels, None, 3).unwrap();
        let seeds = 100;
        let mut mean = [0.0; 3];
        for seed in 0..seeds {
            let shards = partition(
                &data,
                &PartitionSpec {
                    scheme: PartitionScheme::Lda { alpha: 1.0 },
                    client_count: 10,
                    seed,
                },
            )
            .unwrap();
            for (m, c) in mean.iter_mut().zip(shards[0].label_counts()) {
                *m += c as f64 / seeds as f64;
            }
        }
        let total: f64 = mean.iter().sum();
        let stat: f64 = mean
            .iter()
            .zip(counts)
            .map(|(o, c)| {
                let e = total * c as f64 / n as f64;
                (o - e).powi(2) / e
            })
            .sum();
        let p = 1.0 - ChiSquared::new(2.0).unwrap().cdf(stat);
        assert!(p > 0.01, "chi2 {stat}, p {p}, mean histogram {mean:?}");
    }

    #[test]
    fn missing_labels_affects_exact_client_count() {
        let data = blobs(10, 4000, 4);
        let shards = partition(
            &data,
            &PartitionSpec {
                scheme: PartitionScheme::MissingLabels {
                    missing: vec![4, 5],
                    affected_fraction: 0.7,
                },
                client_count: 40,
                seed: 11,
            },
        )
        .unwrap();
        let lacking = shards
            .iter()
            .filter(|s| {
                let c = s.label_counts();
                c[4] == 0 && c[5] == 0
            })
            .count();
        assert_eq!(lacking, 28);
        // Unaffected clients are IID over every label.
        for s in shards.iter().filter(|s| s.label_counts()[4] > 0) {
            assert!(s.label_counts().iter().all(|&c| c > 0));
        }
    }

    #[test]
    fn quantity_skew_varies_sizes() {
        let data = blobs(4, 2000, 4);
        let shards = partition(
            &data,
            &PartitionSpec {
                scheme: PartitionScheme::QuantitySkew { alpha: 0.5 },
                client_count: 10,
                seed: 1,
            },
        )
        .unwrap();
        let sizes: Vec<usize> = shards.iter().map(Dataset::len).collect();
        assert_eq!(sizes.iter().sum::<usize>(), 2000);
        assert!(sizes.iter().max().unwrap() > &(3 * sizes.iter().min().unwrap()));
    }

    #[test]
    fn partition_rejects_more_clients_than_samples() {
        let data = blobs(2, 10, 1);
        let spec = PartitionSpec {
            scheme: PartitionScheme::Iid,
            client_count: 11,
            seed: 0,
        };
        assert!(matches!(partition(&data, &spec), Err(Error::Config { .. })));
    }

    #[test]
    fn balanced_validation_counts() {
        let data = blobs(10, 1000, 1);
        let split = build_validation(&data, 10, true, 0).unwrap();
        assert_eq!(split.validation.len(), 100);
        assert!(split.validation.label_indices.iter().all(|l| l.len() == 10));
        let split = build_validation(&data, 1, true, 0).unwrap();
        assert_eq!(split.validation.len(), 10);
        assert_eq!(split.remainder_indices.len(), 990);
    }

    #[test]
    fn balanced_validation_from_skewed_source() {
        let labels: Vec<usize> = (0..100).map(|i| usize::from(i >= 90)).collect();
        let data = Dataset::new(vec![0.0; 100], 1, labels, None, 2).unwrap();
        let split = build_validation(&data, 5, true, 3).unwrap();
        assert_eq!(split.validation.data.label_counts(), vec![5, 5]);
        assert!(build_validation(&data, 11, true, 3).is_err());
    }

    #[test]
    fn csv_loading() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        std::fs::write(&path, "a,b,c,g,y\n1,5,2,A,0\n2,5,4,B,1\n3,5,6,A,1\n").unwrap();
        let schema = CsvSchema {
            feature_columns: vec!["a".into(), "b".into()],
            label_column: "y".into(),
            group_column: Some("g".into()),
            class_count: None,
        };
        let data = load_csv(&path, &schema).unwrap();
        assert_eq!(data.len(), 3);
        assert_eq!(data.class_count(), 2);
        assert_eq!(data.groups().unwrap(), &[0, 1, 0]);
        // Column `b` is constant.
        assert!((0..3).all(|i| data.row(i)[1] == 0.0));
        let a: Vec<f64> = (0..3).map(|i| data.row(i)[0]).collect();
        assert!(a.iter().sum::<f64>().abs() < 1e-12);
        assert!((a.iter().map(|x| x * x).sum::<f64>() / 3.0 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn csv_errors_carry_row_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        std::fs::write(&path, "a,y\n1,0\nx,1\n").unwrap();
        let schema = CsvSchema {
            feature_columns: vec!["a".into()],
            label_column: "y".into(),
            group_column: None,
            class_count: None,
        };
        let err = load_csv(&path, &schema).unwrap_err();
        assert!(matches!(err, Error::Csv { row: 3, .. }), "{err}");

        std::fs::write(&path, "a,y\n1,0\n2,7\n").unwrap();
        let schema = CsvSchema {
            class_count: Some(2),
            ..schema
        };
        let err = load_csv(&path, &schema).unwrap_err();
        assert!(matches!(err, Error::Csv { row: 3, .. }), "{err}");
    }
}

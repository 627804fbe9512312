//! Synthetic labeled data and non-IID client partitions.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::CounterRng;
use crate::tensor_nn::{check_labels, Matrix};

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Matrix,
    labels: Vec<usize>,
    num_classes: usize,
}

impl Dataset {
    pub fn new(features: Matrix, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(Error::shape(format!(
                "{} feature rows for {} labels",
                features.rows(),
                labels.len()
            )));
        }
        if labels.is_empty() {
            return Err(Error::invalid("dataset must not be empty"));
        }
        check_labels(&labels, num_classes)?;
        Ok(Dataset {
            features,
            labels,
            num_classes,
        })
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    /// Sub-dataset with the given rows. Fails if `indices` is empty.
    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        Dataset::new(
            self.features.select_rows(indices),
            indices.iter().map(|&i| self.labels[i]).collect(),
            self.num_classes,
        )
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    /// Concatenation of several datasets with the same class count and width.
    pub fn concat(parts: &[&Dataset]) -> Result<Dataset> {
        let first = parts.first().ok_or_else(|| Error::invalid("nothing to concatenate"))?;
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for p in parts {
            if p.num_classes != first.num_classes || p.dim() != first.dim() {
                return Err(Error::shape("datasets disagree on classes or width"));
            }
            data.extend_from_slice(p.features.data());
            labels.extend_from_slice(&p.labels);
        }
        Dataset::new(
            Matrix::from_vec(labels.len(), first.dim(), data)?,
            labels,
            first.num_classes,
        )
    }

    /// Writes `feature_0,...,feature_{d-1},label` rows.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        let header: Vec<String> = (0..self.dim()).map(|i| format!("feature_{i}")).collect();
        out.push_str(&header.join(","));
        out.push_str(",label\n");
        for (row, y) in self.features.iter_rows().zip(&self.labels) {
            for v in row {
                out.push_str(&format!("{v:?},"));
            }
            out.push_str(&format!("{y}\n"));
        }
        let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        file.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
    }
}

/// Gaussian class clusters: class `c` has mean `margin * u_c` for a random
/// unit vector `u_c`, and samples add unit-variance isotropic noise.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTask {
    means: Vec<Vec<f64>>,
    seed: u64,
}

impl SyntheticTask {
    pub fn new(num_classes: usize, dim: usize, margin: f64, seed: u64) -> Result<Self> {
        if num_classes == 0 || dim == 0 {
            return Err(Error::invalid("classes and dimension must be positive"));
        }
        if !(margin >= 0.0) || !margin.is_finite() {
            return Err(Error::invalid(format!("margin must be finite and >= 0, got {margin}")));
        }
        let mut rng = CounterRng::from_path(seed, &[0]);
        let means = (0..num_classes)
            .map(|_| {
                let v: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
                v.into_iter().map(|x| margin * x / norm).collect()
            })
            .collect();
        Ok(SyntheticTask { means, seed })
    }

    pub fn num_classes(&self) -> usize {
        self.means.len()
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn class_mean(&self, class: usize) -> &[f64] {
        &self.means[class]
    }

    /// `per_class` samples of every class, class-major, from split `split`
    /// (0 = train, 1 = test by convention).
    pub fn sample(&self, per_class: usize, split: u64) -> Result<Dataset> {
        if per_class == 0 {
            return Err(Error::invalid("per_class must be positive"));
        }
        let mut rng = CounterRng::from_path(self.seed, &[1, split]);
        let (k, d) = (self.num_classes(), self.dim());
        let mut data = Vec::with_capacity(k * per_class * d);
        let mut labels = Vec::with_capacity(k * per_class);
        for (c, mean) in self.means.iter().enumerate() {
            for _ in 0..per_class {
                data.extend(mean.iter().map(|m| m + rng.normal()));
                labels.push(c);
            }
        }
        Dataset::new(Matrix::from_vec(labels.len(), d, data)?, labels, k)
    }
}

/// Single dataset of `per_class` samples per class.
pub fn make_synthetic(
    num_classes: usize,
    dim: usize,
    per_class: usize,
    margin: f64,
    seed: u64,
) -> Result<Dataset> {
    SyntheticTask::new(num_classes, dim, margin, seed)?.sample(per_class, 0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionMode {
    LabelSkew,
    FeatureSkew,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PartitionSpec {
    pub num_clients: usize,
    pub beta: f64,
    pub seed: u64,
    pub mode: PartitionMode,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientShard {
    pub client_id: usize,
    pub dataset: Dataset,
    /// `n_k / sum_i n_i`.
    pub gamma: f64,
    /// Row indices into the source dataset, ascending.
    pub source_indices: Vec<usize>,
}

impl ClientShard {
    pub fn len(&self) -> usize {
        self.dataset.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dataset.is_empty()
    }
}

const MAX_PARTITION_ATTEMPTS: u64 = 100;

fn build_shards(dataset: &Dataset, assignment: Vec<Vec<usize>>) -> Result<Vec<ClientShard>> {
    let total = dataset.len() as f64;
    assignment
        .into_iter()
        .enumerate()
        .map(|(client_id, mut idx)| {
            idx.sort_unstable();
            Ok(ClientShard {
                client_id,
                gamma: idx.len() as f64 / total,
                dataset: dataset.subset(&idx)?,
                source_indices: idx,
            })
        })
        .collect()
}

fn indices_by_class(dataset: &Dataset) -> Vec<Vec<usize>> {
    let mut by_class = vec![Vec::new(); dataset.num_classes()];
    for (i, &y) in dataset.labels().iter().enumerate() {
        by_class[y].push(i);
    }
    by_class
}

/// One attempt of the label-skew split: for every class, shuffle its rows
/// and cut them at `round(n_c * cumsum(p))` with `p ~ Dir(beta * 1_K)`.
fn dirichlet_assignment(dataset: &Dataset, k: usize, beta: f64, seed: u64) -> Vec<Vec<usize>> {
    let mut assignment = vec![Vec::new(); k];
    for (c, mut rows) in indices_by_class(dataset).into_iter().enumerate() {
        let mut rng = CounterRng::from_path(seed, &[c as u64]);
        rng.shuffle(&mut rows);
        let proportions = rng.dirichlet(beta, k);
        let n = rows.len();
        let mut cum = 0.0;
        let mut start = 0;
        for (client, p) in proportions.iter().enumerate() {
            cum += p;
            let end = if client + 1 == k {
                n
            } else {
                ((cum * n as f64).round() as usize).clamp(start, n)
            };
            assignment[client].extend_from_slice(&rows[start..end]);
            start = end;
        }
    }
    assignment
}

/// Label-skew partition. If a draw leaves a client empty the whole draw is
/// repeated with `seed + 1`, up to 100 attempts.
pub fn dirichlet_partition(dataset: &Dataset, spec: &PartitionSpec) -> Result<Vec<ClientShard>> {
    if spec.mode != PartitionMode::LabelSkew {
        return Err(Error::invalid("dirichlet_partition requires label_skew mode"));
    }
    if spec.num_clients == 0 {
        return Err(Error::invalid("need at least one client"));
    }
    if !(spec.beta > 0.0) || !spec.beta.is_finite() {
        return Err(Error::invalid(format!("beta must be positive, got {}", spec.beta)));
    }
    if spec.num_clients > dataset.len() {
        return Err(Error::Partition(format!(
            "{} clients cannot all receive samples from {} rows",
            spec.num_clients,
            dataset.len()
        )));
    }
    for attempt in 0..MAX_PARTITION_ATTEMPTS {
        let seed = spec.seed.wrapping_add(attempt);
        let assignment = dirichlet_assignment(dataset, spec.num_clients, spec.beta, seed);
        if assignment.iter().all(|a| !a.is_empty()) {
            return build_shards(dataset, assignment);
        }
    }
    Err(Error::Partition(format!(
        "no partition without empty clients after {MAX_PARTITION_ATTEMPTS} attempts"
    )))
}

/// Per-client affine map `x -> center + R (x - center) + shift`, where `R`
/// rotates the plane spanned by two coordinate axes.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineTransform {
    pub center: Vec<f64>,
    pub axes: (usize, usize),
    pub angle: f64,
    pub shift: Vec<f64>,
}

impl AffineTransform {
    pub fn identity(dim: usize) -> Self {
        AffineTransform {
            center: vec![0.0; dim],
            axes: (0, 0),
            angle: 0.0,
            shift: vec![0.0; dim],
        }
    }

    pub fn apply_row(&self, row: &mut [f64]) {
        let (i, j) = self.axes;
        if i != j && self.angle != 0.0 {
            let (s, c) = self.angle.sin_cos();
            let a = row[i] - self.center[i];
            let b = row[j] - self.center[j];
            row[i] = self.center[i] + c * a - s * b;
            row[j] = self.center[j] + s * a + c * b;
        }
        for (v, d) in row.iter_mut().zip(&self.shift) {
            *v += d;
        }
    }

    pub fn apply(&self, features: &Matrix) -> Matrix {
        let mut out = features.clone();
        for r in 0..out.rows() {
            self.apply_row(out.row_mut(r));
        }
        out
    }
}

/// Strength of the synthetic feature-skew transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureSkewSpec {
    /// Length of each client's shift vector.
    pub shift: f64,
    /// Rotation angles are drawn uniformly from `[-max_angle, max_angle]`.
    pub max_angle: f64,
}

impl Default for FeatureSkewSpec {
    fn default() -> Self {
        FeatureSkewSpec {
            shift: 1.0,
            max_angle: std::f64::consts::PI,
        }
    }
}

/// Client `k` shifts along axis `k mod d`, with sign flipped for the second
/// pass over the axes, so shifts are pairwise orthogonal or opposite and any
/// two differ by at least `shift * sqrt(2)` while `K <= 2d`.
pub fn feature_skew_transforms(
    dataset: &Dataset,
    num_clients: usize,
    seed: u64,
    skew: FeatureSkewSpec,
) -> Result<Vec<AffineTransform>> {
    let d = dataset.dim();
    if num_clients > 2 * d && skew.shift != 0.0 {
        return Err(Error::invalid(format!(
            "{num_clients} clients need distinct shift axes but features have width {d}"
        )));
    }
    let n = dataset.len() as f64;
    let mut center = vec![0.0; d];
    for row in dataset.features().iter_rows() {
        for (c, v) in center.iter_mut().zip(row) {
            *c += v / n;
        }
    }
    Ok((0..num_clients)
        .map(|k| {
            let mut rng = CounterRng::from_path(seed, &[2, k as u64]);
            let i = rng.below(d as u64) as usize;
            let j = if d > 1 {
                (i + 1 + rng.below(d as u64 - 1) as usize) % d
            } else {
                i
            };
            let angle = rng.uniform(-skew.max_angle, skew.max_angle);
            let mut shift = vec![0.0; d];
            if skew.shift != 0.0 {
                let sign = if k < d { 1.0 } else { -1.0 };
                shift[k % d] = sign * skew.shift;
            }
            AffineTransform {
                center: center.clone(),
                axes: (i, j),
                angle,
                shift,
            }
        })
        .collect())
}

/// IID split where every class is dealt round-robin, starting the deal at a
/// different client for each class so shard sizes stay within one sample.
pub fn iid_assignment(dataset: &Dataset, num_clients: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut assignment = vec![Vec::new(); num_clients];
    let mut next = 0usize;
    for (c, mut rows) in indices_by_class(dataset).into_iter().enumerate() {
        let mut rng = CounterRng::from_path(seed, &[3, c as u64]);
        rng.shuffle(&mut rows);
        for row in rows {
            assignment[next % num_clients].push(row);
            next += 1;
        }
    }
    assignment
}

/// Feature-skew partition with the default transform strength.
pub fn feature_skew_partition(dataset: &Dataset, num_clients: usize, seed: u64) -> Result<Vec<ClientShard>> {
    feature_skew_partition_with(dataset, num_clients, seed, FeatureSkewSpec::default())
}

pub fn feature_skew_partition_with(
    dataset: &Dataset,
    num_clients: usize,
    seed: u64,
    skew: FeatureSkewSpec,
) -> Result<Vec<ClientShard>> {
    if num_clients < 2 {
        return Err(Error::invalid("feature skew needs at least two clients"));
    }
    if num_clients > dataset.len() {
        return Err(Error::Partition(format!(
            "{num_clients} clients cannot all receive samples from {} rows",
            dataset.len()
        )));
    }
    let transforms = feature_skew_transforms(dataset, num_clients, seed, skew)?;
    let shards = build_shards(dataset, iid_assignment(dataset, num_clients, seed))?;
    shards
        .into_iter()
        .zip(&transforms)
        .map(|(mut shard, t)| {
            let features = t.apply(shard.dataset.features());
            shard.dataset = Dataset::new(features, shard.dataset.labels().to_vec(), dataset.num_classes())?;
            Ok(shard)
        })
        .collect()
}

/// Chi-square style heterogeneity: sum over clients and classes of
/// `(observed - expected)^2 / expected`, with expected counts from the
/// pooled label distribution and each shard's size.
pub fn label_heterogeneity(shards: &[ClientShard]) -> f64 {
    let Some(first) = shards.first() else {
        return 0.0;
    };
    let k = first.dataset.num_classes();
    let counts: Vec<Vec<usize>> = shards.iter().map(|s| s.dataset.class_counts()).collect();
    let total: usize = counts.iter().flatten().sum();
    let class_totals: Vec<usize> = (0..k).map(|c| counts.iter().map(|cc| cc[c]).sum()).collect();
    let mut stat = 0.0;
    for cc in &counts {
        let n_k: usize = cc.iter().sum();
        for c in 0..k {
            let expected = n_k as f64 * class_totals[c] as f64 / total as f64;
            if expected > 0.0 {
                stat += (cc[c] as f64 - expected).powi(2) / expected;
            }
        }
    }
    stat
}

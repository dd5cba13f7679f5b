//! Averaged-MFCC vectors, PCA reduction and k-nearest-neighbour voting.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, SymmetricEigen};
use thiserror::Error;

use crate::features::FeatureMatrix;
use crate::hmm::fmt_f64;

#[derive(Debug, Error, PartialEq)]
pub enum KnnError {
    #[error("empty training set")]
    EmptyTrainingSet,
    #[error("k must be at least 1")]
    ZeroK,
    #[error("k = {k} exceeds the {available} available vectors")]
    KTooLarge { k: usize, available: usize },
    #[error("dimension mismatch: expected {expected}, got {found}")]
    DimMismatch { expected: usize, found: usize },
    #[error("PCA needs at least 2 vectors, got {0}")]
    TooFewVectors(usize),
    #[error("training vector {0} has no label")]
    Unlabeled(usize),
    #[error("non-finite vector entry")]
    NonFinite,
    #[error("csv line {line}: {message}")]
    Csv { line: usize, message: String },
}

/// Time-averaged feature vector for one clip.
#[derive(Debug, Clone, PartialEq)]
pub struct AmfccVector {
    pub values: Vec<f64>,
    pub label: Option<String>,
}

impl AmfccVector {
    pub fn new(values: Vec<f64>, label: Option<String>) -> Result<Self, KnnError> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(KnnError::NonFinite);
        }
        Ok(AmfccVector { values, label })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

/// Column-wise mean of the feature rows.
pub fn amfcc(features: &FeatureMatrix) -> AmfccVector {
    let mut mean = vec![0.0; features.dim()];
    for row in features.rows() {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    let n = features.n_frames() as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    AmfccVector { values: mean, label: None }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PcaTransform {
    mean: Vec<f64>,
    components: Vec<Vec<f64>>,
    explained_variance: Vec<f64>,
}

impl PcaTransform {
    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn components(&self) -> &[Vec<f64>] {
        &self.components
    }

    pub fn explained_variance(&self) -> &[f64] {
        &self.explained_variance
    }

    pub fn k(&self) -> usize {
        self.components.len()
    }

    /// Projection that keeps the label.
    pub fn apply(&self, v: &AmfccVector) -> Result<AmfccVector, KnnError> {
        Ok(AmfccVector {
            values: pca_project(self, v)?,
            label: v.label.clone(),
        })
    }
}

fn check_dims(vectors: &[AmfccVector]) -> Result<usize, KnnError> {
    let dim = vectors.first().ok_or(KnnError::EmptyTrainingSet)?.dim();
    if let Some(v) = vectors.iter().find(|v| v.dim() != dim) {
        return Err(KnnError::DimMismatch {
            expected: dim,
            found: v.dim(),
        });
    }
    Ok(dim)
}

/// Top-`k` eigenvectors of the sample covariance (divisor `n - 1`).
///
/// Each component's sign is fixed so its largest-magnitude entry is positive.
pub fn pca_fit(vectors: &[AmfccVector], k: usize) -> Result<PcaTransform, KnnError> {
    if vectors.len() < 2 {
        return Err(KnnError::TooFewVectors(vectors.len()));
    }
    let dim = check_dims(vectors)?;
    if k == 0 {
        return Err(KnnError::ZeroK);
    }
    if k > dim {
        return Err(KnnError::KTooLarge { k, available: dim });
    }
    let n = vectors.len();
    let mean: Vec<f64> = (0..dim)
        .map(|d| vectors.iter().map(|v| v.values[d]).sum::<f64>() / n as f64)
        .collect();
    let centered = DMatrix::from_fn(n, dim, |i, d| vectors[i].values[d] - mean[d]);
    let cov = (centered.transpose() * &centered) / (n - 1) as f64;
    // exact symmetry keeps the eigensolver on its symmetric path
    let cov = (&cov + cov.transpose()) * 0.5;
    let eig = SymmetricEigen::new(cov);

    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let mut components = Vec::with_capacity(k);
    let mut explained_variance = Vec::with_capacity(k);
    for &idx in order.iter().take(k) {
        let mut c: Vec<f64> = eig.eigenvectors.column(idx).iter().cloned().collect();
        let pivot = c
            .iter()
            .enumerate()
            .fold((0, 0.0f64), |best, (i, v)| if v.abs() > best.1 { (i, v.abs()) } else { best })
            .0;
        if c[pivot] < 0.0 {
            c.iter_mut().for_each(|v| *v = -*v);
        }
        components.push(c);
        explained_variance.push(eig.eigenvalues[idx].max(0.0));
    }
    Ok(PcaTransform {
        mean,
        components,
        explained_variance,
    })
}

/// `components · (v - mean)`.
pub fn pca_project(t: &PcaTransform, v: &AmfccVector) -> Result<Vec<f64>, KnnError> {
    if v.dim() != t.mean.len() {
        return Err(KnnError::DimMismatch {
            expected: t.mean.len(),
            found: v.dim(),
        });
    }
    Ok(t.components
        .iter()
        .map(|c| c.iter().zip(&v.values).zip(&t.mean).map(|((c, x), m)| c * (x - m)).sum())
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct KnnDecision {
    pub label: String,
    /// Votes per label among the k neighbours, sorted by label.
    pub votes: Vec<(String, usize)>,
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Majority vote among the `k` nearest training vectors.
///
/// Equal distances are ordered by training index. A vote tie goes to the
/// label with the smallest summed neighbour distance, then to the
/// lexicographically smallest label.
pub fn knn_classify(
    train: &[AmfccVector],
    query: &AmfccVector,
    k: usize,
) -> Result<KnnDecision, KnnError> {
    let dim = check_dims(train)?;
    if k == 0 {
        return Err(KnnError::ZeroK);
    }
    if k > train.len() {
        return Err(KnnError::KTooLarge {
            k,
            available: train.len(),
        });
    }
    if query.dim() != dim {
        return Err(KnnError::DimMismatch {
            expected: dim,
            found: query.dim(),
        });
    }
    if let Some(i) = train.iter().position(|v| v.label.is_none()) {
        return Err(KnnError::Unlabeled(i));
    }
    let mut ranked: Vec<(f64, usize)> = train
        .iter()
        .enumerate()
        .map(|(i, v)| (euclidean(&v.values, &query.values), i))
        .collect();
    ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));

    let mut tally: BTreeMap<&str, (usize, f64)> = BTreeMap::new();
    for &(dist, i) in &ranked[..k] {
        let entry = tally.entry(train[i].label.as_deref().unwrap()).or_insert((0, 0.0));
        entry.0 += 1;
        entry.1 += dist;
    }
    // BTreeMap iterates labels in order, so strict comparisons keep the
    // lexicographically first label on a full tie
    let mut best: Option<(&str, usize, f64)> = None;
    for (&label, &(count, dist)) in &tally {
        let better = match best {
            None => true,
            Some((_, c, d)) => count > c || (count == c && dist < d),
        };
        if better {
            best = Some((label, count, dist));
        }
    }
    Ok(KnnDecision {
        label: best.unwrap().0.to_string(),
        votes: tally.iter().map(|(l, (c, _))| (l.to_string(), *c)).collect(),
    })
}

/// One line per vector: label, then the values.
pub fn write_csv(vectors: &[AmfccVector]) -> Result<String, KnnError> {
    let mut out = String::new();
    for (i, v) in vectors.iter().enumerate() {
        let label = v.label.as_deref().ok_or(KnnError::Unlabeled(i))?;
        if label.contains([',', '\n', '\r']) {
            return Err(KnnError::Csv {
                line: i + 1,
                message: format!("label '{label}' contains a separator"),
            });
        }
        out.push_str(label);
        for x in &v.values {
            out.push(',');
            out.push_str(&fmt_f64(*x));
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn read_csv(text: &str) -> Result<Vec<AmfccVector>, KnnError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| KnnError::Csv { line: i + 1, message };
        let mut fields = line.split(',');
        let label = fields.next().unwrap().to_string();
        if label.is_empty() {
            return Err(err("empty label".into()));
        }
        let values = fields
            .map(|f| f.trim().parse::<f64>().map_err(|_| err(format!("bad number '{f}'"))))
            .collect::<Result<Vec<_>, _>>()?;
        out.push(AmfccVector::new(values, Some(label)).map_err(|e| err(e.to_string()))?);
    }
    check_dims(&out)?;
    Ok(out)
}

//! The two experts: a multinomial logistic model over seen classes and a
//! bilinear-compatibility zero-shot model that scores any class with a
//! description vector.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::{minimize, LbfgsOptions, Objective};
use crate::score::{softmax, ClassId, ProbabilityVector, ScoreKind, ScoreTable, Temperature, Vocabulary};

/// Row-major `n × d` sample features with optional per-sample labels.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    sample_ids: Vec<String>,
    dim: usize,
    data: Vec<f64>,
    labels: Vec<Option<ClassId>>,
}

impl FeatureMatrix {
    pub fn new(
        sample_ids: Vec<String>,
        dim: usize,
        data: Vec<f64>,
        labels: Vec<Option<ClassId>>,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("feature dimension must be ≥ 1"));
        }
        if data.len() != sample_ids.len() * dim {
            return Err(Error::DimensionMismatch {
                expected: sample_ids.len() * dim,
                got: data.len(),
            });
        }
        if labels.len() != sample_ids.len() {
            return Err(Error::DimensionMismatch {
                expected: sample_ids.len(),
                got: labels.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite);
        }
        Ok(FeatureMatrix {
            sample_ids,
            dim,
            data,
            labels,
        })
    }

    pub fn n_samples(&self) -> usize {
        self.sample_ids.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn sample_ids(&self) -> &[String] {
        &self.sample_ids
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn label(&self, i: usize) -> Option<ClassId> {
        self.labels[i]
    }

    pub fn labels(&self) -> &[Option<ClassId>] {
        &self.labels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Sub-matrix with the given rows, in the given order.
    pub fn select(&self, rows: &[usize]) -> FeatureMatrix {
        let mut data = Vec::with_capacity(rows.len() * self.dim);
        for &i in rows {
            data.extend_from_slice(self.row(i));
        }
        FeatureMatrix {
            sample_ids: rows.iter().map(|&i| self.sample_ids[i].clone()).collect(),
            dim: self.dim,
            data,
            labels: rows.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Labels mapped to column indices of `vocabulary`. Every row must carry a known label.
    fn label_indices(&self, vocabulary: &Vocabulary) -> Result<Vec<usize>> {
        let index: HashMap<ClassId, usize> = vocabulary.iter().enumerate().map(|(i, c)| (c, i)).collect();
        self.labels
            .iter()
            .enumerate()
            .map(|(row, l)| {
                let l = l.ok_or_else(|| Error::invalid(format!("training sample {row} has no label")))?;
                index.get(&l).copied().ok_or(Error::UnknownClass(l))
            })
            .collect()
    }
}

/// Per-dimension standardization fitted on training features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    pub fn fit(features: &FeatureMatrix) -> Result<Self> {
        let n = features.n_samples();
        if n == 0 {
            return Err(Error::EmptyVector);
        }
        let d = features.dim();
        let mut mean = vec![0.0; d];
        for i in 0..n {
            for (m, v) in mean.iter_mut().zip(features.row(i)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; d];
        for i in 0..n {
            for ((s, v), m) in var.iter_mut().zip(features.row(i)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let scale = var
            .into_iter()
            .map(|s| {
                let sd = (s / n as f64).sqrt();
                if sd > 0.0 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Standardizer { mean, scale })
    }

    pub fn apply(&self, features: &FeatureMatrix) -> Result<FeatureMatrix> {
        if features.dim() != self.mean.len() {
            return Err(Error::DimensionMismatch {
                expected: self.mean.len(),
                got: features.dim(),
            });
        }
        let d = features.dim();
        let data = features
            .data()
            .iter()
            .enumerate()
            .map(|(k, v)| (v - self.mean[k % d]) / self.scale[k % d])
            .collect();
        FeatureMatrix::new(features.sample_ids.clone(), d, data, features.labels.clone())
    }
}

/// One description vector per class.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassDescriptionMatrix {
    dim: usize,
    rows: BTreeMap<ClassId, Vec<f64>>,
}

impl ClassDescriptionMatrix {
    pub fn new(dim: usize, rows: BTreeMap<ClassId, Vec<f64>>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("description dimension must be ≥ 1"));
        }
        for row in rows.values() {
            if row.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: row.len(),
                });
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite);
            }
        }
        Ok(ClassDescriptionMatrix { dim, rows })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, class: ClassId) -> Result<&[f64]> {
        self.rows
            .get(&class)
            .map(Vec::as_slice)
            .ok_or(Error::MissingDescription(class))
    }

    pub fn classes(&self) -> impl Iterator<Item = ClassId> + '_ {
        self.rows.keys().copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ClassId, &[f64])> {
        self.rows.iter().map(|(&c, v)| (c, v.as_slice()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExpertTrainingConfig {
    /// Inverse regularization strength; the L2 penalty weight is `1/C`.
    pub c: f64,
    pub max_iterations: usize,
    pub tolerance: f64,
    pub seed: u64,
}

impl Default for ExpertTrainingConfig {
    fn default() -> Self {
        ExpertTrainingConfig {
            c: 1.0,
            max_iterations: 1000,
            tolerance: 1e-8,
            seed: 0,
        }
    }
}

impl ExpertTrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.c > 0.0 && self.c.is_finite()) {
            return Err(Error::invalid("C must be > 0"));
        }
        if self.max_iterations == 0 {
            return Err(Error::invalid("max_iterations must be ≥ 1"));
        }
        if !(self.tolerance > 0.0) {
            return Err(Error::invalid("tolerance must be > 0"));
        }
        Ok(())
    }

    pub(crate) fn solver_options(&self) -> LbfgsOptions {
        LbfgsOptions {
            max_iterations: self.max_iterations,
            gradient_tolerance: self.tolerance,
            ..LbfgsOptions::default()
        }
    }
}

fn log_sum_exp(z: &[f64]) -> f64 {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn check_classes(features: &FeatureMatrix, vocabulary: &Vocabulary) -> Result<Vec<usize>> {
    if vocabulary.len() < 2 {
        return Err(Error::NeedTwoClasses);
    }
    let labels = features.label_indices(vocabulary)?;
    let mut counts = vec![0usize; vocabulary.len()];
    for &l in &labels {
        counts[l] += 1;
    }
    if counts.iter().filter(|&&c| c > 0).count() < 2 {
        return Err(Error::NeedTwoClasses);
    }
    if let Some(empty) = counts.iter().position(|&c| c == 0) {
        return Err(Error::InsufficientSamples(format!(
            "class {} has no training samples",
            vocabulary.as_slice()[empty]
        )));
    }
    Ok(labels)
}

/// L2-regularized multinomial cross-entropy; parameters are `W` (k×d, row-major) then `b` (k).
/// The bias is not penalized.
struct SoftmaxObjective<'a> {
    features: &'a FeatureMatrix,
    labels: &'a [usize],
    n_classes: usize,
    inv_c: f64,
}

impl Objective for SoftmaxObjective<'_> {
    fn dim(&self) -> usize {
        self.n_classes * (self.features.dim() + 1)
    }

    fn evaluate(&self, params: &[f64], grad: &mut [f64]) -> f64 {
        let (k, d) = (self.n_classes, self.features.dim());
        let (w, b) = params.split_at(k * d);
        grad.iter_mut().for_each(|g| *g = 0.0);
        let mut loss = 0.0;
        let mut z = vec![0.0; k];
        for (i, &y) in self.labels.iter().enumerate() {
            let x = self.features.row(i);
            for c in 0..k {
                z[c] = b[c] + w[c * d..(c + 1) * d].iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
            }
            let lse = log_sum_exp(&z);
            loss += lse - z[y];
            let (gw, gb) = grad.split_at_mut(k * d);
            for c in 0..k {
                let r = (z[c] - lse).exp() - if c == y { 1.0 } else { 0.0 };
                gb[c] += r;
                for (g, xv) in gw[c * d..(c + 1) * d].iter_mut().zip(x) {
                    *g += r * xv;
                }
            }
        }
        let mut penalty = 0.0;
        for (g, wv) in grad[..k * d].iter_mut().zip(w) {
            penalty += wv * wv;
            *g += self.inv_c * wv;
        }
        loss + 0.5 * self.inv_c * penalty
    }
}

/// Multinomial logistic model `softmax(Wx + b)` over the seen classes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeenExpert {
    pub vocabulary: Vocabulary,
    pub dim: usize,
    /// Row-major `|S| × d`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub c: f64,
}

impl SeenExpert {
    /// Model with all-zero parameters, which predicts the uniform distribution.
    pub fn zeros(vocabulary: Vocabulary, dim: usize) -> Self {
        let k = vocabulary.len();
        SeenExpert {
            vocabulary,
            dim,
            weights: vec![0.0; k * dim],
            bias: vec![0.0; k],
            c: 1.0,
        }
    }

    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: x.len(),
            });
        }
        Ok(self
            .weights
            .chunks(self.dim)
            .zip(&self.bias)
            .map(|(w, b)| b + w.iter().zip(x).map(|(a, v)| a * v).sum::<f64>())
            .collect())
    }

    /// Probabilities for every row of `features`.
    pub fn predict_table(&self, features: &FeatureMatrix, temperature: Temperature) -> Result<ScoreTable> {
        let rows = (0..features.n_samples())
            .map(|i| predict_seen(self, features.row(i), temperature))
            .collect::<Result<Vec<_>>>()?;
        ScoreTable::from_probabilities(features.sample_ids().to_vec(), self.vocabulary.clone(), rows)
    }

    /// Training objective (sum of cross-entropies plus `‖W‖²/(2C)`) at the current parameters.
    pub fn regularized_loss(&self, train: &FeatureMatrix) -> Result<f64> {
        let labels = train.label_indices(&self.vocabulary)?;
        let objective = SoftmaxObjective {
            features: train,
            labels: &labels,
            n_classes: self.vocabulary.len(),
            inv_c: 1.0 / self.c,
        };
        let mut params = self.weights.clone();
        params.extend_from_slice(&self.bias);
        let mut grad = vec![0.0; params.len()];
        Ok(objective.evaluate(&params, &mut grad))
    }

    pub fn accuracy(&self, features: &FeatureMatrix) -> Result<f64> {
        let mut correct = 0usize;
        for i in 0..features.n_samples() {
            let p = predict_seen(self, features.row(i), Temperature::ONE)?;
            if Some(self.vocabulary.as_slice()[p.argmax()]) == features.label(i) {
                correct += 1;
            }
        }
        Ok(correct as f64 / features.n_samples().max(1) as f64)
    }
}

pub fn train_seen_expert(
    train: &FeatureMatrix,
    classes: &Vocabulary,
    cfg: &ExpertTrainingConfig,
) -> Result<SeenExpert> {
    cfg.validate()?;
    let labels = check_classes(train, classes)?;
    let objective = SoftmaxObjective {
        features: train,
        labels: &labels,
        n_classes: classes.len(),
        inv_c: 1.0 / cfg.c,
    };
    let min = minimize(&objective, vec![0.0; objective.dim()], cfg.solver_options());
    let (w, b) = min.x.split_at(classes.len() * train.dim());
    Ok(SeenExpert {
        vocabulary: classes.clone(),
        dim: train.dim(),
        weights: w.to_vec(),
        bias: b.to_vec(),
        c: cfg.c,
    })
}

pub fn predict_seen(expert: &SeenExpert, x: &[f64], temperature: Temperature) -> Result<ProbabilityVector> {
    softmax(&expert.logits(x)?, temperature)
}

/// Cross-entropy of `softmax_y(xᵀ W a_y)` plus `‖W‖²/(2C)`; parameters are `W` (d×m, row-major).
struct CompatibilityObjective<'a> {
    features: &'a FeatureMatrix,
    labels: &'a [usize],
    /// Row-major k×m.
    descriptions: Vec<f64>,
    n_classes: usize,
    desc_dim: usize,
    inv_c: f64,
}

impl Objective for CompatibilityObjective<'_> {
    fn dim(&self) -> usize {
        self.features.dim() * self.desc_dim
    }

    fn evaluate(&self, params: &[f64], grad: &mut [f64]) -> f64 {
        let (d, m, k) = (self.features.dim(), self.desc_dim, self.n_classes);
        grad.iter_mut().for_each(|g| *g = 0.0);
        let mut loss = 0.0;
        let mut u = vec![0.0; m];
        let mut s = vec![0.0; k];
        let mut r = vec![0.0; m];
        for (i, &y) in self.labels.iter().enumerate() {
            let x = self.features.row(i);
            u.iter_mut().for_each(|v| *v = 0.0);
            for (xi, w_row) in x.iter().zip(params.chunks(m)) {
                for (uj, wij) in u.iter_mut().zip(w_row) {
                    *uj += xi * wij;
                }
            }
            for c in 0..k {
                s[c] = self.descriptions[c * m..(c + 1) * m].iter().zip(&u).map(|(a, b)| a * b).sum();
            }
            let lse = log_sum_exp(&s);
            loss += lse - s[y];
            r.iter_mut().for_each(|v| *v = 0.0);
            for c in 0..k {
                let coef = (s[c] - lse).exp() - if c == y { 1.0 } else { 0.0 };
                for (rj, a) in r.iter_mut().zip(&self.descriptions[c * m..(c + 1) * m]) {
                    *rj += coef * a;
                }
            }
            for (xi, g_row) in x.iter().zip(grad.chunks_mut(m)) {
                for (g, rj) in g_row.iter_mut().zip(&r) {
                    *g += xi * rj;
                }
            }
        }
        let mut penalty = 0.0;
        for (g, w) in grad.iter_mut().zip(params) {
            penalty += w * w;
            *g += self.inv_c * w;
        }
        debug_assert_eq!(params.len(), d * m);
        loss + 0.5 * self.inv_c * penalty
    }
}

/// Bilinear compatibility model `F(x, a_y) = xᵀ W a_y`, usable on any class with a description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZsExpert {
    pub feature_dim: usize,
    pub description_dim: usize,
    /// Row-major `d × m`.
    pub weights: Vec<f64>,
    pub c: f64,
}

impl ZsExpert {
    pub fn zeros(feature_dim: usize, description_dim: usize) -> Self {
        ZsExpert {
            feature_dim,
            description_dim,
            weights: vec![0.0; feature_dim * description_dim],
            c: 1.0,
        }
    }

    /// Precompute `W a_y` for each class so that prediction is a dot product per class.
    pub fn bind(&self, classes: &Vocabulary, descriptions: &ClassDescriptionMatrix) -> Result<BoundZsExpert> {
        if classes.is_empty() {
            return Err(Error::EmptyVector);
        }
        if descriptions.dim() != self.description_dim {
            return Err(Error::DimensionMismatch {
                expected: self.description_dim,
                got: descriptions.dim(),
            });
        }
        let (d, m) = (self.feature_dim, self.description_dim);
        let mut prototypes = Vec::with_capacity(classes.len() * d);
        for class in classes.iter() {
            let a = descriptions.get(class)?;
            for i in 0..d {
                prototypes.push(self.weights[i * m..(i + 1) * m].iter().zip(a).map(|(w, v)| w * v).sum());
            }
        }
        Ok(BoundZsExpert {
            vocabulary: classes.clone(),
            feature_dim: d,
            prototypes,
        })
    }
}

/// A [`ZsExpert`] restricted to a concrete class set.
#[derive(Clone, Debug)]
pub struct BoundZsExpert {
    vocabulary: Vocabulary,
    feature_dim: usize,
    prototypes: Vec<f64>,
}

impl BoundZsExpert {
    pub fn vocabulary(&self) -> &Vocabulary {
        &self.vocabulary
    }

    pub fn scores(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.feature_dim {
            return Err(Error::DimensionMismatch {
                expected: self.feature_dim,
                got: x.len(),
            });
        }
        Ok(self
            .prototypes
            .chunks(self.feature_dim)
            .map(|p| p.iter().zip(x).map(|(a, b)| a * b).sum())
            .collect())
    }

    pub fn predict(&self, x: &[f64]) -> Result<ProbabilityVector> {
        softmax(&self.scores(x)?, Temperature::ONE)
    }

    pub fn predict_table(&self, features: &FeatureMatrix) -> Result<ScoreTable> {
        let rows = (0..features.n_samples())
            .map(|i| self.predict(features.row(i)))
            .collect::<Result<Vec<_>>>()?;
        ScoreTable::from_probabilities(features.sample_ids().to_vec(), self.vocabulary.clone(), rows)
    }
}

pub fn train_zs_expert(
    train: &FeatureMatrix,
    classes: &Vocabulary,
    descriptions: &ClassDescriptionMatrix,
    cfg: &ExpertTrainingConfig,
) -> Result<ZsExpert> {
    cfg.validate()?;
    let mut stacked = Vec::with_capacity(classes.len() * descriptions.dim());
    for class in classes.iter() {
        stacked.extend_from_slice(descriptions.get(class)?);
    }
    let labels = check_classes(train, classes)?;
    let objective = CompatibilityObjective {
        features: train,
        labels: &labels,
        descriptions: stacked,
        n_classes: classes.len(),
        desc_dim: descriptions.dim(),
        inv_c: 1.0 / cfg.c,
    };
    let min = minimize(&objective, vec![0.0; objective.dim()], cfg.solver_options());
    Ok(ZsExpert {
        feature_dim: train.dim(),
        description_dim: descriptions.dim(),
        weights: min.x,
        c: cfg.c,
    })
}

pub fn predict_zs(
    expert: &ZsExpert,
    x: &[f64],
    classes: &Vocabulary,
    descriptions: &ClassDescriptionMatrix,
) -> Result<ProbabilityVector> {
    expert.bind(classes, descriptions)?.predict(x)
}

/// Probability table from either kind of score table (logits go through a unit softmax).
pub fn as_probabilities(table: &ScoreTable) -> Result<ScoreTable> {
    match table.kind() {
        ScoreKind::Probability => Ok(table.clone()),
        ScoreKind::RawLogit => ScoreTable::from_probabilities(
            table.sample_ids().to_vec(),
            table.vocabulary().clone(),
            table.probability_rows()?,
        ),
    }
}

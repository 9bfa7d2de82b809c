//! Probability-vector primitives shared by the experts, the gate and the combiner.
//!
//! Everything here is a pure function over 64-bit floats. Argmax ties always
//! resolve to the lowest index.

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on `|Σp - 1|` accepted when a [`ProbabilityVector`] is built.
pub const NORMALIZATION_TOLERANCE: f64 = 1e-9;

/// Class identifier, unique across seen and unseen classes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClassId(pub u32);

impl fmt::Display for ClassId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

impl From<u32> for ClassId {
    fn from(v: u32) -> Self {
        ClassId(v)
    }
}

/// Ordered list of distinct class ids.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<ClassId>", into = "Vec<ClassId>")]
pub struct Vocabulary(Vec<ClassId>);

impl Vocabulary {
    pub fn new(classes: Vec<ClassId>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(classes.len());
        for &c in &classes {
            if !seen.insert(c) {
                return Err(Error::DuplicateClass(c));
            }
        }
        Ok(Vocabulary(classes))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[ClassId] {
        &self.0
    }

    pub fn iter(&self) -> impl Iterator<Item = ClassId> + '_ {
        self.0.iter().copied()
    }

    pub fn index_of(&self, class: ClassId) -> Option<usize> {
        self.0.iter().position(|&c| c == class)
    }

    pub fn contains(&self, class: ClassId) -> bool {
        self.0.contains(&class)
    }

    /// Classes present in exactly one of the two vocabularies, sorted.
    pub fn symmetric_difference(&self, other: &Vocabulary) -> Vec<ClassId> {
        let a: HashSet<_> = self.0.iter().copied().collect();
        let b: HashSet<_> = other.0.iter().copied().collect();
        let mut diff: Vec<_> = a.symmetric_difference(&b).copied().collect();
        diff.sort();
        diff
    }

    pub fn is_disjoint(&self, other: &Vocabulary) -> bool {
        let a: HashSet<_> = self.0.iter().copied().collect();
        other.0.iter().all(|c| !a.contains(c))
    }

    /// Concatenation of two disjoint vocabularies.
    pub fn disjoint_union(&self, other: &Vocabulary) -> Result<Vocabulary> {
        if !self.is_disjoint(other) {
            return Err(Error::OverlappingVocabularies);
        }
        let mut all = self.0.clone();
        all.extend_from_slice(&other.0);
        Ok(Vocabulary(all))
    }
}

impl TryFrom<Vec<ClassId>> for Vocabulary {
    type Error = Error;

    fn try_from(v: Vec<ClassId>) -> Result<Self> {
        Vocabulary::new(v)
    }
}

impl From<Vocabulary> for Vec<ClassId> {
    fn from(v: Vocabulary) -> Self {
        v.0
    }
}

/// Non-negative values summing to one, aligned with some vocabulary held by the caller.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbabilityVector(Vec<f64>);

impl ProbabilityVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::EmptyVector);
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite);
        }
        if values.iter().any(|&v| v < 0.0) {
            return Err(Error::InvalidProbability("negative entry".into()));
        }
        let sum = sorted_sum(&values);
        if (sum - 1.0).abs() > NORMALIZATION_TOLERANCE {
            return Err(Error::InvalidProbability(format!("entries sum to {sum}")));
        }
        Ok(ProbabilityVector(values))
    }

    pub fn uniform(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::EmptyVector);
        }
        Ok(ProbabilityVector(vec![1.0 / n as f64; n]))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }

    pub fn max(&self) -> f64 {
        self.0.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Softmax / power-renormalization temperature, strictly positive.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct Temperature(f64);

impl Temperature {
    pub const ONE: Temperature = Temperature(1.0);

    pub fn new(t: f64) -> Result<Self> {
        if t.is_finite() && t > 0.0 {
            Ok(Temperature(t))
        } else {
            Err(Error::invalid(format!("temperature must be > 0, got {t}")))
        }
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

impl TryFrom<f64> for Temperature {
    type Error = Error;

    fn try_from(t: f64) -> Result<Self> {
        Temperature::new(t)
    }
}

impl From<Temperature> for f64 {
    fn from(t: Temperature) -> f64 {
        t.0
    }
}

/// Number of pooled scores, at least one.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "usize", into = "usize")]
pub struct TopK(usize);

impl TopK {
    pub fn new(k: usize) -> Result<Self> {
        if k >= 1 {
            Ok(TopK(k))
        } else {
            Err(Error::invalid("K must be ≥ 1"))
        }
    }

    pub fn get(self) -> usize {
        self.0
    }
}

impl TryFrom<usize> for TopK {
    type Error = Error;

    fn try_from(k: usize) -> Result<Self> {
        TopK::new(k)
    }
}

impl From<TopK> for usize {
    fn from(k: TopK) -> usize {
        k.0
    }
}

/// Index of the largest value, lowest index on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Sum taken in descending order, so the result does not depend on the
/// order in which the values are listed.
pub(crate) fn sorted_sum(values: &[f64]) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    sorted.iter().sum()
}

/// Temperature-scaled softmax with max-subtraction.
pub fn softmax(logits: &[f64], temperature: Temperature) -> Result<ProbabilityVector> {
    if logits.is_empty() {
        return Err(Error::EmptyVector);
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite);
    }
    let t = temperature.get();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| ((z - max) / t).exp()).collect();
    let sum = sorted_sum(&exps);
    Ok(ProbabilityVector(exps.into_iter().map(|e| e / sum).collect()))
}

/// Temperature scaling for inputs that are already probabilities:
/// `p_i^(1/T) / Σ_j p_j^(1/T)`. Zeros stay zero.
pub fn reheat_probabilities(p: &ProbabilityVector, temperature: Temperature) -> Result<ProbabilityVector> {
    let max = p.max();
    if max <= 0.0 {
        return Err(Error::Degenerate);
    }
    if temperature.get() == 1.0 {
        return Ok(p.clone());
    }
    let inv_t = 1.0 / temperature.get();
    // Scale by the max first so the largest entry maps to exactly 1.
    let powered: Vec<f64> = p
        .values()
        .iter()
        .map(|&v| if v == 0.0 { 0.0 } else { (v / max).powf(inv_t) })
        .collect();
    let sum = sorted_sum(&powered);
    Ok(ProbabilityVector(powered.into_iter().map(|v| v / sum).collect()))
}

/// The `K` largest entries in descending order, zero-padded when `K` exceeds the length.
pub fn top_k_pool(p: &ProbabilityVector, k: TopK) -> Vec<f64> {
    let mut sorted = p.values().to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    sorted.resize(k.get(), 0.0);
    sorted
}

/// Divide non-negative scores by their sum.
pub fn normalize(scores: &[f64]) -> Result<ProbabilityVector> {
    if scores.is_empty() {
        return Err(Error::EmptyVector);
    }
    if scores.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite);
    }
    if scores.iter().any(|&v| v < 0.0) {
        return Err(Error::NegativeScore);
    }
    let sum = sorted_sum(scores);
    if sum <= 0.0 {
        return Err(Error::Degenerate);
    }
    Ok(ProbabilityVector(scores.iter().map(|&v| v / sum).collect()))
}

/// Whether a table holds unnormalized logits or per-row probabilities.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScoreKind {
    #[serde(rename = "raw-logit")]
    RawLogit,
    #[serde(rename = "probability")]
    Probability,
}

/// Per-sample scores over a class vocabulary, stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreTable {
    sample_ids: Vec<String>,
    vocabulary: Vocabulary,
    data: Vec<f64>,
    kind: ScoreKind,
}

impl ScoreTable {
    pub fn new(
        sample_ids: Vec<String>,
        vocabulary: Vocabulary,
        data: Vec<f64>,
        kind: ScoreKind,
    ) -> Result<Self> {
        let width = vocabulary.len();
        if width == 0 {
            return Err(Error::EmptyVector);
        }
        if data.len() != sample_ids.len() * width {
            return Err(Error::DimensionMismatch {
                expected: sample_ids.len() * width,
                got: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite);
        }
        if kind == ScoreKind::Probability {
            for (row, chunk) in data.chunks(width).enumerate() {
                if chunk.iter().any(|&v| v < 0.0) {
                    return Err(Error::NegativeScore);
                }
                let sum = sorted_sum(chunk);
                if (sum - 1.0).abs() > NORMALIZATION_TOLERANCE {
                    return Err(Error::UnnormalizedRow { row, sum });
                }
            }
        }
        Ok(ScoreTable {
            sample_ids,
            vocabulary,
            data,
            kind,
        })
    }

    /// Table built from already-validated probability rows.
    pub fn from_probabilities(
        sample_ids: Vec<String>,
        vocabulary: Vocabulary,
        rows: Vec<ProbabilityVector>,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(rows.len() * vocabulary.len());
        for row in &rows {
            if row.len() != vocabulary.len() {
                return Err(Error::DimensionMismatch {
                    expected: vocabulary.len(),
                    got: row.len(),
                });
            }
            data.extend_from_slice(row.values());
        }
        ScoreTable::new(sample_ids, vocabulary, data, ScoreKind::Probability)
    }

    pub fn sample_ids(&self) -> &[String] {
        &self.sample_ids
    }

    pub fn vocabulary(&self) -> &Vocabulary {
        &self.vocabulary
    }

    pub fn kind(&self) -> ScoreKind {
        self.kind
    }

    pub fn n_samples(&self) -> usize {
        self.sample_ids.len()
    }

    pub fn n_classes(&self) -> usize {
        self.vocabulary.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let w = self.n_classes();
        &self.data[i * w..(i + 1) * w]
    }

    /// Row `i` as probabilities; raw logits go through a unit-temperature softmax.
    pub fn probability_row(&self, i: usize) -> Result<ProbabilityVector> {
        match self.kind {
            ScoreKind::Probability => ProbabilityVector::new(self.row(i).to_vec()),
            ScoreKind::RawLogit => softmax(self.row(i), Temperature::ONE),
        }
    }

    pub fn probability_rows(&self) -> Result<Vec<ProbabilityVector>> {
        (0..self.n_samples()).map(|i| self.probability_row(i)).collect()
    }

    /// Reorder columns so that the vocabulary matches `target` (same class set).
    pub fn realign(&self, target: &Vocabulary) -> Result<ScoreTable> {
        let diff = self.vocabulary.symmetric_difference(target);
        if !diff.is_empty() || target.len() != self.vocabulary.len() {
            return Err(Error::VocabularyMismatch(diff));
        }
        let order: Vec<usize> = target
            .iter()
            .map(|c| self.vocabulary.index_of(c).expect("same class set"))
            .collect();
        self.permute_columns(&order)
    }

    /// New table whose column `j` is this table's column `order[j]`.
    pub fn permute_columns(&self, order: &[usize]) -> Result<ScoreTable> {
        let w = self.n_classes();
        let mut check: Vec<usize> = order.to_vec();
        check.sort_unstable();
        if check != (0..w).collect::<Vec<_>>() {
            return Err(Error::invalid("column order is not a permutation"));
        }
        let classes = order.iter().map(|&j| self.vocabulary.as_slice()[j]).collect();
        let mut data = Vec::with_capacity(self.data.len());
        for i in 0..self.n_samples() {
            let row = self.row(i);
            data.extend(order.iter().map(|&j| row[j]));
        }
        Ok(ScoreTable {
            sample_ids: self.sample_ids.clone(),
            vocabulary: Vocabulary::new(classes)?,
            data,
            kind: self.kind,
        })
    }

    pub fn select_rows(&self, rows: &[usize]) -> ScoreTable {
        let mut data = Vec::with_capacity(rows.len() * self.n_classes());
        for &i in rows {
            data.extend_from_slice(self.row(i));
        }
        ScoreTable {
            sample_ids: rows.iter().map(|&i| self.sample_ids[i].clone()).collect(),
            vocabulary: self.vocabulary.clone(),
            data,
            kind: self.kind,
        }
    }
}

//! Gaussian-cluster benchmark whose class centers are a linear image of the
//! class descriptions, so a bilinear zero-shot expert is well specified.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::rng::{stream, Stream};
use crate::error::{Error, Result};
use crate::experts::{ClassDescriptionMatrix, FeatureMatrix};
use crate::score::{ClassId, Vocabulary};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_classes_seen: usize,
    pub n_classes_unseen: usize,
    pub samples_per_class: usize,
    pub feature_dim: usize,
    pub description_dim: usize,
    /// Per-dimension std of the class-specific offset not explained by the description.
    pub center_noise: f64,
    /// Per-dimension std of samples around their class center.
    pub within_noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_classes_seen: 20,
            n_classes_unseen: 10,
            samples_per_class: 60,
            feature_dim: 16,
            description_dim: 16,
            center_noise: 0.5,
            within_noise: 1.0,
            seed: 7,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_classes_seen", self.n_classes_seen),
            ("n_classes_unseen", self.n_classes_unseen),
            ("samples_per_class", self.samples_per_class),
            ("feature_dim", self.feature_dim),
            ("description_dim", self.description_dim),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::invalid(format!("{name} must be ≥ 1")));
            }
        }
        for (name, v) in [("center_noise", self.center_noise), ("within_noise", self.within_noise)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} must be > 0")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticData {
    /// All samples, grouped by class, every one labeled.
    pub features: FeatureMatrix,
    pub descriptions: ClassDescriptionMatrix,
    /// Class ids `0..n_seen`.
    pub seen: Vocabulary,
    /// Class ids `n_seen..n_seen + n_unseen`.
    pub unseen: Vocabulary,
    /// Description → center map, `feature_dim × description_dim` row-major.
    pub projection: Vec<f64>,
}

impl SyntheticData {
    /// The noise-free center `P a` of a class.
    pub fn mapped_description(&self, class: ClassId) -> Result<Vec<f64>> {
        let a = self.descriptions.get(class)?;
        let m = a.len();
        Ok(self
            .projection
            .chunks(m)
            .map(|row| row.iter().zip(a).map(|(p, x)| p * x).sum())
            .collect())
    }

    /// Top-1 accuracy on unseen-class samples of the oracle that assigns each
    /// sample to the unseen class with the nearest mapped description.
    pub fn nearest_description_accuracy(&self) -> Result<f64> {
        let centers: Vec<(ClassId, Vec<f64>)> = self
            .unseen
            .iter()
            .map(|c| Ok((c, self.mapped_description(c)?)))
            .collect::<Result<_>>()?;
        let (mut correct, mut total) = (0usize, 0usize);
        for i in 0..self.features.n_samples() {
            let label = self.features.label(i).expect("synthetic samples are labeled");
            if !self.unseen.contains(label) {
                continue;
            }
            let x = self.features.row(i);
            let nearest = centers
                .iter()
                .map(|(c, m)| (*c, x.iter().zip(m).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()))
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .map(|(c, _)| c)
                .expect("at least one unseen class");
            correct += (nearest == label) as usize;
            total += 1;
        }
        Ok(correct as f64 / total as f64)
    }
}

fn gaussian(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Gram–Schmidt over `count` vectors of length `len` stored contiguously.
fn orthonormalize(v: &mut [f64], count: usize, len: usize) {
    for i in 0..count {
        let (done, rest) = v.split_at_mut(i * len);
        let cur = &mut rest[..len];
        for j in 0..i {
            let prev = &done[j * len..(j + 1) * len];
            let d: f64 = prev.iter().zip(cur.iter()).map(|(a, b)| a * b).sum();
            cur.iter_mut().zip(prev).for_each(|(c, p)| *c -= d * p);
        }
        let norm = cur.iter().map(|x| x * x).sum::<f64>().sqrt();
        cur.iter_mut().for_each(|c| *c /= norm);
    }
}

/// Random `d × m` map that preserves norms when `d ≥ m` (orthonormal
/// columns) and has orthonormal rows otherwise.
fn projection(rng: &mut impl Rng, d: usize, m: usize) -> Vec<f64> {
    if d >= m {
        // Build column-major, orthonormalize columns, then transpose.
        let mut cols = gaussian(rng, d * m);
        orthonormalize(&mut cols, m, d);
        (0..d).flat_map(|r| (0..m).map(move |c| (r, c))).map(|(r, c)| cols[c * d + r]).collect()
    } else {
        let mut rows = gaussian(rng, d * m);
        orthonormalize(&mut rows, d, m);
        rows
    }
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let (d, m) = (spec.feature_dim, spec.description_dim);
    let n_classes = spec.n_classes_seen + spec.n_classes_unseen;

    let mut class_rng = stream(spec.seed, Stream::SyntheticClasses);
    let p = projection(&mut class_rng, d, m);
    let mut descriptions = BTreeMap::new();
    let mut centers = Vec::with_capacity(n_classes);
    for k in 0..n_classes {
        // Equal-norm descriptions keep the inner-product expert unbiased across classes.
        let mut a = gaussian(&mut class_rng, m);
        let norm = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let scale = (m as f64).sqrt() / norm;
        a.iter_mut().for_each(|x| *x *= scale);
        let offset = gaussian(&mut class_rng, d);
        let center: Vec<f64> = p
            .chunks(m)
            .zip(&offset)
            .map(|(row, o)| row.iter().zip(&a).map(|(pi, ai)| pi * ai).sum::<f64>() + spec.center_noise * o)
            .collect();
        descriptions.insert(ClassId(k as u32), a);
        centers.push(center);
    }

    let mut sample_rng = stream(spec.seed, Stream::SyntheticSamples);
    let n = n_classes * spec.samples_per_class;
    let mut ids = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    let mut data = Vec::with_capacity(n * d);
    for (k, center) in centers.iter().enumerate() {
        for _ in 0..spec.samples_per_class {
            ids.push(format!("s{}", ids.len()));
            labels.push(Some(ClassId(k as u32)));
            let noise = gaussian(&mut sample_rng, d);
            data.extend(center.iter().zip(&noise).map(|(c, e)| c + spec.within_noise * e));
        }
    }

    let class_ids = |range: std::ops::Range<usize>| Vocabulary::new(range.map(|k| ClassId(k as u32)).collect());
    Ok(SyntheticData {
        features: FeatureMatrix::new(ids, d, data, labels)?,
        descriptions: ClassDescriptionMatrix::new(m, descriptions)?,
        seen: class_ids(0..spec.n_classes_seen)?,
        unseen: class_ids(spec.n_classes_seen..n_classes)?,
        projection: p,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticSpec {
        SyntheticSpec {
            n_classes_seen: 4,
            n_classes_unseen: 2,
            samples_per_class: 5,
            feature_dim: 6,
            description_dim: 4,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn deterministic() {
        let a = generate_synthetic(&small()).unwrap();
        let b = generate_synthetic(&small()).unwrap();
        assert_eq!(a.features, b.features);
        assert_eq!(a.projection, b.projection);
    }

    #[test]
    fn seed_changes_data() {
        let a = generate_synthetic(&small()).unwrap();
        let b = generate_synthetic(&SyntheticSpec { seed: 8, ..small() }).unwrap();
        assert_ne!(a.features.data(), b.features.data());
    }

    #[test]
    fn vanishing_within_noise_collapses_classes() {
        let data = generate_synthetic(&SyntheticSpec {
            within_noise: 1e-300,
            ..small()
        })
        .unwrap();
        let f = &data.features;
        for i in 1..f.n_samples() {
            if f.label(i) == f.label(i - 1) {
                assert_eq!(f.row(i), f.row(i - 1));
            }
        }
    }

    #[test]
    fn projection_preserves_norm_when_tall() {
        let data = generate_synthetic(&small()).unwrap();
        let a = data.descriptions.get(ClassId(0)).unwrap();
        let pa = data.mapped_description(ClassId(0)).unwrap();
        let n = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((n(a) - n(&pa)).abs() < 1e-12);
        assert!((n(a) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn shapes_and_vocabularies() {
        let data = generate_synthetic(&small()).unwrap();
        assert_eq!(data.features.n_samples(), 30);
        assert_eq!(data.features.dim(), 6);
        assert_eq!(data.seen.as_slice(), &[ClassId(0), ClassId(1), ClassId(2), ClassId(3)]);
        assert_eq!(data.unseen.as_slice(), &[ClassId(4), ClassId(5)]);
        assert!(data.seen.is_disjoint(&data.unseen));
    }

    #[test]
    fn rejects_zero_counts() {
        assert!(generate_synthetic(&SyntheticSpec { samples_per_class: 0, ..small() }).is_err());
        assert!(generate_synthetic(&SyntheticSpec { within_noise: 0.0, ..small() }).is_err());
    }
}

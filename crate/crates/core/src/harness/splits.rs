//! Class- and sample-level partitions.
//!
//! Classes: seen `S` (with a held-out subset `H ⊂ S`), unseen-val `U_val`,
//! unseen-test `U_test`. Samples of `S` go to train / seen-val / test; all
//! samples of `U_val` form unseen-val and all samples of `U_test` join test.
//! GZSL-Val (seen-val ∪ unseen-val) is split per class into Gating-Train and
//! Gating-Val.

use std::collections::{BTreeMap, HashSet};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::rng::{stream, Stream};
use crate::error::{Error, Result};
use crate::score::{ClassId, Vocabulary};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    /// `|H| = floor(held_out_fraction · |S|)`.
    pub held_out_fraction: f64,
    /// Fraction of unseen classes used for validation; the rest are test classes.
    pub unseen_val_fraction: f64,
    pub train_fraction: f64,
    pub seen_val_fraction: f64,
    /// Per-class share of GZSL-Val that goes to Gating-Train.
    pub gating_train_fraction: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            held_out_fraction: 0.2,
            unseen_val_fraction: 0.5,
            train_fraction: 0.6,
            seen_val_fraction: 0.2,
            gating_train_fraction: 0.5,
        }
    }
}

impl SplitConfig {
    fn validate(&self) -> Result<()> {
        let fractions = [
            ("held_out_fraction", self.held_out_fraction),
            ("unseen_val_fraction", self.unseen_val_fraction),
            ("train_fraction", self.train_fraction),
            ("seen_val_fraction", self.seen_val_fraction),
            ("gating_train_fraction", self.gating_train_fraction),
        ];
        for (name, f) in fractions {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::invalid(format!("{name} must lie in [0, 1]")));
            }
        }
        if self.train_fraction + self.seen_val_fraction >= 1.0 {
            return Err(Error::invalid("train_fraction + seen_val_fraction must be < 1"));
        }
        Ok(())
    }
}

/// Materialized split. Every index list is sorted and refers to rows of the dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Splits {
    pub seen: Vocabulary,
    pub held_out: Vocabulary,
    pub unseen_val: Vocabulary,
    pub unseen_test: Vocabulary,
    pub train: Vec<usize>,
    pub seen_val: Vec<usize>,
    pub unseen_val_samples: Vec<usize>,
    pub test: Vec<usize>,
    pub gating_train: Vec<usize>,
    pub gating_val: Vec<usize>,
}

fn sorted_union(a: &[usize], b: &[usize]) -> Vec<usize> {
    let mut v: Vec<usize> = a.iter().chain(b).copied().collect();
    v.sort_unstable();
    v.dedup();
    v
}

fn intersect(a: &[usize], b: &[usize]) -> Vec<usize> {
    let set: HashSet<usize> = b.iter().copied().collect();
    a.iter().copied().filter(|i| set.contains(i)).collect()
}

impl Splits {
    /// Seen classes not held out (`S \ H`).
    pub fn kept_seen(&self) -> Result<Vocabulary> {
        Vocabulary::new(self.seen.iter().filter(|&c| !self.held_out.contains(c)).collect())
    }

    /// Seen-val ∪ unseen-val.
    pub fn gzsl_val(&self) -> Vec<usize> {
        sorted_union(&self.seen_val, &self.unseen_val_samples)
    }

    /// Train ∪ seen-val: what the final experts are retrained on.
    pub fn union_train(&self) -> Vec<usize> {
        sorted_union(&self.train, &self.seen_val)
    }

    pub fn restrict_to_classes(&self, indices: &[usize], labels: &[Option<ClassId>], classes: &Vocabulary) -> Vec<usize> {
        indices
            .iter()
            .copied()
            .filter(|&i| labels[i].is_some_and(|c| classes.contains(c)))
            .collect()
    }

    pub fn gating_train_seen_val(&self) -> Vec<usize> {
        intersect(&self.gating_train, &self.seen_val)
    }

    pub fn gating_train_unseen_val(&self) -> Vec<usize> {
        intersect(&self.gating_train, &self.unseen_val_samples)
    }

    pub fn gating_val_seen_val(&self) -> Vec<usize> {
        intersect(&self.gating_val, &self.seen_val)
    }

    pub fn gating_val_unseen_val(&self) -> Vec<usize> {
        intersect(&self.gating_val, &self.unseen_val_samples)
    }

    /// Checks every structural invariant against the dataset's labels.
    pub fn validate(&self, labels: &[Option<ClassId>]) -> Result<()> {
        let vocabularies = [&self.seen, &self.unseen_val, &self.unseen_test];
        for (i, a) in vocabularies.iter().enumerate() {
            for b in &vocabularies[i + 1..] {
                if !a.is_disjoint(b) {
                    return Err(Error::OverlappingVocabularies);
                }
            }
        }
        if let Some(c) = self.held_out.iter().find(|&c| !self.seen.contains(c)) {
            return Err(Error::invalid(format!("held-out class {c} is not a seen class")));
        }

        let mut owner = vec![None; labels.len()];
        let subsets: [(&str, &[usize]); 4] = [
            ("train", &self.train),
            ("seen_val", &self.seen_val),
            ("unseen_val", &self.unseen_val_samples),
            ("test", &self.test),
        ];
        for (name, subset) in subsets {
            if subset.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::invalid(format!("{name} indices must be sorted and unique")));
            }
            for &i in subset {
                let slot = owner
                    .get_mut(i)
                    .ok_or_else(|| Error::invalid(format!("{name} index {i} out of range")))?;
                if let Some(other) = slot.replace(name) {
                    return Err(Error::invalid(format!("sample {i} is in both {other} and {name}")));
                }
            }
        }
        if let Some(i) = owner.iter().position(Option::is_none) {
            return Err(Error::invalid(format!("sample {i} is not assigned to any subset")));
        }
        for (i, (subset, label)) in owner.iter().zip(labels).enumerate() {
            let c = label.ok_or_else(|| Error::invalid(format!("sample {i} has no label")))?;
            let ok = match subset.unwrap() {
                "train" | "seen_val" => self.seen.contains(c),
                "unseen_val" => self.unseen_val.contains(c),
                _ => self.seen.contains(c) || self.unseen_test.contains(c),
            };
            if !ok {
                return Err(Error::invalid(format!("sample {i} of class {c} is in the wrong subset")));
            }
        }

        let gating = sorted_union(&self.gating_train, &self.gating_val);
        if gating.len() != self.gating_train.len() + self.gating_val.len() {
            return Err(Error::invalid("Gating-Train and Gating-Val overlap"));
        }
        if gating != self.gzsl_val() {
            return Err(Error::invalid("Gating-Train ∪ Gating-Val must equal GZSL-Val"));
        }
        Ok(())
    }
}

/// Deterministic split of labeled samples. `seen` and `unseen` are the
/// dataset's class sets; unseen classes are divided into validation and test.
pub fn build_splits(
    labels: &[Option<ClassId>],
    seen: &Vocabulary,
    unseen: &Vocabulary,
    cfg: &SplitConfig,
    seed: u64,
) -> Result<Splits> {
    cfg.validate()?;
    if !seen.is_disjoint(unseen) {
        return Err(Error::OverlappingVocabularies);
    }
    let n_held = (cfg.held_out_fraction * seen.len() as f64).floor() as usize;
    if n_held == 0 || seen.len() < n_held + 2 {
        return Err(Error::InsufficientClasses(format!(
            "{} seen classes cannot supply {} held-out classes and 2 kept classes",
            seen.len(),
            n_held
        )));
    }
    if unseen.len() < 2 {
        return Err(Error::InsufficientClasses(format!(
            "need ≥1 unseen-val and ≥1 unseen-test class, have {} unseen classes",
            unseen.len()
        )));
    }
    let n_unseen_val = ((cfg.unseen_val_fraction * unseen.len() as f64).floor() as usize).clamp(1, unseen.len() - 1);

    let mut class_rng = stream(seed, Stream::ClassSplit);
    let mut shuffled: Vec<ClassId> = seen.as_slice().to_vec();
    shuffled.shuffle(&mut class_rng);
    let mut held: Vec<ClassId> = shuffled[..n_held].to_vec();
    held.sort();
    let mut shuffled: Vec<ClassId> = unseen.as_slice().to_vec();
    shuffled.shuffle(&mut class_rng);
    let (mut u_val, mut u_test) = (shuffled[..n_unseen_val].to_vec(), shuffled[n_unseen_val..].to_vec());
    u_val.sort();
    u_test.sort();
    let unseen_val = Vocabulary::new(u_val)?;
    let unseen_test = Vocabulary::new(u_test)?;

    let mut by_class: BTreeMap<ClassId, Vec<usize>> = BTreeMap::new();
    for (i, label) in labels.iter().enumerate() {
        let c = label.ok_or_else(|| Error::invalid(format!("sample {i} has no label; splits need labels")))?;
        if !seen.contains(c) && !unseen.contains(c) {
            return Err(Error::UnknownClass(c));
        }
        by_class.entry(c).or_default().push(i);
    }

    let mut sample_rng = stream(seed, Stream::SampleSplit);
    let (mut train, mut seen_val, mut test, mut unseen_val_samples) = (vec![], vec![], vec![], vec![]);
    for c in seen.iter() {
        let mut idx = by_class.get(&c).cloned().unwrap_or_default();
        idx.shuffle(&mut sample_rng);
        let n = idx.len();
        let n_train = (cfg.train_fraction * n as f64).floor() as usize;
        let n_val = (cfg.seen_val_fraction * n as f64).floor() as usize;
        if n_train == 0 || n_val == 0 || n_train + n_val >= n {
            return Err(Error::InsufficientSamples(format!(
                "seen class {c} has {n} samples; cannot fill train, seen-val and test"
            )));
        }
        train.extend_from_slice(&idx[..n_train]);
        seen_val.extend_from_slice(&idx[n_train..n_train + n_val]);
        test.extend_from_slice(&idx[n_train + n_val..]);
    }
    for c in unseen.iter() {
        let idx = by_class.get(&c).cloned().unwrap_or_default();
        if idx.is_empty() {
            return Err(Error::InsufficientSamples(format!("unseen class {c} has no samples")));
        }
        if unseen_val.contains(c) {
            unseen_val_samples.extend(idx);
        } else {
            test.extend(idx);
        }
    }

    let mut gating_rng = stream(seed, Stream::GatingSplit);
    let (mut gating_train, mut gating_val) = (vec![], vec![]);
    let mut val_by_class: BTreeMap<ClassId, Vec<usize>> = BTreeMap::new();
    for &i in seen_val.iter().chain(&unseen_val_samples) {
        val_by_class.entry(labels[i].unwrap()).or_default().push(i);
    }
    for (_, mut idx) in val_by_class {
        idx.sort_unstable();
        idx.shuffle(&mut gating_rng);
        let k = (cfg.gating_train_fraction * idx.len() as f64).floor() as usize;
        gating_train.extend_from_slice(&idx[..k]);
        gating_val.extend_from_slice(&idx[k..]);
    }

    for v in [&mut train, &mut seen_val, &mut test, &mut unseen_val_samples, &mut gating_train, &mut gating_val] {
        v.sort_unstable();
    }
    let splits = Splits {
        seen: seen.clone(),
        held_out: Vocabulary::new(held)?,
        unseen_val,
        unseen_test,
        train,
        seen_val,
        unseen_val_samples,
        test,
        gating_train,
        gating_val,
    };
    splits.validate(labels)?;
    Ok(splits)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dataset(n_seen: u32, n_unseen: u32, per_class: usize) -> (Vec<Option<ClassId>>, Vocabulary, Vocabulary) {
        let labels = (0..n_seen + n_unseen)
            .flat_map(|c| std::iter::repeat_n(Some(ClassId(c)), per_class))
            .collect();
        let seen = Vocabulary::new((0..n_seen).map(ClassId).collect()).unwrap();
        let unseen = Vocabulary::new((n_seen..n_seen + n_unseen).map(ClassId).collect()).unwrap();
        (labels, seen, unseen)
    }

    #[test]
    fn held_out_uses_floor() {
        let (labels, seen, unseen) = dataset(10, 4, 10);
        let cfg = SplitConfig {
            held_out_fraction: 0.3,
            ..SplitConfig::default()
        };
        let s = build_splits(&labels, &seen, &unseen, &cfg, 1).unwrap();
        assert_eq!(s.held_out.len(), 3);
    }

    #[test]
    fn same_seed_same_splits() {
        let (labels, seen, unseen) = dataset(10, 4, 10);
        let a = build_splits(&labels, &seen, &unseen, &SplitConfig::default(), 5).unwrap();
        let b = build_splits(&labels, &seen, &unseen, &SplitConfig::default(), 5).unwrap();
        assert_eq!(a, b);
        let c = build_splits(&labels, &seen, &unseen, &SplitConfig::default(), 6).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn too_few_seen_classes() {
        let (labels, seen, unseen) = dataset(2, 2, 10);
        let cfg = SplitConfig {
            held_out_fraction: 0.9,
            ..SplitConfig::default()
        };
        let err = build_splits(&labels, &seen, &unseen, &cfg, 0).unwrap_err();
        assert!(err.to_string().contains("insufficient classes"), "{err}");
    }

    #[test]
    fn one_unseen_class_is_not_enough() {
        let (labels, seen, unseen) = dataset(10, 1, 10);
        assert!(matches!(
            build_splits(&labels, &seen, &unseen, &SplitConfig::default(), 0),
            Err(Error::InsufficientClasses(_))
        ));
    }

    #[test]
    fn too_few_samples() {
        let (labels, seen, unseen) = dataset(10, 2, 3);
        assert!(matches!(
            build_splits(&labels, &seen, &unseen, &SplitConfig::default(), 0),
            Err(Error::InsufficientSamples(_))
        ));
    }

    #[test]
    fn partitions_are_consistent() {
        let (labels, seen, unseen) = dataset(20, 10, 20);
        let s = build_splits(&labels, &seen, &unseen, &SplitConfig::default(), 7).unwrap();
        assert_eq!(s.held_out.len(), 4);
        assert_eq!(s.unseen_val.len(), 5);
        assert_eq!(s.unseen_test.len(), 5);
        assert_eq!(s.train.len(), 20 * 12);
        assert_eq!(s.seen_val.len(), 20 * 4);
        assert_eq!(s.test.len(), 20 * 4 + 5 * 20);
        assert_eq!(s.gating_train.len(), 20 * 2 + 5 * 10);
        assert_eq!(s.kept_seen().unwrap().len(), 16);
        assert_eq!(s.union_train().len(), 20 * 16);
    }

    #[test]
    fn validate_catches_double_assignment() {
        let (labels, seen, unseen) = dataset(10, 4, 10);
        let mut s = build_splits(&labels, &seen, &unseen, &SplitConfig::default(), 3).unwrap();
        let stolen = s.train[0];
        s.test.push(stolen);
        s.test.sort_unstable();
        assert!(s.validate(&labels).is_err());
    }

    #[test]
    fn validate_catches_gating_leak() {
        let (labels, seen, unseen) = dataset(10, 4, 10);
        let mut s = build_splits(&labels, &seen, &unseen, &SplitConfig::default(), 3).unwrap();
        s.gating_val.push(s.train[0]);
        s.gating_val.sort_unstable();
        assert!(s.validate(&labels).is_err());
    }
}

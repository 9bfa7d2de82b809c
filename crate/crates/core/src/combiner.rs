//! Confidence smoothing and the final seen/unseen mixture.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gate::{build_gate_features, gate_probability, GateModel, GateOutput};
use crate::score::{ClassId, ProbabilityVector, Vocabulary};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum SmoothingMode {
    None,
    Constant { lambda: f64 },
    Adaptive,
}

/// Smoothing mode plus the priors it mixes in. Missing priors mean uniform.
#[derive(Clone, Debug, PartialEq)]
pub struct SmoothingConfig {
    pub mode: SmoothingMode,
    pub seen_prior: Option<ProbabilityVector>,
    pub unseen_prior: Option<ProbabilityVector>,
}

impl SmoothingConfig {
    pub fn new(mode: SmoothingMode) -> Self {
        SmoothingConfig {
            mode,
            seen_prior: None,
            unseen_prior: None,
        }
    }

    pub fn none() -> Self {
        Self::new(SmoothingMode::None)
    }

    pub fn adaptive() -> Self {
        Self::new(SmoothingMode::Adaptive)
    }

    pub fn constant(lambda: f64) -> Result<Self> {
        check_unit("lambda", lambda)?;
        Ok(Self::new(SmoothingMode::Constant { lambda }))
    }

    fn prior(explicit: &Option<ProbabilityVector>, len: usize) -> Result<ProbabilityVector> {
        match explicit {
            Some(p) if p.len() == len => Ok(p.clone()),
            Some(p) => Err(Error::DimensionMismatch {
                expected: len,
                got: p.len(),
            }),
            None => ProbabilityVector::uniform(len),
        }
    }

    /// Smooth both conditionals according to the mode. In adaptive mode each
    /// expert is weighted by the gate's belief in its own domain.
    pub fn apply(
        &self,
        p_seen: &ProbabilityVector,
        p_unseen: &ProbabilityVector,
        gate: &GateOutput,
    ) -> Result<(ProbabilityVector, ProbabilityVector)> {
        match self.mode {
            SmoothingMode::None => Ok((p_seen.clone(), p_unseen.clone())),
            SmoothingMode::Constant { lambda } => Ok((
                smooth_const(p_seen, lambda, &Self::prior(&self.seen_prior, p_seen.len())?)?,
                smooth_const(p_unseen, lambda, &Self::prior(&self.unseen_prior, p_unseen.len())?)?,
            )),
            SmoothingMode::Adaptive => Ok((
                smooth_adaptive(p_seen, gate.p_seen, &Self::prior(&self.seen_prior, p_seen.len())?)?,
                smooth_adaptive(p_unseen, gate.p_unseen, &Self::prior(&self.unseen_prior, p_unseen.len())?)?,
            )),
        }
    }
}

fn check_unit(name: &str, v: f64) -> Result<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(Error::invalid(format!("{name} = {v} outside [0, 1]")))
    }
}

fn mix(p: &ProbabilityVector, keep: f64, weight_prior: f64, prior: &ProbabilityVector) -> Result<ProbabilityVector> {
    if p.len() != prior.len() {
        return Err(Error::DimensionMismatch {
            expected: p.len(),
            got: prior.len(),
        });
    }
    let values = p
        .values()
        .iter()
        .zip(prior.values())
        .map(|(a, b)| keep * a + weight_prior * b)
        .collect();
    ProbabilityVector::new(values)
}

/// `(1 − λ)·p + λ·prior`.
pub fn smooth_const(p_cond: &ProbabilityVector, lambda: f64, prior: &ProbabilityVector) -> Result<ProbabilityVector> {
    check_unit("lambda", lambda)?;
    mix(p_cond, 1.0 - lambda, lambda, prior)
}

/// `d·p + (1 − d)·prior`, where `d` is the gate's belief that the sample belongs to this expert's domain.
pub fn smooth_adaptive(
    p_cond: &ProbabilityVector,
    p_domain: f64,
    prior: &ProbabilityVector,
) -> Result<ProbabilityVector> {
    check_unit("p_domain", p_domain)?;
    mix(p_cond, p_domain, 1.0 - p_domain, prior)
}

/// Seen and unseen vocabularies plus their concatenation (seen classes first).
#[derive(Clone, Debug, PartialEq)]
pub struct Domains {
    seen: Vocabulary,
    unseen: Vocabulary,
    union: Arc<Vocabulary>,
}

impl Domains {
    pub fn new(seen: Vocabulary, unseen: Vocabulary) -> Result<Self> {
        let union = Arc::new(seen.disjoint_union(&unseen)?);
        Ok(Domains { seen, unseen, union })
    }

    pub fn seen(&self) -> &Vocabulary {
        &self.seen
    }

    pub fn unseen(&self) -> &Vocabulary {
        &self.unseen
    }

    pub fn union(&self) -> &Vocabulary {
        &self.union
    }

    fn check(&self, p_seen: &ProbabilityVector, p_unseen: &ProbabilityVector) -> Result<()> {
        if p_seen.len() != self.seen.len() {
            return Err(Error::DimensionMismatch {
                expected: self.seen.len(),
                got: p_seen.len(),
            });
        }
        if p_unseen.len() != self.unseen.len() {
            return Err(Error::DimensionMismatch {
                expected: self.unseen.len(),
                got: p_unseen.len(),
            });
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Combination {
    Soft,
    Hard,
}

/// Distribution over seen ∪ unseen classes with the gate belief that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct CombinedPrediction {
    pub vocabulary: Arc<Vocabulary>,
    pub probabilities: ProbabilityVector,
    pub gate: GateOutput,
    pub smoothing: SmoothingMode,
    pub combination: Combination,
}

impl CombinedPrediction {
    pub fn predicted_class(&self) -> ClassId {
        self.vocabulary.as_slice()[self.probabilities.argmax()]
    }
}

/// `p(y) = p(y|S)·p(S)` on seen classes and `p(y|U)·p(U)` on unseen classes.
pub fn combine_soft(
    domains: &Domains,
    p_seen: &ProbabilityVector,
    p_unseen: &ProbabilityVector,
    gate: GateOutput,
) -> Result<CombinedPrediction> {
    domains.check(p_seen, p_unseen)?;
    let values: Vec<f64> = p_seen
        .values()
        .iter()
        .map(|v| v * gate.p_seen)
        .chain(p_unseen.values().iter().map(|v| v * gate.p_unseen))
        .collect();
    Ok(CombinedPrediction {
        vocabulary: domains.union.clone(),
        probabilities: ProbabilityVector::new(values)?,
        gate,
        smoothing: SmoothingMode::None,
        combination: Combination::Soft,
    })
}

/// Route the whole mass to one expert: seen when `p_seen ≥ 0.5` (ties go to seen).
pub fn combine_hard(
    domains: &Domains,
    p_seen: &ProbabilityVector,
    p_unseen: &ProbabilityVector,
    gate: GateOutput,
) -> Result<CombinedPrediction> {
    domains.check(p_seen, p_unseen)?;
    let to_seen = gate.p_seen >= 0.5;
    let values: Vec<f64> = p_seen
        .values()
        .iter()
        .map(|&v| if to_seen { v } else { 0.0 })
        .chain(p_unseen.values().iter().map(|&v| if to_seen { 0.0 } else { v }))
        .collect();
    Ok(CombinedPrediction {
        vocabulary: domains.union.clone(),
        probabilities: ProbabilityVector::new(values)?,
        gate,
        smoothing: SmoothingMode::None,
        combination: Combination::Hard,
    })
}

/// Smooth per `smoothing`, then combine per `combination`.
pub fn combine(
    domains: &Domains,
    p_seen: &ProbabilityVector,
    p_unseen: &ProbabilityVector,
    gate: GateOutput,
    smoothing: &SmoothingConfig,
    combination: Combination,
) -> Result<CombinedPrediction> {
    let (s, u) = smoothing.apply(p_seen, p_unseen, &gate)?;
    let mut out = match combination {
        Combination::Soft => combine_soft(domains, &s, &u, gate)?,
        Combination::Hard => combine_hard(domains, &s, &u, gate)?,
    };
    out.smoothing = smoothing.mode;
    Ok(out)
}

/// Ranking vector `(seen − c) ++ unseen`; not a distribution.
pub fn calibrated_stacking(domains: &Domains, seen_scores: &[f64], unseen_scores: &[f64], c: f64) -> Result<Vec<f64>> {
    if seen_scores.len() != domains.seen.len() || unseen_scores.len() != domains.unseen.len() {
        return Err(Error::DimensionMismatch {
            expected: domains.union.len(),
            got: seen_scores.len() + unseen_scores.len(),
        });
    }
    Ok(seen_scores.iter().map(|s| s - c).chain(unseen_scores.iter().copied()).collect())
}

/// Full inference for one sample: gate features, gate belief, smoothing, soft combination.
pub fn cosmo_predict(
    domains: &Domains,
    seen_scores: &ProbabilityVector,
    zs_scores: &ProbabilityVector,
    gate_model: &GateModel,
    smoothing: &SmoothingConfig,
) -> Result<CombinedPrediction> {
    let features = build_gate_features(seen_scores, zs_scores, &gate_model.feature_config()?)?;
    let gate = gate_probability(gate_model, &features)?;
    combine(domains, seen_scores, zs_scores, gate, smoothing, Combination::Soft)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::score::{argmax, normalize};
    use proptest::prelude::*;

    fn pv(v: &[f64]) -> ProbabilityVector {
        ProbabilityVector::new(v.to_vec()).unwrap()
    }

    fn domains(seen: &[u32], unseen: &[u32]) -> Domains {
        Domains::new(
            Vocabulary::new(seen.iter().map(|&c| ClassId(c)).collect()).unwrap(),
            Vocabulary::new(unseen.iter().map(|&c| ClassId(c)).collect()).unwrap(),
        )
        .unwrap()
    }

    fn close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= tol, "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn smoothing_examples() {
        let p = pv(&[0.9, 0.1]);
        let u = ProbabilityVector::uniform(2).unwrap();
        assert_eq!(smooth_const(&p, 0.0, &u).unwrap(), p);
        assert_eq!(smooth_const(&p, 1.0, &u).unwrap(), u);
        close(smooth_const(&p, 0.5, &u).unwrap().values(), &[0.7, 0.3], 1e-15);
        close(smooth_adaptive(&p, 0.5, &u).unwrap().values(), &[0.7, 0.3], 1e-15);
        assert_eq!(smooth_adaptive(&p, 1.0, &u).unwrap(), p);
        assert_eq!(smooth_adaptive(&p, 0.0, &u).unwrap(), u);
        assert!(smooth_const(&p, 1.5, &u).is_err());
        assert!(smooth_adaptive(&p, -0.1, &u).is_err());
    }

    #[test]
    fn soft_combination_examples() {
        let d = domains(&[1, 2], &[3, 4]);
        let full = combine_soft(&d, &pv(&[0.8, 0.2]), &pv(&[0.6, 0.4]), GateOutput::fixed(1.0).unwrap()).unwrap();
        assert_eq!(full.probabilities.values(), &[0.8, 0.2, 0.0, 0.0]);
        let u2 = ProbabilityVector::uniform(2).unwrap();
        let even = combine_soft(&d, &u2, &u2, GateOutput::fixed(0.5).unwrap()).unwrap();
        assert_eq!(even.probabilities.values(), &[0.25; 4]);
        let mixed = combine_soft(&d, &pv(&[0.8, 0.2]), &pv(&[0.6, 0.4]), GateOutput::fixed(0.75).unwrap()).unwrap();
        close(mixed.probabilities.values(), &[0.6, 0.15, 0.15, 0.1], 1e-15);
        assert_eq!(mixed.vocabulary.as_slice(), &[ClassId(1), ClassId(2), ClassId(3), ClassId(4)]);
    }

    #[test]
    fn overlapping_domains_rejected() {
        let err = Domains::new(
            Vocabulary::new(vec![ClassId(1), ClassId(2)]).unwrap(),
            Vocabulary::new(vec![ClassId(2)]).unwrap(),
        )
        .unwrap_err();
        assert_eq!(err.to_string(), "S and U must be disjoint");
    }

    #[test]
    fn hard_combination_examples() {
        let d = domains(&[1, 2], &[3, 4]);
        let (s, u) = (pv(&[0.8, 0.2]), pv(&[0.6, 0.4]));
        let seen = combine_hard(&d, &s, &u, GateOutput::fixed(0.9).unwrap()).unwrap();
        assert_eq!(seen.probabilities.values(), &[0.8, 0.2, 0.0, 0.0]);
        let unseen = combine_hard(&d, &s, &u, GateOutput::fixed(0.1).unwrap()).unwrap();
        assert_eq!(unseen.probabilities.values(), &[0.0, 0.0, 0.6, 0.4]);
        let tie = combine_hard(&d, &s, &u, GateOutput::fixed(0.5).unwrap()).unwrap();
        assert_eq!(tie.probabilities.values(), &[0.8, 0.2, 0.0, 0.0]);
    }

    #[test]
    fn stacking_examples() {
        let d = domains(&[1], &[2]);
        assert_eq!(calibrated_stacking(&d, &[0.9], &[0.5], 0.0).unwrap(), vec![0.9, 0.5]);
        let shifted = calibrated_stacking(&d, &[0.9], &[0.5], 0.5).unwrap();
        assert_eq!(argmax(&shifted), 1);
        assert_eq!(argmax(&calibrated_stacking(&d, &[0.9], &[0.5], -1e9).unwrap()), 0);
        assert_eq!(argmax(&calibrated_stacking(&d, &[0.9], &[0.5], 1e9).unwrap()), 1);
    }

    fn saturated_gate(w: f64) -> GateModel {
        GateModel {
            w: vec![w, 0.0, 0.0, 0.0],
            b: 0.0,
            gamma: 1.0,
            beta: 0.0,
            k_seen: 2,
            k_unseen: 2,
            temperature: 1.0,
        }
    }

    #[test]
    fn pipeline_with_saturated_gate_returns_seen_expert() {
        let d = domains(&[1, 2], &[3, 4]);
        let out = cosmo_predict(&d, &pv(&[0.7, 0.3]), &pv(&[0.4, 0.6]), &saturated_gate(1e4), &SmoothingConfig::none()).unwrap();
        assert_eq!(out.probabilities.values(), &[0.7, 0.3, 0.0, 0.0]);
    }

    /// Hand-set walk-through: the zero-shot expert puts a confident spike on a
    /// distractor while the gate believes the sample is seen. Without smoothing
    /// the spike wins; adaptive smoothing flattens it and the seen class wins.
    #[test]
    fn walk_through_distractor_is_suppressed() {
        let d = domains(&[1, 2], &[3, 4]);
        let seen = pv(&[0.55, 0.45]);
        let zs = pv(&[0.98, 0.02]);
        // gate: s = 2·top1(seen) + b with b chosen so that p_seen = σ(0.4) ≈ 0.5987
        let gate = GateModel {
            w: vec![2.0, 0.0, 0.0, 0.0],
            b: 0.4 - 1.1,
            gamma: 1.0,
            beta: 0.0,
            k_seen: 2,
            k_unseen: 2,
            temperature: 1.0,
        };
        let plain = cosmo_predict(&d, &seen, &zs, &gate, &SmoothingConfig::none()).unwrap();
        let smoothed = cosmo_predict(&d, &seen, &zs, &gate, &SmoothingConfig::adaptive()).unwrap();

        // Independent composition: g = σ(0.4); p'(y|S) = g·p + (1−g)/2; p'(y|U) = (1−g)·q + g/2;
        // p(y) = g·p'(y|S) on S and (1−g)·p'(y|U) on U.
        let g: f64 = 1.0 / (1.0 + (-0.4f64).exp());
        let expected_plain = [g * 0.55, g * 0.45, (1.0 - g) * 0.98, (1.0 - g) * 0.02];
        let expected_smooth = [
            g * (g * 0.55 + (1.0 - g) * 0.5),
            g * (g * 0.45 + (1.0 - g) * 0.5),
            (1.0 - g) * ((1.0 - g) * 0.98 + g * 0.5),
            (1.0 - g) * ((1.0 - g) * 0.02 + g * 0.5),
        ];
        close(plain.probabilities.values(), &expected_plain, 1e-12);
        close(smoothed.probabilities.values(), &expected_smooth, 1e-12);
        assert_eq!(plain.predicted_class(), ClassId(3));
        assert_eq!(smoothed.predicted_class(), ClassId(1));
    }

    #[test]
    fn walk_through_numeric_values() {
        // frozen from an independent evaluation of the adaptive rule then the soft mixture
        let g: f64 = 1.0 / (1.0 + (-0.4f64).exp());
        assert!((g - 0.598687660112452).abs() < 1e-15);
        let v = g * (g * 0.55 + (1.0 - g) * 0.5);
        assert!((v - 0.3172651757747722).abs() < 1e-12);
    }

    fn prob(n: usize) -> impl Strategy<Value = ProbabilityVector> {
        prop::collection::vec(0.0f64..1.0, n).prop_filter_map("nonzero", |v| normalize(&v).ok())
    }

    proptest! {
        #[test]
        fn combined_sums_to_one(
            s in prob(5), u in prob(3), p in 0.0f64..=1.0, lambda in 0.0f64..=1.0, mode in 0usize..3,
        ) {
            let d = domains(&[0, 1, 2, 3, 4], &[10, 11, 12]);
            let smoothing = match mode {
                0 => SmoothingConfig::none(),
                1 => SmoothingConfig::constant(lambda).unwrap(),
                _ => SmoothingConfig::adaptive(),
            };
            let out = combine(&d, &s, &u, GateOutput::calibrate(p - 0.5, 4.0, 0.0), &smoothing, Combination::Soft).unwrap();
            prop_assert!((out.probabilities.values().iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        }

        #[test]
        fn adaptive_is_const_with_complementary_lambda(p in prob(6), d in 0.0f64..=1.0) {
            let prior = ProbabilityVector::uniform(6).unwrap();
            let a = smooth_adaptive(&p, d, &prior).unwrap();
            let c = smooth_const(&p, 1.0 - d, &prior).unwrap();
            for (x, y) in a.values().iter().zip(c.values()) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
        }

        #[test]
        fn stacking_keeps_within_domain_order(s in prop::collection::vec(-3.0f64..3.0, 4), c in -2.0f64..2.0) {
            let d = domains(&[0, 1, 2, 3], &[9]);
            let out = calibrated_stacking(&d, &s, &[0.0], c).unwrap();
            for i in 0..4 {
                for j in 0..4 {
                    if s[i] > s[j] {
                        prop_assert!(out[i] > out[j] || (out[i] - out[j]).abs() < 1e-12);
                    }
                }
            }
        }
    }
}

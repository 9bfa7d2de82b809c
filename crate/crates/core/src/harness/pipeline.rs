//! Expert stages and the score tables every later step works from.
//!
//! Three expert instances are trained:
//! - *gating*: seen and zero-shot experts trained on train ∩ (S \ H); the
//!   zero-shot expert is scored over `H`. Only these produce gate-training
//!   features, so the held-out classes look genuinely unseen to them.
//! - *validation*: trained on train (all of S); zero-shot over `U_val`. Feeds
//!   Gating-Val and GZSL-Val.
//! - *test*: retrained on train ∪ seen-val; zero-shot over `U_test`. The gate
//!   is not retrained.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::Serialize;

use super::config::Config;
use super::splits::Splits;
use super::synth::SyntheticData;
use crate::combiner::{calibrated_stacking, combine, Combination, CombinedPrediction, Domains, SmoothingConfig};
use crate::error::{Error, Result};
use crate::eval::MetricsReport;
use crate::experts::{train_seen_expert, train_zs_expert, ClassDescriptionMatrix, FeatureMatrix, SeenExpert, ZsExpert};
use crate::gate::{build_gate_features, GateFeatureVector, GateModel, GateOutput};
use crate::score::{argmax, reheat_probabilities, ClassId, ProbabilityVector, ScoreTable, Temperature, Vocabulary};

#[derive(Clone, Debug)]
pub struct Dataset {
    pub features: FeatureMatrix,
    pub descriptions: ClassDescriptionMatrix,
    pub seen: Vocabulary,
    pub unseen: Vocabulary,
}

impl From<SyntheticData> for Dataset {
    fn from(s: SyntheticData) -> Self {
        Dataset {
            features: s.features,
            descriptions: s.descriptions,
            seen: s.seen,
            unseen: s.unseen,
        }
    }
}

#[derive(Clone, Debug)]
pub struct StageExperts {
    pub seen: SeenExpert,
    pub zs: ZsExpert,
    /// Dataset rows both experts were trained on.
    pub training_indices: Vec<usize>,
}

impl StageExperts {
    /// Seen-expert probabilities (T = 1) and zero-shot probabilities over `unseen_domain`.
    pub fn score(&self, dataset: &Dataset, indices: &[usize], unseen_domain: &Vocabulary) -> Result<(ScoreTable, ScoreTable)> {
        let x = dataset.features.select(indices);
        let seen = self.seen.predict_table(&x, Temperature::ONE)?;
        let zs = self.zs.bind(unseen_domain, &dataset.descriptions)?.predict_table(&x)?;
        Ok((seen, zs))
    }
}

pub fn train_stage(dataset: &Dataset, indices: &[usize], classes: &Vocabulary, cfg: &Config) -> Result<StageExperts> {
    let train = dataset.features.select(indices);
    Ok(StageExperts {
        seen: train_seen_expert(&train, classes, &cfg.seen_expert)?,
        zs: train_zs_expert(&train, classes, &dataset.descriptions, &cfg.zs_expert)?,
        training_indices: indices.to_vec(),
    })
}

/// Final experts, trained on train ∪ seen-val with the already selected hyperparameters.
pub fn retrain_on_union(dataset: &Dataset, splits: &Splits, cfg: &Config) -> Result<StageExperts> {
    train_stage(dataset, &splits.union_train(), &splits.seen, cfg)
}

/// Labeled examples for fitting or validating a gate.
#[derive(Clone, Debug, Default)]
pub struct GateData {
    pub seen: Vec<ProbabilityVector>,
    pub zs: Vec<ProbabilityVector>,
    pub is_seen: Vec<bool>,
}

impl GateData {
    fn extend(&mut self, seen: &ScoreTable, zs: &ScoreTable, is_seen: bool) -> Result<()> {
        self.seen.extend(seen.probability_rows()?);
        self.zs.extend(zs.probability_rows()?);
        self.is_seen.extend(std::iter::repeat_n(is_seen, seen.n_samples()));
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.is_seen.len()
    }

    pub fn is_empty(&self) -> bool {
        self.is_seen.is_empty()
    }
}

/// Which gate produces the raw seen-vs-unseen score.
#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum GateSpec {
    /// Largest temperature-scaled seen probability.
    MaxSoftmax { temperature: Temperature },
    ConfidenceBased { model: GateModel },
}

impl GateSpec {
    pub fn raw_score(&self, seen: &ProbabilityVector, zs: &ProbabilityVector) -> Result<f64> {
        match self {
            GateSpec::MaxSoftmax { temperature } => Ok(reheat_probabilities(seen, *temperature)?.max()),
            GateSpec::ConfidenceBased { model } => {
                let features: GateFeatureVector = build_gate_features(seen, zs, &model.feature_config()?)?;
                model.raw_score(&features)
            }
        }
    }

    pub fn raw_scores(&self, seen: &[ProbabilityVector], zs: &[ProbabilityVector]) -> Result<Vec<f64>> {
        if seen.len() != zs.len() {
            return Err(Error::DimensionMismatch {
                expected: seen.len(),
                got: zs.len(),
            });
        }
        (0..seen.len()).into_par_iter().map(|i| self.raw_score(&seen[i], &zs[i])).collect()
    }
}

/// Aligned seen / zero-shot scores plus ground truth for one evaluation set.
#[derive(Clone, Debug)]
pub struct EvalData {
    pub sample_ids: Vec<String>,
    pub seen_table: ScoreTable,
    pub zs_table: ScoreTable,
    pub seen: Vec<ProbabilityVector>,
    pub zs: Vec<ProbabilityVector>,
    pub truths: Vec<ClassId>,
    pub domains: Domains,
}

impl EvalData {
    pub fn new(seen_table: ScoreTable, zs_table: ScoreTable, truths: Vec<ClassId>) -> Result<EvalData> {
        if seen_table.sample_ids() != zs_table.sample_ids() {
            return Err(Error::invalid("seen and zero-shot score tables list different samples"));
        }
        if truths.len() != seen_table.n_samples() {
            return Err(Error::DimensionMismatch {
                expected: seen_table.n_samples(),
                got: truths.len(),
            });
        }
        let domains = Domains::new(seen_table.vocabulary().clone(), zs_table.vocabulary().clone())?;
        if let Some(&t) = truths.iter().find(|&&t| !domains.union().contains(t)) {
            return Err(Error::UnknownClass(t));
        }
        Ok(EvalData {
            sample_ids: seen_table.sample_ids().to_vec(),
            seen: seen_table.probability_rows()?,
            zs: zs_table.probability_rows()?,
            seen_table,
            zs_table,
            truths,
            domains,
        })
    }

    /// Attach labels given as `(sample_id, class)` pairs, matched by id.
    pub fn with_labels(seen_table: ScoreTable, zs_table: ScoreTable, labels: &[(String, ClassId)]) -> Result<EvalData> {
        let by_id: HashMap<&str, ClassId> = labels.iter().map(|(id, c)| (id.as_str(), *c)).collect();
        let truths = seen_table
            .sample_ids()
            .iter()
            .map(|id| by_id.get(id.as_str()).copied().ok_or_else(|| Error::invalid(format!("no label for sample {id}"))))
            .collect::<Result<Vec<_>>>()?;
        EvalData::new(seen_table, zs_table, truths)
    }

    pub fn len(&self) -> usize {
        self.truths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.truths.is_empty()
    }

    /// True when the sample's class is a seen class.
    pub fn is_seen(&self) -> Vec<bool> {
        self.truths.iter().map(|&t| self.domains.seen().contains(t)).collect()
    }

    pub fn raw_scores(&self, gate: &GateSpec) -> Result<Vec<f64>> {
        gate.raw_scores(&self.seen, &self.zs)
    }

    /// Combined predictions for precomputed raw gate scores at one operating point.
    pub fn predict(
        &self,
        raw_scores: &[f64],
        gamma: f64,
        beta: f64,
        smoothing: &SmoothingConfig,
        combination: Combination,
    ) -> Result<Vec<CombinedPrediction>> {
        if raw_scores.len() != self.len() {
            return Err(Error::DimensionMismatch {
                expected: self.len(),
                got: raw_scores.len(),
            });
        }
        if !(gamma > 0.0) {
            return Err(Error::invalid("gamma must be > 0"));
        }
        (0..self.len())
            .into_par_iter()
            .map(|i| {
                let gate = GateOutput::calibrate(raw_scores[i], gamma, beta);
                combine(&self.domains, &self.seen[i], &self.zs[i], gate, smoothing, combination)
            })
            .collect()
    }

    /// Argmax of `(seen − c) ++ unseen` per sample.
    pub fn predict_stacking(&self, c: f64) -> Result<Vec<ClassId>> {
        let union = self.domains.union().as_slice();
        (0..self.len())
            .map(|i| {
                let ranking = calibrated_stacking(&self.domains, self.seen[i].values(), self.zs[i].values(), c)?;
                Ok(union[argmax(&ranking)])
            })
            .collect()
    }

    pub fn report(&self, predicted: &[ClassId]) -> Result<MetricsReport> {
        MetricsReport::from_predictions(
            predicted,
            &self.truths,
            self.domains.seen().as_slice(),
            self.domains.unseen().as_slice(),
        )
    }

    pub fn report_predictions(&self, predictions: &[CombinedPrediction]) -> Result<MetricsReport> {
        let predicted: Vec<ClassId> = predictions.iter().map(CombinedPrediction::predicted_class).collect();
        self.report(&predicted)
    }
}

/// Every score table the tuning and evaluation steps need.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub splits: Splits,
    pub gating_experts: StageExperts,
    pub validation_experts: StageExperts,
    pub test_experts: StageExperts,
    /// Gate-fitting examples (from Gating-Train and the held-out classes).
    pub gate_train: GateData,
    /// Gate-validation examples from Gating-Val.
    pub gating_val: GateData,
    /// GZSL-Val, scored by the validation experts.
    pub val: EvalData,
    /// Test set, scored by the retrained experts.
    pub test: EvalData,
}

fn truths(dataset: &Dataset, indices: &[usize]) -> Vec<ClassId> {
    indices.iter().map(|&i| dataset.features.label(i).expect("split samples are labeled")).collect()
}

pub fn prepare(dataset: &Dataset, splits: &Splits, cfg: &Config) -> Result<Prepared> {
    let labels = dataset.features.labels();
    splits.validate(labels)?;
    let kept = splits.kept_seen()?;
    let held = &splits.held_out;

    let gating_train_idx = splits.restrict_to_classes(&splits.train, labels, &kept);
    let (gating_experts, (validation_experts, test_experts)) = rayon::join(
        || train_stage(dataset, &gating_train_idx, &kept, cfg),
        || {
            rayon::join(
                || train_stage(dataset, &splits.train, &splits.seen, cfg),
                || retrain_on_union(dataset, splits, cfg),
            )
        },
    );
    let (gating_experts, validation_experts, test_experts) = (gating_experts?, validation_experts?, test_experts?);

    let mut gate_train = GateData::default();
    let positives = splits.restrict_to_classes(&splits.gating_train_seen_val(), labels, &kept);
    let (s, z) = gating_experts.score(dataset, &positives, held)?;
    gate_train.extend(&s, &z, true)?;
    let mut negatives = splits.restrict_to_classes(&splits.train, labels, held);
    negatives.extend(splits.restrict_to_classes(&splits.gating_train_seen_val(), labels, held));
    negatives.sort_unstable();
    let (s, z) = gating_experts.score(dataset, &negatives, held)?;
    gate_train.extend(&s, &z, false)?;
    if cfg.unseen_val_gate_negatives {
        let (s, z) = validation_experts.score(dataset, &splits.gating_train_unseen_val(), &splits.unseen_val)?;
        gate_train.extend(&s, &z, false)?;
    }

    let mut gating_val = GateData::default();
    let (s, z) = validation_experts.score(dataset, &splits.gating_val_seen_val(), &splits.unseen_val)?;
    gating_val.extend(&s, &z, true)?;
    let (s, z) = validation_experts.score(dataset, &splits.gating_val_unseen_val(), &splits.unseen_val)?;
    gating_val.extend(&s, &z, false)?;

    let val_idx = splits.gzsl_val();
    let (s, z) = validation_experts.score(dataset, &val_idx, &splits.unseen_val)?;
    let val = EvalData::new(s, z, truths(dataset, &val_idx))?;
    let (s, z) = test_experts.score(dataset, &splits.test, &splits.unseen_test)?;
    let test = EvalData::new(s, z, truths(dataset, &splits.test))?;

    Ok(Prepared {
        splits: splits.clone(),
        gating_experts,
        validation_experts,
        test_experts,
        gate_train,
        gating_val,
        val,
        test,
    })
}

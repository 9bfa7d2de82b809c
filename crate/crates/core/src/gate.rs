//! The seen/unseen gate.
//!
//! Gate features are the top-K pooled (and temperature-scaled) seen-expert
//! probabilities followed by the top-K pooled zero-shot probabilities. Pooling
//! sorted scores makes the gate blind to class identity, so a gate trained on
//! held-out classes transfers to the real unseen vocabulary. A binary logistic
//! model scores the features; its raw log-odds `s` are calibrated with
//! `p_seen = σ(γ (s − β))`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experts::ExpertTrainingConfig;
use crate::optim::{minimize, Objective};
use crate::score::{reheat_probabilities, top_k_pool, ProbabilityVector, ScoreTable, Temperature, TopK};

/// Pooling sizes and the temperature applied to the seen block.
///
/// `k_unseen == 0` drops the zero-shot block entirely (the "without p^ZS" ablation).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateFeatureConfig {
    pub k_seen: TopK,
    pub k_unseen: usize,
    pub temperature: Temperature,
}

impl GateFeatureConfig {
    pub fn new(k: TopK, temperature: Temperature) -> Self {
        GateFeatureConfig {
            k_seen: k,
            k_unseen: k.get(),
            temperature,
        }
    }

    pub fn without_zs(k: TopK, temperature: Temperature) -> Self {
        GateFeatureConfig {
            k_seen: k,
            k_unseen: 0,
            temperature,
        }
    }

    pub fn len(&self) -> usize {
        self.k_seen.get() + self.k_unseen
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GateFeatureVector(Vec<f64>);

impl GateFeatureVector {
    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl From<Vec<f64>> for GateFeatureVector {
    fn from(v: Vec<f64>) -> Self {
        GateFeatureVector(v)
    }
}

pub fn build_gate_features(
    seen_scores: &ProbabilityVector,
    zs_scores: &ProbabilityVector,
    cfg: &GateFeatureConfig,
) -> Result<GateFeatureVector> {
    let reheated = reheat_probabilities(seen_scores, cfg.temperature)?;
    let mut features = top_k_pool(&reheated, cfg.k_seen);
    if cfg.k_unseen > 0 {
        features.extend(top_k_pool(zs_scores, TopK::new(cfg.k_unseen)?));
    }
    Ok(GateFeatureVector(features))
}

/// Calibrated gate belief for one sample. `p_seen + p_unseen == 1` holds exactly.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateOutput {
    pub p_seen: f64,
    pub p_unseen: f64,
    pub raw_score: f64,
}

impl GateOutput {
    /// `σ(γ (raw − β))`. The smaller of the two probabilities is computed
    /// directly and the other as its complement, so the pair sums to exactly 1.
    pub fn calibrate(raw_score: f64, gamma: f64, beta: f64) -> GateOutput {
        let z = gamma * (raw_score - beta);
        let small = if z.is_nan() { 0.5 } else { 1.0 / (1.0 + z.abs().exp()) };
        let large = 1.0 - small;
        let (p_seen, p_unseen) = if z >= 0.0 { (large, small) } else { (small, large) };
        GateOutput {
            p_seen,
            p_unseen,
            raw_score,
        }
    }

    /// A gate fixed at the given seen probability (no underlying score).
    pub fn fixed(p_seen: f64) -> Result<GateOutput> {
        if !(0.0..=1.0).contains(&p_seen) {
            return Err(Error::invalid(format!("gate probability {p_seen} outside [0, 1]")));
        }
        Ok(GateOutput {
            p_seen,
            p_unseen: 1.0 - p_seen,
            raw_score: f64::NAN,
        })
    }
}

fn check_gamma(gamma: f64) -> Result<()> {
    if gamma > 0.0 && gamma.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!("gamma must be > 0, got {gamma}")))
    }
}

/// Linear gate over pooled confidences. Serialized as
/// `{w, b, gamma, beta, k_seen, k_unseen, temperature}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateModel {
    pub w: Vec<f64>,
    pub b: f64,
    pub gamma: f64,
    pub beta: f64,
    pub k_seen: usize,
    pub k_unseen: usize,
    pub temperature: f64,
}

impl GateModel {
    pub fn feature_config(&self) -> Result<GateFeatureConfig> {
        Ok(GateFeatureConfig {
            k_seen: TopK::new(self.k_seen)?,
            k_unseen: self.k_unseen,
            temperature: Temperature::new(self.temperature)?,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = self.feature_config()?;
        check_gamma(self.gamma)?;
        if self.w.len() != cfg.len() {
            return Err(Error::DimensionMismatch {
                expected: cfg.len(),
                got: self.w.len(),
            });
        }
        if self.w.iter().chain([&self.b, &self.beta]).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite);
        }
        Ok(())
    }

    /// Same weights with a new `(γ, β)`.
    pub fn with_calibration(&self, gamma: f64, beta: f64) -> Result<GateModel> {
        check_gamma(gamma)?;
        Ok(GateModel {
            gamma,
            beta,
            ..self.clone()
        })
    }

    /// Number of learned parameters, weights plus bias.
    pub fn n_parameters(&self) -> usize {
        self.w.len() + 1
    }

    pub fn raw_score(&self, features: &GateFeatureVector) -> Result<f64> {
        if features.len() != self.w.len() {
            return Err(Error::DimensionMismatch {
                expected: self.w.len(),
                got: features.len(),
            });
        }
        Ok(self.b + self.w.iter().zip(features.values()).map(|(w, f)| w * f).sum::<f64>())
    }

    /// Raw score straight from the two experts' probabilities.
    pub fn score_experts(&self, seen: &ProbabilityVector, zs: &ProbabilityVector) -> Result<f64> {
        self.raw_score(&build_gate_features(seen, zs, &self.feature_config()?)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<GateModel> {
        let model: GateModel = serde_json::from_str(text)?;
        model.validate()?;
        Ok(model)
    }
}

pub fn gate_probability(model: &GateModel, features: &GateFeatureVector) -> Result<GateOutput> {
    Ok(GateOutput::calibrate(model.raw_score(features)?, model.gamma, model.beta))
}

/// Gate outputs for every row of two aligned score tables, evaluated in parallel.
pub fn gate_outputs(model: &GateModel, seen: &ScoreTable, zs: &ScoreTable) -> Result<Vec<GateOutput>> {
    if seen.n_samples() != zs.n_samples() {
        return Err(Error::DimensionMismatch {
            expected: seen.n_samples(),
            got: zs.n_samples(),
        });
    }
    let cfg = model.feature_config()?;
    (0..seen.n_samples())
        .into_par_iter()
        .map(|i| {
            let features = build_gate_features(&seen.probability_row(i)?, &zs.probability_row(i)?, &cfg)?;
            gate_probability(model, &features)
        })
        .collect()
}

/// Baseline detector: threshold the largest (temperature-scaled) seen-expert probability.
pub fn max_softmax_gate(
    seen_scores: &ProbabilityVector,
    temperature: Temperature,
    gamma: f64,
    beta: f64,
) -> Result<GateOutput> {
    check_gamma(gamma)?;
    let raw = reheat_probabilities(seen_scores, temperature)?.max();
    Ok(GateOutput::calibrate(raw, gamma, beta))
}

/// `Σ softplus(−y·(wᵀf + b)) + ‖w‖²/(2C)`, labels `y ∈ {+1, −1}`; parameters `w` then `b`.
struct BinaryLogisticObjective<'a> {
    features: &'a [GateFeatureVector],
    labels: &'a [bool],
    width: usize,
    inv_c: f64,
}

fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl Objective for BinaryLogisticObjective<'_> {
    fn dim(&self) -> usize {
        self.width + 1
    }

    fn evaluate(&self, params: &[f64], grad: &mut [f64]) -> f64 {
        let (w, b) = params.split_at(self.width);
        let b = b[0];
        grad.iter_mut().for_each(|g| *g = 0.0);
        let mut loss = 0.0;
        for (f, &positive) in self.features.iter().zip(self.labels) {
            let s = b + w.iter().zip(f.values()).map(|(a, x)| a * x).sum::<f64>();
            let y = if positive { 1.0 } else { -1.0 };
            loss += softplus(-y * s);
            // d/ds softplus(−y s) = −y σ(−y s)
            let r = -y * sigmoid(-y * s);
            for (g, x) in grad[..self.width].iter_mut().zip(f.values()) {
                *g += r * x;
            }
            grad[self.width] += r;
        }
        let mut penalty = 0.0;
        for (g, wv) in grad[..self.width].iter_mut().zip(w) {
            penalty += wv * wv;
            *g += self.inv_c * wv;
        }
        loss + 0.5 * self.inv_c * penalty
    }
}

/// Fit the gate on `(features, is_seen)` pairs. Positives are samples of
/// seen classes; negatives are held-out-class samples scored by experts that
/// never trained on them. Calibration starts at `γ = 1, β = 0`.
pub fn train_gate(
    features: &[GateFeatureVector],
    is_seen: &[bool],
    feature_cfg: &GateFeatureConfig,
    cfg: &ExpertTrainingConfig,
) -> Result<GateModel> {
    cfg.validate()?;
    if features.len() != is_seen.len() {
        return Err(Error::DimensionMismatch {
            expected: features.len(),
            got: is_seen.len(),
        });
    }
    if !is_seen.iter().any(|&l| l) || !is_seen.iter().any(|&l| !l) {
        return Err(Error::NeedBothGateLabels);
    }
    let width = feature_cfg.len();
    if let Some(bad) = features.iter().find(|f| f.len() != width) {
        return Err(Error::DimensionMismatch {
            expected: width,
            got: bad.len(),
        });
    }
    let objective = BinaryLogisticObjective {
        features,
        labels: is_seen,
        width,
        inv_c: 1.0 / cfg.c,
    };
    let min = minimize(&objective, vec![0.0; width + 1], cfg.solver_options());
    Ok(GateModel {
        w: min.x[..width].to_vec(),
        b: min.x[width],
        gamma: 1.0,
        beta: 0.0,
        k_seen: feature_cfg.k_seen.get(),
        k_unseen: feature_cfg.k_unseen,
        temperature: feature_cfg.temperature.get(),
    })
}

//! The ablation variants: which gate, which combination rule, which smoothing.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::Serialize;

use super::config::{linspace, Config};
use super::pipeline::{EvalData, GateSpec, Prepared};
use super::tune::{tune_combiner, tune_gate_config, Candidate, CombinerTuning, GateCell};
use crate::combiner::{Combination, SmoothingConfig, SmoothingMode};
use crate::error::{Error, Result};
use crate::eval::{ausuc, ood_report, seen_unseen_curve, CurvePoint, MetricsReport, OodReport};
use crate::io::{write_curve, write_json, write_table, MetricsSummary};
use crate::score::{ClassId, Temperature};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
#[serde(into = "String")]
pub enum Variant {
    IndependentHard,
    IndependentSoft,
    CbGating,
    AdaptiveSmoothing,
    Cosmo,
    MaxSoftmax1,
    MaxSoftmax3,
    CbGating1,
    CbGating3,
    CbGating3NoZs,
    Lambda0,
    ConstSmoothing,
    Cs,
}

impl Variant {
    pub const ALL: [Variant; 13] = [
        Variant::IndependentHard,
        Variant::IndependentSoft,
        Variant::CbGating,
        Variant::AdaptiveSmoothing,
        Variant::Cosmo,
        Variant::MaxSoftmax1,
        Variant::MaxSoftmax3,
        Variant::CbGating1,
        Variant::CbGating3,
        Variant::CbGating3NoZs,
        Variant::Lambda0,
        Variant::ConstSmoothing,
        Variant::Cs,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::IndependentHard => "independent-hard",
            Variant::IndependentSoft => "independent-soft",
            Variant::CbGating => "cb-gating",
            Variant::AdaptiveSmoothing => "adaptive-smoothing",
            Variant::Cosmo => "cosmo",
            Variant::MaxSoftmax1 => "max-softmax-1",
            Variant::MaxSoftmax3 => "max-softmax-3",
            Variant::CbGating1 => "cb-gating-1",
            Variant::CbGating3 => "cb-gating-3",
            Variant::CbGating3NoZs => "cb-gating-3-no-zs",
            Variant::Lambda0 => "lambda-0",
            Variant::ConstSmoothing => "const-smoothing",
            Variant::Cs => "cs",
        }
    }

    fn recipe(self) -> Recipe {
        use GateChoice::*;
        use Smoothing::*;
        let (gate, combination, smoothing) = match self {
            Variant::IndependentHard => (MaxSoftmax(1.0), Combination::Hard, Off),
            Variant::IndependentSoft | Variant::MaxSoftmax1 => (MaxSoftmax(1.0), Combination::Soft, Off),
            Variant::MaxSoftmax3 => (MaxSoftmax(3.0), Combination::Soft, Off),
            Variant::CbGating => (Confidence { temperature: None, use_zs: true }, Combination::Soft, Off),
            Variant::CbGating1 => (Confidence { temperature: Some(1.0), use_zs: true }, Combination::Soft, Off),
            Variant::CbGating3 => (Confidence { temperature: Some(3.0), use_zs: true }, Combination::Soft, Off),
            Variant::CbGating3NoZs => (Confidence { temperature: Some(3.0), use_zs: false }, Combination::Soft, Off),
            Variant::AdaptiveSmoothing => (MaxSoftmax(1.0), Combination::Soft, Adaptive),
            Variant::Cosmo => (Confidence { temperature: None, use_zs: true }, Combination::Soft, Adaptive),
            Variant::Lambda0 => (MaxSoftmax(1.0), Combination::Soft, Fixed(0.0)),
            Variant::ConstSmoothing => (MaxSoftmax(1.0), Combination::Soft, TunedConstant),
            Variant::Cs => (Stacking, Combination::Hard, Off),
        };
        Recipe {
            gate,
            combination,
            smoothing,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl From<Variant> for String {
    fn from(v: Variant) -> String {
        v.name().to_owned()
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Variant> {
        Variant::ALL
            .iter()
            .copied()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::UnknownVariant {
                name: s.to_owned(),
                valid: Variant::ALL.map(Variant::name).join(", "),
            })
    }
}

#[derive(Clone, Copy, Debug)]
enum GateChoice {
    MaxSoftmax(f64),
    /// `temperature: None` searches the full T grid; `Some(t)` searches K only.
    Confidence { temperature: Option<f64>, use_zs: bool },
    Stacking,
}

#[derive(Clone, Copy, Debug)]
enum Smoothing {
    Off,
    Adaptive,
    Fixed(f64),
    TunedConstant,
}

#[derive(Clone, Copy, Debug)]
struct Recipe {
    gate: GateChoice,
    combination: Combination,
    smoothing: Smoothing,
}

/// Everything that determined a variant's numbers.
#[derive(Clone, Debug, Serialize)]
pub struct Provenance {
    pub variant: Variant,
    pub seed: u64,
    pub gate: Option<GateSpec>,
    pub gate_table: Vec<GateCell>,
    pub combination: Combination,
    pub smoothing: SmoothingMode,
    pub gamma: Option<f64>,
    pub beta: Option<f64>,
    pub stacking_c: Option<f64>,
    /// What the curve sweeps and what stays fixed while it does.
    pub sweep: String,
    pub seen_score_kind: crate::score::ScoreKind,
    pub zs_score_kind: crate::score::ScoreKind,
    pub config: Config,
}

#[derive(Clone, Debug, Serialize)]
pub struct VariantResult {
    pub variant: Variant,
    /// GZSL-Val at the selected operating point.
    pub val: MetricsReport,
    pub test: MetricsReport,
    pub ausuc: f64,
    /// Seen/unseen detection quality of the gate on Gating-Val.
    pub ood: Option<OodReport>,
    #[serde(skip)]
    pub curve: Vec<CurvePoint>,
    #[serde(skip)]
    pub candidates: Vec<Candidate>,
    #[serde(skip)]
    pub test_predictions: Vec<ClassId>,
    pub provenance: Provenance,
}

impl VariantResult {
    pub fn summary(&self) -> MetricsSummary {
        MetricsSummary {
            acc_tr: self.test.acc_tr,
            acc_ts: self.test.acc_ts,
            acc_h: self.test.acc_h,
            ausuc: Some(self.ausuc),
            ood_auc: self.ood.as_ref().map(|o| o.auc),
            fpr_at_95_tpr: self.ood.as_ref().map(|o| o.fpr_at_95_tpr),
        }
    }

    /// `metrics.json`, `val_metrics.json`, `curve.csv`, `candidates.csv`, `provenance.json`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        write_json(&dir.join("metrics.json"), &self.summary())?;
        write_json(
            &dir.join("val_metrics.json"),
            &MetricsSummary {
                acc_tr: self.val.acc_tr,
                acc_ts: self.val.acc_ts,
                acc_h: self.val.acc_h,
                ausuc: None,
                ood_auc: None,
                fpr_at_95_tpr: None,
            },
        )?;
        write_curve(&dir.join("curve.csv"), &self.curve)?;
        let rows: Vec<Vec<f64>> = self
            .candidates
            .iter()
            .map(|c| vec![c.beta, c.gamma, c.score, (c.pass == super::tune::Pass::Fine) as u8 as f64])
            .collect();
        write_table(&dir.join("candidates.csv"), &["beta", "gamma", "acc_h", "fine"], &rows)?;
        if !self.provenance.gate_table.is_empty() {
            let rows: Vec<Vec<f64>> = self
                .provenance
                .gate_table
                .iter()
                .map(|c| vec![c.temperature, c.k as f64, c.auc])
                .collect();
            write_table(&dir.join("gate_table.csv"), &["temperature", "k", "auc"], &rows)?;
        }
        write_json(&dir.join("provenance.json"), &self.provenance)
    }
}

fn smoothing_config(s: Smoothing, lambda: f64) -> Result<SmoothingConfig> {
    match s {
        Smoothing::Off => Ok(SmoothingConfig::none()),
        Smoothing::Adaptive => Ok(SmoothingConfig::adaptive()),
        Smoothing::Fixed(l) => SmoothingConfig::constant(l),
        Smoothing::TunedConstant => SmoothingConfig::constant(lambda),
    }
}

/// Acc_H of `data` at one operating point.
fn acc_h(
    data: &EvalData,
    raw: &[f64],
    gamma: f64,
    beta: f64,
    smoothing: &SmoothingConfig,
    combination: Combination,
) -> Result<MetricsReport> {
    data.report_predictions(&data.predict(raw, gamma, beta, smoothing, combination)?)
}

/// A β grid spanning every raw score on `raw`, wide enough that both ends
/// saturate the gate.
fn sweep_grid(raw: &[f64], gamma: f64, combination: Combination, n: usize) -> Vec<f64> {
    let lo = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let margin = match combination {
        Combination::Hard => 1e-6 * (hi - lo).max(1.0),
        Combination::Soft => 20.0 / gamma,
    };
    linspace(lo - margin, hi + margin, n)
}

struct GateSelection {
    spec: GateSpec,
    table: Vec<GateCell>,
    beta_grid: Vec<f64>,
}

fn select_gate(choice: GateChoice, prepared: &Prepared, cfg: &Config) -> Result<Option<GateSelection>> {
    match choice {
        GateChoice::Stacking => Ok(None),
        GateChoice::MaxSoftmax(t) => Ok(Some(GateSelection {
            spec: GateSpec::MaxSoftmax {
                temperature: Temperature::new(t)?,
            },
            table: vec![],
            beta_grid: cfg.grid.max_softmax_beta.clone(),
        })),
        GateChoice::Confidence { temperature, use_zs } => {
            let temps = temperature.map(|t| vec![t]).unwrap_or_else(|| cfg.grid.temperature.clone());
            let tuned = tune_gate_config(&prepared.gate_train, &prepared.gating_val, &temps, &cfg.grid.k, use_zs, &cfg.gate)?;
            Ok(Some(GateSelection {
                spec: GateSpec::ConfidenceBased { model: tuned.model },
                table: tuned.table,
                beta_grid: cfg.grid.beta.clone(),
            }))
        }
    }
}

/// Tune, evaluate and trace the seen–unseen curve for one variant.
pub fn run_variant(variant: Variant, prepared: &Prepared, cfg: &Config) -> Result<VariantResult> {
    let recipe = variant.recipe();
    let (val, test) = (&prepared.val, &prepared.test);
    let provenance = |gate: Option<GateSpec>, table, smoothing, gamma, beta, c, sweep: &str| Provenance {
        variant,
        seed: cfg.seed,
        gate,
        gate_table: table,
        combination: recipe.combination,
        smoothing,
        gamma,
        beta,
        stacking_c: c,
        sweep: sweep.to_owned(),
        seen_score_kind: test.seen_table.kind(),
        zs_score_kind: test.zs_table.kind(),
        config: cfg.clone(),
    };

    let Some(gate) = select_gate(recipe.gate, prepared, cfg)? else {
        // Calibrated stacking: tune c on GZSL-Val, sweep c on test.
        let tuning = tune_combiner(&cfg.grid.cs_c, &[1.0], cfg.grid.fine_factor, |c, _| {
            Ok(val.report(&val.predict_stacking(c)?)?.acc_h)
        })?;
        let c = tuning.beta;
        let test_predictions = test.predict_stacking(c)?;
        let grid = linspace(-1.0 - 1e-3, 1.0 + 1e-3, cfg.curve_points);
        let curve = seen_unseen_curve(
            |c| {
                let r = test.report(&test.predict_stacking(c)?)?;
                Ok((r.acc_ts, r.acc_tr))
            },
            &grid,
        )?;
        return Ok(VariantResult {
            variant,
            val: val.report(&val.predict_stacking(c)?)?,
            test: test.report(&test_predictions)?,
            ausuc: ausuc(&curve)?,
            ood: None,
            curve,
            candidates: tuning.candidates,
            test_predictions,
            provenance: provenance(None, vec![], SmoothingMode::None, None, None, Some(c), "c over [-1.001, 1.001]"),
        });
    };

    let val_raw = val.raw_scores(&gate.spec)?;
    let gammas: Vec<f64> = match recipe.combination {
        // γ does not move a hard decision; keep one value.
        Combination::Hard => vec![1.0],
        Combination::Soft => cfg.grid.gamma.clone(),
    };
    let lambdas: Vec<f64> = match recipe.smoothing {
        Smoothing::TunedConstant => cfg.grid.lambda.clone(),
        _ => vec![0.0],
    };
    // One combiner search per λ; the best Acc_H wins, ties to the smaller λ.
    let searches: Vec<(f64, CombinerTuning)> = lambdas
        .par_iter()
        .map(|&lambda| {
            let smoothing = smoothing_config(recipe.smoothing, lambda)?;
            let t = tune_combiner(&gate.beta_grid, &gammas, cfg.grid.fine_factor, |b, g| {
                Ok(acc_h(val, &val_raw, g, b, &smoothing, recipe.combination)?.acc_h)
            })?;
            Ok((lambda, t))
        })
        .collect::<Result<_>>()?;
    let (lambda, tuning) = searches
        .into_iter()
        .reduce(|best, cur| if cur.1.score > best.1.score { cur } else { best })
        .expect("non-empty λ grid");
    let smoothing = smoothing_config(recipe.smoothing, lambda)?;
    let (gamma, beta) = (tuning.gamma, tuning.beta);

    let test_raw = test.raw_scores(&gate.spec)?;
    let test_predictions: Vec<ClassId> = test
        .predict(&test_raw, gamma, beta, &smoothing, recipe.combination)?
        .iter()
        .map(|p| p.predicted_class())
        .collect();
    let grid = sweep_grid(&test_raw, gamma, recipe.combination, cfg.curve_points);
    let curve = seen_unseen_curve(
        |b| {
            let r = acc_h(test, &test_raw, gamma, b, &smoothing, recipe.combination)?;
            Ok((r.acc_ts, r.acc_tr))
        },
        &grid,
    )?;
    let gating_val_raw = gate.spec.raw_scores(&prepared.gating_val.seen, &prepared.gating_val.zs)?;
    let ood = ood_report(&gating_val_raw, &prepared.gating_val.is_seen)?;

    let spec = match gate.spec {
        GateSpec::ConfidenceBased { model } => GateSpec::ConfidenceBased {
            model: model.with_calibration(gamma, beta)?,
        },
        other => other,
    };
    Ok(VariantResult {
        variant,
        val: acc_h(val, &val_raw, gamma, beta, &smoothing, recipe.combination)?,
        test: test.report(&test_predictions)?,
        ausuc: ausuc(&curve)?,
        ood: Some(ood),
        curve,
        candidates: tuning.candidates,
        test_predictions,
        provenance: provenance(
            Some(spec),
            gate.table,
            smoothing.mode,
            Some(gamma),
            Some(beta),
            None,
            "beta over the test raw-score range; gamma, smoothing and gate weights fixed",
        ),
    })
}

/// Run several variants (all of them when `variants` is empty) in the order given.
pub fn ablate(prepared: &Prepared, cfg: &Config, variants: &[Variant]) -> Result<Vec<VariantResult>> {
    let list: Vec<Variant> = if variants.is_empty() { Variant::ALL.to_vec() } else { variants.to_vec() };
    list.par_iter().map(|&v| run_variant(v, prepared, cfg)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
    }

    #[test]
    fn unknown_variant_lists_valid_names() {
        let err = "cosmos".parse::<Variant>().unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("cosmos"));
        for v in Variant::ALL {
            assert!(msg.contains(v.name()), "{msg}");
        }
    }

    #[test]
    fn sweep_grid_saturates() {
        let g = sweep_grid(&[0.0, 1.0], 2.0, Combination::Soft, 5);
        assert_eq!(g.len(), 5);
        assert!(g[0] <= -10.0 && g[4] >= 11.0);
        let g = sweep_grid(&[0.0, 1.0], 2.0, Combination::Hard, 3);
        assert!(g[0] < 0.0 && g[2] > 1.0);
    }
}

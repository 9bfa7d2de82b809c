//! Grid searches: (T, K) for the gate by Gating-Val AUC, and (β, γ) for the
//! combiner by GZSL-Val Acc_H with a coarse-then-fine pass over β.

use rayon::prelude::*;
use serde::Serialize;

use super::pipeline::GateData;
use crate::error::{Error, Result};
use crate::eval::ood_auc;
use crate::experts::ExpertTrainingConfig;
use crate::gate::{build_gate_features, train_gate, GateFeatureConfig, GateFeatureVector, GateModel};
use crate::score::{Temperature, TopK};

fn features(data: &GateData, cfg: &GateFeatureConfig) -> Result<Vec<GateFeatureVector>> {
    data.seen
        .iter()
        .zip(&data.zs)
        .map(|(s, z)| build_gate_features(s, z, cfg))
        .collect()
}

/// Feature layout for one grid cell; `use_zs = false` drops the zero-shot block.
pub fn gate_feature_config(temperature: f64, k: usize, use_zs: bool) -> Result<GateFeatureConfig> {
    let (t, k) = (Temperature::new(temperature)?, TopK::new(k)?);
    Ok(if use_zs {
        GateFeatureConfig::new(k, t)
    } else {
        GateFeatureConfig::without_zs(k, t)
    })
}

pub fn fit_gate(train: &GateData, feature_cfg: &GateFeatureConfig, cfg: &ExpertTrainingConfig) -> Result<GateModel> {
    train_gate(&features(train, feature_cfg)?, &train.is_seen, feature_cfg, cfg)
}

/// Raw gate scores on `data` (calibration does not change the ranking).
pub fn gate_scores(model: &GateModel, data: &GateData) -> Result<Vec<f64>> {
    features(data, &model.feature_config()?)?
        .iter()
        .map(|f| model.raw_score(f))
        .collect()
}

pub fn gate_auc(model: &GateModel, data: &GateData) -> Result<f64> {
    ood_auc(&gate_scores(model, data)?, &data.is_seen)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct GateCell {
    pub temperature: f64,
    pub k: usize,
    pub auc: f64,
}

#[derive(Clone, Debug)]
pub struct GateTuning {
    pub temperature: f64,
    pub k: usize,
    pub auc: f64,
    /// Gate refit at the winning cell.
    pub model: GateModel,
    /// Every cell in grid order (temperature-major).
    pub table: Vec<GateCell>,
}

/// Better AUC wins; ties go to smaller K, then smaller T.
fn gate_cell_better(a: &GateCell, b: &GateCell) -> bool {
    a.auc > b.auc || (a.auc == b.auc && (a.k < b.k || (a.k == b.k && a.temperature < b.temperature)))
}

/// Exhaustive (T, K) search; the gate is refit for every cell on `train` and
/// scored by AUC on `val`.
pub fn tune_gate_config(
    train: &GateData,
    val: &GateData,
    temperatures: &[f64],
    ks: &[usize],
    use_zs: bool,
    cfg: &ExpertTrainingConfig,
) -> Result<GateTuning> {
    if temperatures.is_empty() || ks.is_empty() {
        return Err(Error::invalid("empty (T, K) grid"));
    }
    let cells: Vec<(f64, usize)> = temperatures.iter().flat_map(|&t| ks.iter().map(move |&k| (t, k))).collect();
    let table: Vec<GateCell> = cells
        .par_iter()
        .map(|&(temperature, k)| {
            let model = fit_gate(train, &gate_feature_config(temperature, k, use_zs)?, cfg)?;
            Ok(GateCell {
                temperature,
                k,
                auc: gate_auc(&model, val)?,
            })
        })
        .collect::<Result<_>>()?;
    let best = table
        .iter()
        .copied()
        .reduce(|best, c| if gate_cell_better(&c, &best) { c } else { best })
        .expect("non-empty grid");
    let model = fit_gate(train, &gate_feature_config(best.temperature, best.k, use_zs)?, cfg)?;
    Ok(GateTuning {
        temperature: best.temperature,
        k: best.k,
        auc: best.auc,
        model,
        table,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Pass {
    Coarse,
    Fine,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Candidate {
    pub beta: f64,
    pub gamma: f64,
    pub score: f64,
    pub pass: Pass,
}

#[derive(Clone, Debug)]
pub struct CombinerTuning {
    pub beta: f64,
    pub gamma: f64,
    pub score: f64,
    pub candidates: Vec<Candidate>,
}

/// Higher score wins; ties go to smaller β, then smaller γ.
fn candidate_better(a: &Candidate, b: &Candidate) -> bool {
    a.score > b.score || (a.score == b.score && (a.beta < b.beta || (a.beta == b.beta && a.gamma < b.gamma)))
}

fn best_of(candidates: &[Candidate]) -> Candidate {
    candidates
        .iter()
        .copied()
        .reduce(|best, c| if candidate_better(&c, &best) { c } else { best })
        .expect("non-empty candidate list")
}

/// The fine β grid around `beta_grid[i]`: `fine_factor` steps to each
/// neighbouring coarse value, winner included.
pub fn fine_beta_grid(beta_grid: &[f64], i: usize, fine_factor: usize) -> Vec<f64> {
    let centre = beta_grid[i];
    let lo = if i > 0 { beta_grid[i - 1] } else { centre };
    let hi = beta_grid.get(i + 1).copied().unwrap_or(centre);
    let n = fine_factor as f64;
    let mut grid: Vec<f64> = Vec::with_capacity(2 * fine_factor + 1);
    if lo < centre {
        grid.extend((0..fine_factor).map(|j| lo + (centre - lo) * j as f64 / n));
    }
    grid.push(centre);
    if hi > centre {
        grid.extend((1..=fine_factor).map(|j| centre + (hi - centre) * j as f64 / n));
    }
    grid
}

/// Coarse search over β × γ, then a fine β search (γ fixed at the coarse
/// winner) spanning one coarse step on either side of the winning β.
pub fn tune_combiner<F>(beta_grid: &[f64], gamma_grid: &[f64], fine_factor: usize, objective: F) -> Result<CombinerTuning>
where
    F: Fn(f64, f64) -> Result<f64> + Sync,
{
    if beta_grid.is_empty() || gamma_grid.is_empty() {
        return Err(Error::invalid("empty (β, γ) grid"));
    }
    if beta_grid.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::invalid("β grid must be strictly increasing"));
    }
    let pairs: Vec<(f64, f64)> = beta_grid.iter().flat_map(|&b| gamma_grid.iter().map(move |&g| (b, g))).collect();
    let evaluate = |pairs: &[(f64, f64)], pass: Pass| -> Result<Vec<Candidate>> {
        pairs
            .par_iter()
            .map(|&(beta, gamma)| {
                Ok(Candidate {
                    beta,
                    gamma,
                    score: objective(beta, gamma)?,
                    pass,
                })
            })
            .collect()
    };
    let mut candidates = evaluate(&pairs, Pass::Coarse)?;
    let coarse = best_of(&candidates);
    if beta_grid.len() > 1 && fine_factor > 1 {
        let i = beta_grid.iter().position(|&b| b == coarse.beta).expect("winner is on the grid");
        let fine: Vec<(f64, f64)> = fine_beta_grid(beta_grid, i, fine_factor)
            .into_iter()
            .map(|b| (b, coarse.gamma))
            .collect();
        candidates.extend(evaluate(&fine, Pass::Fine)?);
    }
    let best = best_of(&candidates);
    Ok(CombinerTuning {
        beta: best.beta,
        gamma: best.gamma,
        score: best.score,
        candidates,
    })
}

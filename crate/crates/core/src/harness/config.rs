//! JSON run configuration. Every field has a default, so `{}` is a valid file.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::splits::SplitConfig;
use super::synth::SyntheticSpec;
use crate::error::{Error, Result};
use crate::experts::ExpertTrainingConfig;

/// `n` evenly spaced values from `lo` to `hi` inclusive.
pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => vec![],
        1 => vec![lo],
        _ => (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HyperGrid {
    /// Threshold grid for the confidence-based gate (raw logit scale).
    pub beta: Vec<f64>,
    pub gamma: Vec<f64>,
    pub temperature: Vec<f64>,
    pub k: Vec<usize>,
    /// Threshold grid for max-softmax gates, whose score lives in [0, 1].
    pub max_softmax_beta: Vec<f64>,
    /// Constant smoothing weights.
    pub lambda: Vec<f64>,
    /// Calibration constants for calibrated stacking.
    pub cs_c: Vec<f64>,
    /// The fine β pass is this many times denser than the coarse grid.
    pub fine_factor: usize,
}

impl Default for HyperGrid {
    fn default() -> Self {
        HyperGrid {
            beta: linspace(-10.0, 10.0, 21),
            gamma: vec![0.25, 0.5, 1.0, 2.0, 4.0, 8.0, 16.0],
            temperature: vec![1.0, 2.0, 3.0, 5.0, 10.0],
            k: vec![1, 2, 3, 5, 10],
            max_softmax_beta: linspace(0.0, 1.0, 21),
            lambda: linspace(0.0, 0.9, 10),
            cs_c: linspace(-1.0, 1.0, 21),
            fine_factor: 10,
        }
    }
}

fn check_increasing(name: &str, v: &[f64]) -> Result<()> {
    if v.is_empty() {
        return Err(Error::invalid(format!("grid `{name}` is empty")));
    }
    if v.iter().any(|x| !x.is_finite()) || v.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::invalid(format!("grid `{name}` must be finite and strictly increasing")));
    }
    Ok(())
}

impl HyperGrid {
    pub fn validate(&self) -> Result<()> {
        check_increasing("beta", &self.beta)?;
        check_increasing("gamma", &self.gamma)?;
        check_increasing("temperature", &self.temperature)?;
        check_increasing("max_softmax_beta", &self.max_softmax_beta)?;
        check_increasing("lambda", &self.lambda)?;
        check_increasing("cs_c", &self.cs_c)?;
        if self.gamma[0] <= 0.0 || self.temperature[0] <= 0.0 {
            return Err(Error::invalid("gamma and temperature grids must be > 0"));
        }
        if self.lambda[0] < 0.0 || *self.lambda.last().unwrap() > 1.0 {
            return Err(Error::invalid("lambda grid must lie in [0, 1]"));
        }
        if self.k.is_empty() || self.k.contains(&0) {
            return Err(Error::invalid("K grid must be non-empty with K ≥ 1"));
        }
        if self.fine_factor == 0 {
            return Err(Error::invalid("fine_factor must be ≥ 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    /// Master seed for splits; `--seed` also overrides `synthetic.seed`.
    pub seed: u64,
    pub synthetic: SyntheticSpec,
    pub splits: SplitConfig,
    pub seen_expert: ExpertTrainingConfig,
    pub zs_expert: ExpertTrainingConfig,
    pub gate: ExpertTrainingConfig,
    /// Also use Gating-Train samples of unseen-val classes as gate negatives.
    pub unseen_val_gate_negatives: bool,
    pub grid: HyperGrid,
    pub curve_points: usize,
    /// Variants run by `ablate`; empty means all.
    pub variants: Vec<String>,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            seed: 7,
            synthetic: SyntheticSpec::default(),
            splits: SplitConfig::default(),
            seen_expert: ExpertTrainingConfig::default(),
            zs_expert: ExpertTrainingConfig::default(),
            gate: ExpertTrainingConfig::default(),
            unseen_val_gate_negatives: false,
            grid: HyperGrid::default(),
            curve_points: 201,
            variants: vec![],
        }
    }
}

impl Config {
    pub fn load(path: &Path) -> Result<Config> {
        let config: Config = crate::io::read_json(path)?;
        config.validate()?;
        Ok(config)
    }

    pub fn with_seed(mut self, seed: u64) -> Config {
        self.seed = seed;
        self.synthetic.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.synthetic.validate()?;
        self.seen_expert.validate()?;
        self.zs_expert.validate()?;
        self.gate.validate()?;
        self.grid.validate()?;
        if self.curve_points < 2 {
            return Err(Error::invalid("curve_points must be ≥ 2"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linspace_endpoints() {
        let v = linspace(-10.0, 10.0, 21);
        assert_eq!(v.len(), 21);
        assert_eq!(v[0], -10.0);
        assert_eq!(v[10], 0.0);
        assert_eq!(v[20], 10.0);
        assert_eq!(linspace(3.0, 4.0, 1), vec![3.0]);
    }

    #[test]
    fn empty_json_is_default() {
        let c: Config = serde_json::from_str("{}").unwrap();
        assert_eq!(c, Config::default());
        c.validate().unwrap();
    }

    #[test]
    fn unknown_fields_rejected() {
        assert!(serde_json::from_str::<Config>(r#"{"sede": 3}"#).is_err());
    }

    #[test]
    fn bad_grids_rejected() {
        let mut c = Config::default();
        c.grid.gamma = vec![0.0, 1.0];
        assert!(c.validate().is_err());
        let mut c = Config::default();
        c.grid.beta = vec![1.0, 1.0];
        assert!(c.validate().is_err());
        let mut c = Config::default();
        c.grid.k = vec![0];
        assert!(c.validate().is_err());
    }

    #[test]
    fn partial_json_overrides() {
        let c: Config = serde_json::from_str(r#"{"seed": 3, "grid": {"k": [2]}}"#).unwrap();
        assert_eq!(c.seed, 3);
        assert_eq!(c.grid.k, vec![2]);
        assert_eq!(c.grid.gamma, HyperGrid::default().gamma);
    }
}

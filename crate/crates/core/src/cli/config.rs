//! Experiment configuration documents.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::costs::{CostFn, CostSpec, TerminalCost};
use crate::error::{Error, Result};
use crate::system::InstanceSpec;

/// Terminal cost as written in a configuration: `"zero"`, `"indicator"` or
/// `{"smooth": {"weight": w}}` for ½w‖x‖².
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum TerminalSpec {
    #[default]
    Zero,
    Indicator,
    Smooth {
        weight: f64,
    },
}

impl TerminalSpec {
    pub fn build(&self, n: usize) -> Result<TerminalCost> {
        Ok(match *self {
            TerminalSpec::Zero => TerminalCost::Zero,
            TerminalSpec::Indicator => TerminalCost::IndicatorOrigin,
            TerminalSpec::Smooth { weight } => {
                TerminalCost::Smooth(CostFn::scaled_identity(weight, n)?)
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "controller", rename_all = "snake_case", deny_unknown_fields)]
pub enum ControllerSpec {
    Pck {
        k: usize,
        #[serde(default)]
        terminal: TerminalSpec,
    },
    Pckh {
        k: usize,
        h: usize,
        #[serde(default)]
        terminal: TerminalSpec,
    },
    Opt,
}

fn default_trials() -> usize {
    50
}
fn default_half() -> f64 {
    0.5
}
fn default_eta() -> f64 {
    1.0
}
fn default_samples() -> usize {
    100
}
fn default_soco_p() -> usize {
    8
}
fn default_points() -> usize {
    3
}

/// Parameters of the verification suites.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerificationSpec {
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default = "default_half")]
    pub delta: f64,
    #[serde(default = "default_half")]
    pub epsilon: f64,
    #[serde(default = "default_eta")]
    pub eta: f64,
    /// Window start for the window-level suites.
    #[serde(default)]
    pub t: usize,
    /// Window length for the window-level suites; derived from d when absent.
    #[serde(default)]
    pub p: Option<usize>,
    /// Prediction window for the closed-loop suites; the relevant threshold when absent.
    #[serde(default)]
    pub k: Option<usize>,
    /// Number of random matrices for the banded suite.
    #[serde(default = "default_samples")]
    pub samples: usize,
    /// Decision points of the random SOCO instance.
    #[serde(default = "default_soco_p")]
    pub soco_p: usize,
    /// Points per window for the switching-cost Hessian check.
    #[serde(default = "default_points")]
    pub points: usize,
    #[serde(default)]
    pub terminal: TerminalSpec,
}

impl Default for VerificationSpec {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all verification fields have defaults")
    }
}

fn default_costs() -> CostSpec {
    CostSpec::Quadratic {
        q_min: 1.0,
        q_max: 1.0,
        r_min: 1.0,
        r_max: 1.0,
    }
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Seeds the single generator every command draws from.
    pub seed: u64,
    pub instance: InstanceSpec,
    #[serde(default = "default_costs")]
    pub costs: CostSpec,
    #[serde(default)]
    pub controllers: Vec<ControllerSpec>,
    #[serde(default)]
    pub verification: VerificationSpec,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| {
            Error::Configuration(format!(
                "config parse error at line {}, column {}: {e}",
                e.line(),
                e.column()
            ))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let horizon = self.instance.horizon;
        let in_range = |v: usize| (1..=horizon).contains(&v);
        for c in &self.controllers {
            match *c {
                ControllerSpec::Pck { k, .. } if !in_range(k) => {
                    return Err(Error::Configuration(format!(
                        "controller window k = {k} outside [1, {horizon}]"
                    )));
                }
                ControllerSpec::Pckh { k, h, .. } if !in_range(k) || !in_range(h) || h > k => {
                    return Err(Error::Configuration(format!(
                        "replan controller needs 1 <= h <= k <= {horizon} (got k = {k}, h = {h})"
                    )));
                }
                _ => {}
            }
        }
        let v = &self.verification;
        if let Some(k) = v.k {
            if !in_range(k) {
                return Err(Error::Configuration(format!(
                    "verification k = {k} outside [1, {horizon}]"
                )));
            }
        }
        if let Some(p) = v.p {
            if p == 0 || v.t + p > horizon {
                return Err(Error::Configuration(format!(
                    "verification window t = {}, p = {p} exceeds the horizon {horizon}",
                    v.t
                )));
            }
        }
        for (name, val) in [("delta", v.delta), ("epsilon", v.epsilon)] {
            if !(val > 0.0 && val < 1.0) {
                return Err(Error::Configuration(format!(
                    "{name} must lie in (0, 1) (got {val})"
                )));
            }
        }
        if !(v.eta > 0.0) {
            return Err(Error::Configuration(format!(
                "eta must be positive (got {})",
                v.eta
            )));
        }
        Ok(())
    }
}

/// A parsed configuration together with the digest of its source bytes.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: ExperimentConfig,
    pub digest: String,
    pub path: PathBuf,
}

pub fn load(path: &Path) -> Result<LoadedConfig> {
    let bytes = std::fs::read(path)
        .map_err(|e| Error::Configuration(format!("cannot read config {}: {e}", path.display())))?;
    let text = std::str::from_utf8(&bytes)
        .map_err(|_| Error::Configuration(format!("config {} is not UTF-8", path.display())))?;
    let config = ExperimentConfig::parse(text)?;
    let digest = Sha256::digest(&bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect();
    Ok(LoadedConfig {
        config,
        digest,
        path: path.to_path_buf(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str =
        r#"{"seed": 1, "instance": {"family": "random_stable", "n": 2, "m": 1, "T": 10}}"#;

    #[test]
    fn minimal_config_takes_defaults() {
        let cfg = ExperimentConfig::parse(MINIMAL).unwrap();
        assert_eq!(cfg.verification.trials, 50);
        assert_eq!(cfg.output_dir, PathBuf::from("out"));
        assert!(cfg.controllers.is_empty());
    }

    #[test]
    fn controllers_and_terminals_parse() {
        let text = r#"{"seed": 1, "instance": {"family": "random_stable", "n": 2, "m": 1, "T": 10},
            "controllers": [{"controller": "pck", "k": 3, "terminal": "indicator"},
                            {"controller": "pckh", "k": 4, "h": 2, "terminal": {"smooth": {"weight": 2.0}}},
                            {"controller": "opt"}]}"#;
        let cfg = ExperimentConfig::parse(text).unwrap();
        assert_eq!(cfg.controllers.len(), 3);
        assert_eq!(
            cfg.controllers[1],
            ControllerSpec::Pckh {
                k: 4,
                h: 2,
                terminal: TerminalSpec::Smooth { weight: 2.0 }
            }
        );
    }

    #[test]
    fn out_of_range_window_rejected() {
        let text = r#"{"seed": 1, "instance": {"family": "random_stable", "n": 2, "m": 1, "T": 10},
            "controllers": [{"controller": "pck", "k": 11}]}"#;
        assert!(matches!(
            ExperimentConfig::parse(text),
            Err(Error::Configuration(_))
        ));
    }

    #[test]
    fn missing_seed_and_unknown_fields_rejected() {
        let no_seed = r#"{"instance": {"family": "random_stable", "n": 2, "m": 1, "T": 10}}"#;
        let e = ExperimentConfig::parse(no_seed).unwrap_err();
        assert!(e.to_string().contains("line"));
        let extra = r#"{"seed": 1, "bogus": 2, "instance": {"family": "random_stable", "n": 2, "m": 1, "T": 10}}"#;
        assert!(ExperimentConfig::parse(extra).is_err());
    }
}

//! Theory constants and the numerical verification lab.

pub mod banded;
pub mod constants;
pub mod performance;
pub mod sensitivity;
pub mod soco;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::costs::CostModel;
use crate::system::ControllabilityReport;

pub use banded::{random_banded_case, verify_banded_decay, BandedCase, BandedReport};
pub use constants::{window_thresholds, TheoryConstants, Thresholds};
pub use performance::{
    competitive_report, potential_series, regret_sweep, replan_report, verify_iss,
    verify_potential, CompetitiveReport, IssReport, PotentialReport, RegretRow, RegretSweep,
    ReplanReport,
};
pub use sensitivity::{
    verify_cost_smoothness, verify_ltv_sensitivity, verify_one_step_difference,
    verify_opt_stability, verify_switching_smoothness, SensitivityReport, SensitivityVariant,
    SmoothnessReport,
};
pub use soco::{
    verify_reduction, verify_soco_sensitivity, LtvSwitching, QuadraticSwitching, ReductionReport,
    SocoProblem, SocoSolution, SwitchingCost,
};

/// Multiplicative slack on theoretical envelopes; covers solver tolerance only.
pub const REL_SLACK: f64 = 1e-6;
/// Absolute floor below which differences are treated as numerical noise.
pub const ABS_FLOOR: f64 = 1e-12;

pub fn theory_constants(report: &ControllabilityReport, model: &CostModel) -> TheoryConstants {
    TheoryConstants::new(report, model)
}

/// True when `lhs` exceeds `rhs` beyond the allowed slack.
pub fn exceeds(lhs: f64, rhs: f64) -> bool {
    !(lhs <= rhs * (1.0 + REL_SLACK) + ABS_FLOOR)
}

/// lhs / rhs with the conventions 0/0 = 0 and x/0 = ∞.
pub fn ratio(lhs: f64, rhs: f64) -> f64 {
    if rhs > 0.0 {
        lhs / rhs
    } else if lhs <= ABS_FLOOR {
        0.0
    } else {
        f64::INFINITY
    }
}

/// Outcome of a batch of pointwise inequality checks.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckReport {
    pub name: String,
    pub checks: usize,
    pub violations: usize,
    /// Largest lhs/rhs observed.
    pub max_ratio: f64,
    /// Up to ten violating cases.
    pub details: Vec<String>,
}

impl CheckReport {
    pub fn new(name: &str) -> Self {
        Self {
            name: name.to_string(),
            checks: 0,
            violations: 0,
            max_ratio: 0.0,
            details: Vec::new(),
        }
    }

    pub fn record(&mut self, lhs: f64, rhs: f64, context: impl FnOnce() -> String) {
        self.checks += 1;
        let r = ratio(lhs, rhs);
        if r > self.max_ratio || r.is_nan() {
            self.max_ratio = r;
        }
        if exceeds(lhs, rhs) {
            self.violations += 1;
            if self.details.len() < 10 {
                self.details
                    .push(format!("{}: lhs {lhs:e} > rhs {rhs:e}", context()));
            }
        }
    }

    pub fn merge(&mut self, other: CheckReport) {
        self.checks += other.checks;
        self.violations += other.violations;
        if other.max_ratio > self.max_ratio || other.max_ratio.is_nan() {
            self.max_ratio = other.max_ratio;
        }
        for d in other.details {
            if self.details.len() < 10 {
                self.details.push(d);
            }
        }
    }

    pub fn passed(&self) -> bool {
        self.violations == 0
    }
}

/// Independent generator for trial `index` of a batch seeded with `seed`.
pub(crate) fn trial_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng
}

pub(crate) fn gaussian(rng: &mut ChaCha8Rng, dim: usize) -> DVector<f64> {
    DVector::from_fn(dim, |_, _| rng.sample::<f64, _>(StandardNormal))
}

/// Least-squares line through (x, y); returns (slope, intercept, R²).
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> Option<(f64, f64, f64)> {
    let n = xs.len();
    if n < 2 || ys.len() != n {
        return None;
    }
    let nf = n as f64;
    let mx = xs.iter().sum::<f64>() / nf;
    let my = ys.iter().sum::<f64>() / nf;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let slope = sxy / sxx;
    let r2 = if syy == 0.0 {
        1.0
    } else {
        sxy * sxy / (sxx * syy)
    };
    Some((slope, my - slope * mx, r2))
}

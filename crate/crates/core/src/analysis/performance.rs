//! Closed-loop diagnostics: regret sweeps, input-to-state bounds, competitive ratios and
//! the potential between online and offline trajectories.

use rayon::prelude::*;
use serde::Serialize;

use super::constants::{window_thresholds, TheoryConstants};
use super::{linear_fit, CheckReport};
use crate::controllers::{run_opt, run_pc_k, run_pc_kh, ControllerTag, RunRecord};
use crate::costs::{CostModel, TerminalCost};
use crate::error::{Error, Result};
use crate::format;
use crate::system::LtvSystem;

/// Regret below this is treated as solver noise and left out of the decay fit.
pub const REGRET_FIT_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RegretRow {
    pub k: usize,
    pub cost_alg: f64,
    pub cost_opt: f64,
    pub regret: f64,
    /// λ^k T.
    pub bound_shape: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RegretSweep {
    pub rows: Vec<RegretRow>,
    /// Windows whose run failed, with the error.
    pub failures: Vec<(usize, String)>,
    /// Fit of ln(regret) against k over rows with regret above the noise floor.
    pub slope: Option<f64>,
    pub intercept: Option<f64>,
    pub r2: Option<f64>,
    pub fit_points: usize,
    pub lambda_theory: f64,
}

impl RegretSweep {
    pub fn to_csv(&self) -> String {
        let rows = self.rows.iter().map(|r| {
            vec![
                r.k.to_string(),
                format::float(r.cost_alg),
                format::float(r.cost_opt),
                format::float(r.regret),
                format::float(r.bound_shape),
            ]
        });
        format::csv(
            &["k", "cost_alg", "cost_opt", "regret", "bound_shape"],
            rows,
        )
    }

    pub fn row(&self, k: usize) -> Option<&RegretRow> {
        self.rows.iter().find(|r| r.k == k)
    }
}

/// Runs PC_k for every k and compares with the offline optimum; per-k failures are recorded and
/// the sweep continues.
pub fn regret_sweep(
    sys: &LtvSystem,
    model: &CostModel,
    tc: &TheoryConstants,
    k_values: &[usize],
    terminal: &TerminalCost,
) -> Result<RegretSweep> {
    if k_values.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Configuration(
            "k grid must be strictly increasing".into(),
        ));
    }
    let opt = run_opt(sys, model)?;
    let horizon = sys.horizon() as f64;
    let outcomes: Vec<(usize, Result<RunRecord>)> = k_values
        .par_iter()
        .map(|&k| (k, run_pc_k(sys, model, k, terminal)))
        .collect();
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for (k, out) in outcomes {
        match out {
            Ok(rec) => rows.push(RegretRow {
                k,
                cost_alg: rec.total_cost,
                cost_opt: opt.total_cost,
                regret: rec.total_cost - opt.total_cost,
                bound_shape: tc.lambda_pow(k as f64) * horizon,
            }),
            Err(e) => failures.push((k, e.to_string())),
        }
    }
    let (xs, ys): (Vec<f64>, Vec<f64>) = rows
        .iter()
        .filter(|r| r.regret > REGRET_FIT_FLOOR)
        .map(|r| (r.k as f64, r.regret.ln()))
        .unzip();
    let fit = linear_fit(&xs, &ys);
    Ok(RegretSweep {
        rows,
        failures,
        slope: fit.map(|f| f.0),
        intercept: fit.map(|f| f.1),
        r2: fit.map(|f| f.2),
        fit_points: xs.len(),
        lambda_theory: tc.lambda,
    })
}

fn window_of(record: &RunRecord) -> Result<usize> {
    match &record.tag {
        ControllerTag::Pck { k, .. } => Ok(*k),
        other => Err(Error::Precondition(format!(
            "expected a PC_k run, got {}",
            other.label()
        ))),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IssReport {
    pub k: usize,
    pub k_threshold: usize,
    pub delta: f64,
    pub disturbance_bound: f64,
    /// Checks on t with t + k ≤ T.
    pub first_branch: CheckReport,
    /// Checks on t with t + k > T.
    pub second_branch: CheckReport,
}

impl IssReport {
    pub fn passed(&self) -> bool {
        self.first_branch.passed() && self.second_branch.passed()
    }
}

/// Checks ‖x_t‖ against both branches of the input-to-state bound for t = 0..T.
pub fn verify_iss(
    sys: &LtvSystem,
    record: &RunRecord,
    tc: &TheoryConstants,
    delta: f64,
    disturbance_bound: f64,
) -> Result<IssReport> {
    let k = window_of(record)?;
    let th = window_thresholds(tc, delta, 0.5)?;
    if k < th.k_regret {
        return Err(Error::Precondition(format!(
            "k = {k} is below the stability threshold {} for delta = {delta}",
            th.k_regret
        )));
    }
    if disturbance_bound + 1e-12 < sys.disturbance_sup() {
        return Err(Error::Precondition(format!(
            "disturbance bound {disturbance_bound} is below max ‖w_t‖ = {}",
            sys.disturbance_sup()
        )));
    }
    let horizon = sys.horizon();
    if record.horizon() != horizon {
        return Err(Error::Validation("run and instance horizons differ".into()));
    }
    let x0 = sys.x0().norm();
    let mut first = CheckReport::new("iss-first-branch");
    let mut second = CheckReport::new("iss-second-branch");
    for (t, x) in record.trajectory.states.iter().enumerate() {
        let bound = tc.iss_bound(t, horizon, k, delta, x0, disturbance_bound);
        let target = if t + k <= horizon {
            &mut first
        } else {
            &mut second
        };
        target.record(x.norm(), bound, || format!("t = {t}"));
    }
    Ok(IssReport {
        k,
        k_threshold: th.k_regret,
        delta,
        disturbance_bound,
        first_branch: first,
        second_branch: second,
    })
}

/// φ_t = ‖x_t − x_t*‖² for t = 0..T.
pub fn potential_series(record: &RunRecord, opt: &RunRecord) -> Result<Vec<f64>> {
    if record.horizon() != opt.horizon() {
        return Err(Error::Validation(format!(
            "horizon mismatch: {} vs {}",
            record.horizon(),
            opt.horizon()
        )));
    }
    Ok(record
        .trajectory
        .states
        .iter()
        .zip(&opt.trajectory.states)
        .map(|(a, b)| (a - b).norm_squared())
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PotentialReport {
    pub k: usize,
    pub epsilon: f64,
    /// Σ_{t=1}^{T−k} φ_t.
    pub sum: f64,
    /// Σ_{i=1}^{T} f_i(x_i*).
    pub opt_state_cost: f64,
    pub bound: f64,
    pub passed: bool,
}

/// Checks Σ_{t=1}^{T−k} φ_t ≤ coefficient · λ^{2k} · Σ_i f_i(x_i*).
pub fn verify_potential(
    model: &CostModel,
    tc: &TheoryConstants,
    record: &RunRecord,
    opt: &RunRecord,
    epsilon: f64,
) -> Result<PotentialReport> {
    let k = window_of(record)?;
    let phi = potential_series(record, opt)?;
    let horizon = record.horizon();
    let sum: f64 = phi[1..=horizon.saturating_sub(k)].iter().sum();
    let opt_state_cost: f64 = (1..=horizon)
        .map(|i| model.f(i).value(&opt.trajectory.states[i]))
        .sum();
    let bound = tc.potential_bound(k, epsilon, opt_state_cost);
    Ok(PotentialReport {
        k,
        epsilon,
        sum,
        opt_state_cost,
        bound,
        passed: !super::exceeds(sum, bound),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompetitiveReport {
    pub k: usize,
    pub epsilon: f64,
    pub k_threshold: usize,
    pub cost_alg: f64,
    pub cost_opt: f64,
    pub ratio: f64,
    /// 1 + λ^k · coefficient.
    pub bound: f64,
    /// The form before (1 + λ^k) is bounded by 2.
    pub bound_sharp: f64,
    pub within_bound: bool,
    /// ratio ≥ 1 − 1e−8.
    pub above_one: bool,
    pub potential: PotentialReport,
}

impl CompetitiveReport {
    pub fn passed(&self) -> bool {
        self.within_bound && self.above_one && self.potential.passed
    }
}

/// Runs PC_k with the indicator terminal cost and compares its cost with the offline optimum.
pub fn competitive_report(
    sys: &LtvSystem,
    model: &CostModel,
    tc: &TheoryConstants,
    k: usize,
    epsilon: f64,
) -> Result<CompetitiveReport> {
    let th = window_thresholds(tc, 0.5, epsilon)?;
    if k < tc.d {
        return Err(Error::Precondition(format!(
            "k = {k} is below the controllability index d = {}",
            tc.d
        )));
    }
    if k < th.k_competitive {
        return Err(Error::Precondition(format!(
            "k = {k} is below the competitive-ratio threshold {} for epsilon = {epsilon}",
            th.k_competitive
        )));
    }
    let opt = run_opt(sys, model)?;
    if opt.total_cost <= 1e-12 {
        return Err(Error::Degenerate(format!(
            "offline optimal cost {:e} is too small for a ratio",
            opt.total_cost
        )));
    }
    let rec = run_pc_k(sys, model, k, &TerminalCost::IndicatorOrigin)?;
    let ratio = rec.total_cost / opt.total_cost;
    let bound = tc.cr_bound(k, epsilon);
    let potential = verify_potential(model, tc, &rec, &opt, epsilon)?;
    Ok(CompetitiveReport {
        k,
        epsilon,
        k_threshold: th.k_competitive,
        cost_alg: rec.total_cost,
        cost_opt: opt.total_cost,
        ratio,
        bound,
        bound_sharp: tc.cr_bound_sharp(k, epsilon),
        within_bound: !super::exceeds(ratio, bound),
        above_one: ratio >= 1.0 - 1e-8,
        potential,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplanReport {
    pub k: usize,
    pub h: usize,
    pub epsilon: f64,
    pub h_threshold: usize,
    /// Whether h ≥ h_threshold and k ≥ h + d.
    pub meets_threshold: bool,
    pub cost_alg: f64,
    pub cost_opt: f64,
    pub ratio: f64,
    /// ε⁻¹ ((L0 + ℓ_f)/m_f)^{1/2} C λ^{k−1−h}.
    pub shape: f64,
    /// (ratio − 1)/shape: the constant the shape would need to cover the measurement.
    pub fitted_constant: f64,
}

/// Runs PC_(k,h) and reports its competitive ratio against the decay shape of the
/// replan-window bound.
pub fn replan_report(
    sys: &LtvSystem,
    model: &CostModel,
    tc: &TheoryConstants,
    k: usize,
    h: usize,
    epsilon: f64,
    terminal: &TerminalCost,
) -> Result<ReplanReport> {
    let th = window_thresholds(tc, 0.5, epsilon)?;
    let opt = run_opt(sys, model)?;
    if opt.total_cost <= 1e-12 {
        return Err(Error::Degenerate(format!(
            "offline optimal cost {:e} is too small for a ratio",
            opt.total_cost
        )));
    }
    let rec = run_pc_kh(sys, model, k, h, terminal)?;
    let ratio = rec.total_cost / opt.total_cost;
    let ln_shape = -epsilon.ln() + 0.5 * ((tc.l0 + tc.l_f) / tc.m_f).ln() + tc.c.ln()
        - (k as f64 - 1.0 - h as f64) * tc.log_inv_lambda;
    let shape = ln_shape.exp();
    Ok(ReplanReport {
        k,
        h,
        epsilon,
        h_threshold: th.h_replan,
        meets_threshold: h >= th.h_replan && k >= h + tc.d,
        cost_alg: rec.total_cost,
        cost_opt: opt.total_cost,
        ratio,
        shape,
        fitted_constant: if shape > 0.0 {
            (ratio - 1.0) / shape
        } else {
            f64::INFINITY
        },
    })
}

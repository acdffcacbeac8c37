//! Perturbation, stability and smoothness checks for the window solvers.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use super::constants::TheoryConstants;
use super::{exceeds, gaussian, linear_fit, ratio, trial_rng, CheckReport, ABS_FLOOR};
use crate::costs::{CostModel, TerminalCost};
use crate::error::{Error, Result};
use crate::linalg;
use crate::solver::{
    optimal_value, solve_terminal_constraint, solve_terminal_cost, switching_cost_derivatives,
    SolveResult,
};
use crate::system::LtvSystem;

/// Which window problem a sensitivity check perturbs.
#[derive(Debug, Clone, PartialEq)]
pub enum SensitivityVariant {
    /// ψ̃ with the given terminal cost; no terminal-state term in the envelope.
    TerminalCost(TerminalCost),
    /// ψ with terminal state z.
    TerminalConstraint,
}

/// Measured deviations against an exponential envelope, per predicted step h.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SensitivityReport {
    pub trials: usize,
    /// Steps h covered; entry i of the per-h vectors is step `steps[i]`.
    pub steps: Vec<usize>,
    /// Largest deviation observed at each h.
    pub deviations: Vec<f64>,
    /// Envelope value in the trial with the largest deviation/envelope ratio at each h.
    pub envelopes: Vec<f64>,
    pub ratios: Vec<f64>,
    pub max_violation_ratio: f64,
    pub checks: usize,
    pub violations: usize,
    pub lambda_theory: f64,
    /// exp of the slope of mean ln‖Δy_h‖ against h under state-only perturbations.
    pub lambda_fit: Option<f64>,
    pub fit_r2: Option<f64>,
    /// Median of ‖Δy_{h+1}‖/‖Δy_h‖ over the fitting runs.
    pub median_step_ratio: Option<f64>,
    pub details: Vec<String>,
}

impl SensitivityReport {
    pub fn passed(&self) -> bool {
        self.violations == 0
    }

    /// Aggregates per-trial (deviation, envelope) pairs, one inner vector per trial.
    pub(crate) fn aggregate(
        steps: Vec<usize>,
        lambda_theory: f64,
        per_trial: &[Vec<(f64, f64)>],
        fit_runs: &[Vec<f64>],
    ) -> Self {
        let len = steps.len();
        let mut deviations = vec![0.0; len];
        let mut envelopes = vec![0.0; len];
        let mut ratios = vec![f64::NEG_INFINITY; len];
        let mut violations = 0;
        let mut checks = 0;
        let mut details = Vec::new();
        for (i, trial) in per_trial.iter().enumerate() {
            for (j, &(dev, env)) in trial.iter().enumerate() {
                checks += 1;
                deviations[j] = f64::max(deviations[j], dev);
                let r = ratio(dev, env);
                if r > ratios[j] {
                    ratios[j] = r;
                    envelopes[j] = env;
                }
                if exceeds(dev, env) {
                    violations += 1;
                    if details.len() < 10 {
                        details.push(format!(
                            "trial {i}, h = {}: deviation {dev:e} > envelope {env:e}",
                            steps[j]
                        ));
                    }
                }
            }
        }
        for r in ratios.iter_mut() {
            *r = r.max(0.0);
        }
        let max_violation_ratio = ratios.iter().cloned().fold(0.0, f64::max);
        let (lambda_fit, fit_r2, median_step_ratio) = fit_decay(&steps, fit_runs);
        Self {
            trials: per_trial.len(),
            steps,
            deviations,
            envelopes,
            ratios,
            max_violation_ratio,
            checks,
            violations,
            lambda_theory,
            lambda_fit,
            fit_r2,
            median_step_ratio,
            details,
        }
    }
}

/// Fits ln‖Δy_h‖ ≈ a + h ln λ on the mean log deviation over runs, using only h whose
/// deviations all exceed the noise floor.
fn fit_decay(steps: &[usize], runs: &[Vec<f64>]) -> (Option<f64>, Option<f64>, Option<f64>) {
    if runs.is_empty() {
        return (None, None, None);
    }
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for (j, &h) in steps.iter().enumerate() {
        let vals: Vec<f64> = runs.iter().map(|r| r[j]).collect();
        if vals.iter().all(|&v| v > ABS_FLOOR) {
            xs.push(h as f64);
            ys.push(vals.iter().map(|v| v.ln()).sum::<f64>() / vals.len() as f64);
        }
    }
    let fit = linear_fit(&xs, &ys);
    let mut step_ratios: Vec<f64> = runs
        .iter()
        .flat_map(|r| {
            r.windows(2)
                .filter(|w| w[0] > ABS_FLOOR && w[1] > ABS_FLOOR)
                .map(|w| w[1] / w[0])
        })
        .collect();
    let median = if step_ratios.is_empty() {
        None
    } else {
        step_ratios.sort_by(f64::total_cmp);
        let k = step_ratios.len();
        Some(if k % 2 == 1 {
            step_ratios[k / 2]
        } else {
            0.5 * (step_ratios[k / 2 - 1] + step_ratios[k / 2])
        })
    };
    match fit {
        Some((slope, _, r2)) => (Some(slope.exp()), Some(r2), median),
        None => (None, None, median),
    }
}

fn solve_variant(
    sys: &LtvSystem,
    model: &CostModel,
    variant: &SensitivityVariant,
    t: usize,
    p: usize,
    x: &DVector<f64>,
    zeta: &[DVector<f64>],
    z: &DVector<f64>,
) -> Result<SolveResult> {
    match variant {
        SensitivityVariant::TerminalCost(f) => solve_terminal_cost(sys, model, f, t, p, x, zeta),
        SensitivityVariant::TerminalConstraint => {
            solve_terminal_constraint(sys, model, t, p, x, zeta, z)
        }
    }
}

fn check_segment(sys: &LtvSystem, t: usize, p: usize) -> Result<()> {
    if p == 0 || t + p > sys.horizon() {
        return Err(Error::Range(format!(
            "window t = {t}, p = {p} does not fit in horizon {}",
            sys.horizon()
        )));
    }
    Ok(())
}

fn require_window_at_least_d(tc: &TheoryConstants, p: usize) -> Result<()> {
    if p < tc.d {
        return Err(Error::Precondition(format!(
            "window p = {p} is shorter than the controllability index d = {}",
            tc.d
        )));
    }
    Ok(())
}

fn log_uniform(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    10f64.powf(rng.random_range(lo..hi))
}

/// Checks ‖Δy_h‖ ≤ C(λ^h‖Δx‖ + Σ_τ λ^{|h−τ|}‖Δζ_τ‖ + λ^{p−h}‖Δz‖) for h = 1..p on random
/// perturbation pairs, and fits the empirical decay rate from state-only perturbations.
#[allow(clippy::too_many_arguments)]
pub fn verify_ltv_sensitivity(
    sys: &LtvSystem,
    model: &CostModel,
    tc: &TheoryConstants,
    variant: &SensitivityVariant,
    t: usize,
    p: usize,
    trials: usize,
    seed: u64,
) -> Result<SensitivityReport> {
    check_segment(sys, t, p)?;
    model.check_compatible(sys)?;
    if matches!(
        variant,
        SensitivityVariant::TerminalConstraint
            | SensitivityVariant::TerminalCost(TerminalCost::IndicatorOrigin)
    ) {
        require_window_at_least_d(tc, p)?;
    }
    let n = sys.state_dim();
    let constrained = *variant == SensitivityVariant::TerminalConstraint;
    let base_zeta = sys.disturbance_window(t, p)?;
    let lam = |k: f64| tc.lambda_pow(k);

    let per_trial: Vec<Vec<(f64, f64)>> = (0..trials)
        .into_par_iter()
        .map(|i| -> Result<Vec<(f64, f64)>> {
            let mut rng = trial_rng(seed, i);
            let x = gaussian(&mut rng, n) * rng.random_range(0.0..2.0);
            let zeta: Vec<DVector<f64>> = base_zeta
                .iter()
                .map(|w| w + gaussian(&mut rng, n) * 0.5)
                .collect();
            let z = gaussian(&mut rng, n) * rng.random_range(0.0..1.0);
            let scale = log_uniform(&mut rng, -2.0, 0.0);
            let mode = i % 4;
            let mut dx = DVector::zeros(n);
            let mut dzeta = vec![DVector::zeros(n); p];
            let mut dz = DVector::zeros(n);
            match mode {
                0 => {
                    dx = gaussian(&mut rng, n) * scale;
                    for d in dzeta.iter_mut() {
                        *d = gaussian(&mut rng, n) * scale;
                    }
                    if constrained {
                        dz = gaussian(&mut rng, n) * scale;
                    }
                }
                1 => dx = gaussian(&mut rng, n) * scale,
                2 => {
                    let tau = rng.random_range(0..p);
                    dzeta[tau] = gaussian(&mut rng, n) * scale;
                }
                _ => {
                    if constrained {
                        dz = gaussian(&mut rng, n) * scale;
                    } else {
                        for d in dzeta.iter_mut() {
                            *d = gaussian(&mut rng, n) * scale;
                        }
                    }
                }
            }
            let x2 = &x + &dx;
            let zeta2: Vec<DVector<f64>> = zeta.iter().zip(&dzeta).map(|(a, b)| a + b).collect();
            let z2 = &z + &dz;
            let ctx = |e: Error| e.at_step(t);
            let a = solve_variant(sys, model, variant, t, p, &x, &zeta, &z).map_err(ctx)?;
            let b = solve_variant(sys, model, variant, t, p, &x2, &zeta2, &z2).map_err(ctx)?;
            let dzeta_norms: Vec<f64> = dzeta.iter().map(|d| d.norm()).collect();
            Ok((1..=p)
                .map(|h| {
                    let dev = (&a.states[h] - &b.states[h]).norm();
                    let mut env = lam(h as f64) * dx.norm();
                    for (tau, dn) in dzeta_norms.iter().enumerate() {
                        if *dn > 0.0 {
                            env += lam((h as f64 - tau as f64).abs()) * dn;
                        }
                    }
                    if constrained {
                        env += lam((p - h) as f64) * dz.norm();
                    }
                    (dev, tc.c * env)
                })
                .collect())
        })
        .collect::<Result<_>>()?;

    // decay fit: perturb the initial state only, sweep h = 1..p−1
    let fit_count = trials.clamp(1, 5);
    let fit_runs: Vec<Vec<f64>> = (0..fit_count)
        .into_par_iter()
        .map(|i| -> Result<Vec<f64>> {
            let mut rng = trial_rng(seed ^ 0x5eed_f17, i);
            let x = gaussian(&mut rng, n);
            let dx = gaussian(&mut rng, n);
            let z = DVector::zeros(n);
            let a = solve_variant(sys, model, variant, t, p, &x, &base_zeta, &z)?;
            let b = solve_variant(sys, model, variant, t, p, &(&x + &dx), &base_zeta, &z)?;
            Ok((1..p)
                .map(|h| (&a.states[h] - &b.states[h]).norm())
                .collect())
        })
        .collect::<Result<_>>()?;
    let mut report = SensitivityReport::aggregate((1..=p).collect(), tc.lambda, &per_trial, &[]);
    let (lf, r2, med) = fit_decay(&(1..p).collect::<Vec<_>>(), &fit_runs);
    report.lambda_fit = lf;
    report.fit_r2 = r2;
    report.median_step_ratio = med;
    Ok(report)
}

/// Checks ‖ψ̃_t^p(x, ζ; F)_{y_h}‖ ≤ Cλ^h‖x‖ + (2C/(1−λ)) sup_τ‖ζ_τ‖ for h = 1..p on random (x, ζ).
#[allow(clippy::too_many_arguments)]
pub fn verify_opt_stability(
    sys: &LtvSystem,
    model: &CostModel,
    tc: &TheoryConstants,
    terminal: &TerminalCost,
    t: usize,
    p: usize,
    trials: usize,
    seed: u64,
) -> Result<CheckReport> {
    check_segment(sys, t, p)?;
    model.check_compatible(sys)?;
    if *terminal == TerminalCost::IndicatorOrigin {
        require_window_at_least_d(tc, p)?;
    }
    let n = sys.state_dim();
    let gain = 2.0 * tc.c / tc.one_minus_lambda();
    let parts: Vec<CheckReport> = (0..trials)
        .into_par_iter()
        .map(|i| -> Result<CheckReport> {
            let mut rng = trial_rng(seed, i);
            let x = gaussian(&mut rng, n) * rng.random_range(0.0..3.0);
            let radius = if i % 5 == 0 {
                0.0
            } else {
                rng.random_range(0.0..2.0)
            };
            let zeta: Vec<DVector<f64>> = (0..p)
                .map(|_| crate::system::sample_ball(&mut rng, n, radius))
                .collect();
            let sup = zeta.iter().map(|z| z.norm()).fold(0.0, f64::max);
            let res = solve_terminal_cost(sys, model, terminal, t, p, &x, &zeta)?;
            let mut rep = CheckReport::new("opt-stability");
            for h in 1..=p {
                let rhs = tc.c * tc.lambda_pow(h as f64) * x.norm() + gain * sup;
                rep.record(res.states[h].norm(), rhs, || format!("trial {i}, h = {h}"));
            }
            Ok(rep)
        })
        .collect::<Result<_>>()?;
    Ok(merge_all("opt-stability", parts))
}

/// Checks ι(x, ζ, z) ≤ (1+η) ι(x′, ζ, z′) + ((L0+ℓ_f)/2)(1+1/η)(‖x−x′‖² + ‖z−z′‖²).
#[allow(clippy::too_many_arguments)]
pub fn verify_cost_smoothness(
    sys: &LtvSystem,
    model: &CostModel,
    tc: &TheoryConstants,
    t: usize,
    p: usize,
    eta: f64,
    trials: usize,
    seed: u64,
) -> Result<CheckReport> {
    check_segment(sys, t, p)?;
    model.check_compatible(sys)?;
    require_window_at_least_d(tc, p)?;
    if !(eta > 0.0) || !eta.is_finite() {
        return Err(Error::Precondition(format!(
            "eta must be positive (got {eta})"
        )));
    }
    let n = sys.state_dim();
    let base_zeta = sys.disturbance_window(t, p)?;
    let coef = 0.5 * (tc.l0 + tc.l_f) * (1.0 + 1.0 / eta);
    let parts: Vec<CheckReport> = (0..trials)
        .into_par_iter()
        .map(|i| -> Result<CheckReport> {
            let mut rng = trial_rng(seed, i);
            let zeta: Vec<DVector<f64>> = base_zeta
                .iter()
                .map(|w| w + gaussian(&mut rng, n) * 0.5)
                .collect();
            let x = gaussian(&mut rng, n) * rng.random_range(0.0..2.0);
            let z = gaussian(&mut rng, n) * rng.random_range(0.0..2.0);
            let scale = if i % 5 == 0 {
                0.0
            } else {
                log_uniform(&mut rng, -2.0, 0.5)
            };
            let x2 = &x + gaussian(&mut rng, n) * scale;
            let z2 = &z + gaussian(&mut rng, n) * scale;
            let lhs = optimal_value(sys, model, t, p, &x, &zeta, &z)?;
            let other = optimal_value(sys, model, t, p, &x2, &zeta, &z2)?;
            let dist = (&x - &x2).norm_squared() + (&z - &z2).norm_squared();
            let rhs = (1.0 + eta) * other + coef * dist;
            let mut rep = CheckReport::new("cost-smoothness");
            rep.record(lhs, rhs, || format!("trial {i}"));
            Ok(rep)
        })
        .collect::<Result<_>>()?;
    Ok(merge_all("cost-smoothness", parts))
}

/// Checks ‖ψ̃_t^p(x;F)_{y_h} − ψ̃_t^{p+1}(x;F)_{y_h}‖ ≤ 2Cλ^{p−h}(Cλ^p‖x‖ + (2C/(1−λ)) sup‖w‖)
/// on randomly sampled (t, p, h) with d ≤ p and t + p < T, using the instance disturbances.
pub fn verify_one_step_difference(
    sys: &LtvSystem,
    model: &CostModel,
    tc: &TheoryConstants,
    terminal: &TerminalCost,
    trials: usize,
    seed: u64,
) -> Result<CheckReport> {
    model.check_compatible(sys)?;
    let horizon = sys.horizon();
    let p_min = tc.d.max(1);
    if horizon < p_min + 1 {
        return Err(Error::Precondition(format!(
            "horizon {horizon} leaves no window with d <= p < T"
        )));
    }
    let n = sys.state_dim();
    let sup = sys.disturbance_sup();
    let gain = 2.0 * tc.c / tc.one_minus_lambda();
    let parts: Vec<CheckReport> = (0..trials)
        .into_par_iter()
        .map(|i| -> Result<CheckReport> {
            let mut rng = trial_rng(seed, i);
            let p = rng.random_range(p_min..horizon);
            let t = rng.random_range(0..horizon - p);
            let x = gaussian(&mut rng, n) * rng.random_range(0.0..2.0);
            let short = solve_terminal_cost(
                sys,
                model,
                terminal,
                t,
                p,
                &x,
                &sys.disturbance_window(t, p)?,
            )?;
            let long = solve_terminal_cost(
                sys,
                model,
                terminal,
                t,
                p + 1,
                &x,
                &sys.disturbance_window(t, p + 1)?,
            )?;
            let inner = tc.c * tc.lambda_pow(p as f64) * x.norm() + gain * sup;
            let mut rep = CheckReport::new("one-step-difference");
            for h in 1..=p {
                let lhs = (&short.states[h] - &long.states[h]).norm();
                let rhs = 2.0 * tc.c * tc.lambda_pow((p - h) as f64) * inner;
                rep.record(lhs, rhs, || format!("t = {t}, p = {p}, h = {h}"));
            }
            Ok(rep)
        })
        .collect::<Result<_>>()?;
    Ok(merge_all("one-step-difference", parts))
}

/// Eigenvalue ranges of the Hessian of ξ_t^p at sampled points, against [0, L2(p)].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SmoothnessReport {
    pub t: usize,
    pub p: usize,
    pub l2: f64,
    /// Smallest eigenvalue of the finite-difference Hessian over all points.
    pub fd_min_eig: f64,
    pub fd_max_eig: f64,
    pub analytic_min_eig: f64,
    pub analytic_max_eig: f64,
    /// Largest entrywise gap between finite-difference and analytic Hessians.
    pub fd_analytic_gap: f64,
    pub check: CheckReport,
}

impl SmoothnessReport {
    pub fn passed(&self) -> bool {
        self.check.passed()
    }
}

/// Eigenvalue tolerance for the smoothness check.
pub const EIG_TOL: f64 = 1e-6;

fn split_theta(
    theta: &DVector<f64>,
    n: usize,
    p: usize,
) -> (DVector<f64>, Vec<DVector<f64>>, DVector<f64>) {
    let x = theta.rows(0, n).into_owned();
    let zeta = (0..p)
        .map(|j| theta.rows(n + j * n, n).into_owned())
        .collect();
    let z = theta.rows(n + n * p, n).into_owned();
    (x, zeta, z)
}

/// Central-difference Hessian of ξ_t^p at θ = (x, ζ, z), differencing the analytic gradient
/// with step 1e−4(1 + ‖θ‖), symmetrized.
pub fn switching_hessian_fd(
    sys: &LtvSystem,
    model: &CostModel,
    t: usize,
    p: usize,
    theta: &DVector<f64>,
) -> Result<DMatrix<f64>> {
    let n = sys.state_dim();
    let dim = theta.len();
    let step = 1e-4 * (1.0 + theta.norm());
    let grad = |th: &DVector<f64>| -> Result<DVector<f64>> {
        let (x, zeta, z) = split_theta(th, n, p);
        Ok(switching_cost_derivatives(sys, model, t, p, &x, &zeta, &z)?.gradient)
    };
    let cols: Vec<DVector<f64>> = (0..dim)
        .into_par_iter()
        .map(|j| -> Result<DVector<f64>> {
            let mut plus = theta.clone();
            plus[j] += step;
            let mut minus = theta.clone();
            minus[j] -= step;
            Ok((grad(&plus)? - grad(&minus)?) / (2.0 * step))
        })
        .collect::<Result<_>>()?;
    let h = DMatrix::from_columns(&cols);
    Ok((&h + h.transpose()) * 0.5)
}

/// Checks that the Hessian of ξ_t^p has eigenvalues in [−1e−6, L2(p) + 1e−6] at random points.
#[allow(clippy::too_many_arguments)]
pub fn verify_switching_smoothness(
    sys: &LtvSystem,
    model: &CostModel,
    tc: &TheoryConstants,
    t: usize,
    p: usize,
    points: usize,
    seed: u64,
) -> Result<SmoothnessReport> {
    check_segment(sys, t, p)?;
    model.check_compatible(sys)?;
    require_window_at_least_d(tc, p)?;
    let n = sys.state_dim();
    let l2 = tc.l2(p);
    let mut out = SmoothnessReport {
        t,
        p,
        l2,
        fd_min_eig: f64::INFINITY,
        fd_max_eig: f64::NEG_INFINITY,
        analytic_min_eig: f64::INFINITY,
        analytic_max_eig: f64::NEG_INFINITY,
        fd_analytic_gap: 0.0,
        check: CheckReport::new("switching-smoothness"),
    };
    for i in 0..points {
        let mut rng = trial_rng(seed, i);
        let theta = gaussian(&mut rng, n * (p + 2)) * rng.random_range(0.1..2.0);
        let fd = switching_hessian_fd(sys, model, t, p, &theta)?;
        let (x, zeta, z) = split_theta(&theta, n, p);
        let analytic = switching_cost_derivatives(sys, model, t, p, &x, &zeta, &z)?.hessian;
        let (lo, hi) = linalg::sym_eig_range(&fd);
        let (alo, ahi) = linalg::sym_eig_range(&analytic);
        out.fd_min_eig = out.fd_min_eig.min(lo);
        out.fd_max_eig = out.fd_max_eig.max(hi);
        out.analytic_min_eig = out.analytic_min_eig.min(alo);
        out.analytic_max_eig = out.analytic_max_eig.max(ahi);
        out.fd_analytic_gap = out.fd_analytic_gap.max(linalg::max_abs(&(&fd - &analytic)));
        record_interval(&mut out.check, lo, hi, l2, || format!("point {i}"));
    }
    Ok(out)
}

/// Records λ_min ≥ −tol and λ_max ≤ L + tol as two absolute checks.
fn record_interval(rep: &mut CheckReport, lo: f64, hi: f64, upper: f64, ctx: impl Fn() -> String) {
    rep.checks += 2;
    let lo_ratio = if lo >= 0.0 { 0.0 } else { -lo / EIG_TOL };
    let hi_ratio = ratio(hi.max(0.0), upper + EIG_TOL);
    rep.max_ratio = rep.max_ratio.max(lo_ratio).max(hi_ratio);
    for (bad, what) in [
        (lo < -EIG_TOL, format!("min eigenvalue {lo:e}")),
        (
            hi > upper + EIG_TOL,
            format!("max eigenvalue {hi:e} above {upper:e}"),
        ),
    ] {
        if bad {
            rep.violations += 1;
            if rep.details.len() < 10 {
                rep.details.push(format!("{}: {what}", ctx()));
            }
        }
    }
}

pub(crate) fn merge_all(name: &str, parts: Vec<CheckReport>) -> CheckReport {
    let mut out = CheckReport::new(name);
    for p in parts {
        out.merge(p);
    }
    out
}

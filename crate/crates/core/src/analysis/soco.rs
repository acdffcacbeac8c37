//! Smoothed online convex optimization: the fully actuated problem with hitting and switching
//! costs, its perturbation envelope, and the reduction of LTV windows to it.

use std::ops::AddAssign;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use super::constants::soco_constants;
use super::sensitivity::SensitivityReport;
use super::{gaussian, trial_rng};
use crate::costs::{random_spd, CostFn, CostModel};
use crate::error::{Error, Result};
use crate::linalg;
use crate::solver::{solve_terminal_constraint, switching_cost_derivatives};
use crate::system::{LtvSystem, DEFAULT_RANK_TOL};

const ARMIJO_SLOPE: f64 = 1e-4;
const MAX_HALVINGS: usize = 60;
const MAX_ITER: usize = 200;
const EPS_OPT: f64 = 1e-10;

/// A switching cost ĉ(cur, prev, w), convex and ℓ-smooth jointly in its arguments.
pub trait SwitchingCost: Send + Sync {
    fn state_dim(&self) -> usize;
    fn disturbance_dim(&self) -> usize;
    /// Smoothness constant ℓ.
    fn smoothness(&self) -> f64;
    fn value(&self, cur: &DVector<f64>, prev: &DVector<f64>, w: &DVector<f64>) -> Result<f64>;
    /// Value, gradient in (cur, prev) and Hessian in (cur, prev).
    fn derivatives(
        &self,
        cur: &DVector<f64>,
        prev: &DVector<f64>,
        w: &DVector<f64>,
    ) -> Result<(f64, DVector<f64>, DMatrix<f64>)>;
}

/// ½ sᵀP s with s = (cur, prev, w) and P symmetric PSD.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticSwitching {
    n: usize,
    k: usize,
    p: DMatrix<f64>,
    ell: f64,
}

impl QuadraticSwitching {
    pub fn new(n: usize, k: usize, p: DMatrix<f64>) -> Result<Self> {
        let dim = 2 * n + k;
        if p.nrows() != dim || p.ncols() != dim {
            return Err(Error::Validation(format!(
                "switching matrix must be {dim}x{dim}"
            )));
        }
        if linalg::max_abs(&(&p - p.transpose())) > 1e-12 * (1.0 + linalg::max_abs(&p)) {
            return Err(Error::Validation(
                "switching matrix must be symmetric".into(),
            ));
        }
        let (lo, hi) = linalg::sym_eig_range(&p);
        if lo < -1e-12 * (1.0 + hi.abs()) {
            return Err(Error::Validation(format!(
                "switching matrix is not PSD (min eigenvalue {lo:e})"
            )));
        }
        Ok(Self {
            n,
            k,
            p,
            ell: hi.max(0.0),
        })
    }

    fn stacked(&self, cur: &DVector<f64>, prev: &DVector<f64>, w: &DVector<f64>) -> DVector<f64> {
        linalg::stack(&[cur.clone(), prev.clone(), w.clone()])
    }
}

impl SwitchingCost for QuadraticSwitching {
    fn state_dim(&self) -> usize {
        self.n
    }

    fn disturbance_dim(&self) -> usize {
        self.k
    }

    fn smoothness(&self) -> f64 {
        self.ell
    }

    fn value(&self, cur: &DVector<f64>, prev: &DVector<f64>, w: &DVector<f64>) -> Result<f64> {
        let s = self.stacked(cur, prev, w);
        Ok(0.5 * s.dot(&(&self.p * &s)))
    }

    fn derivatives(
        &self,
        cur: &DVector<f64>,
        prev: &DVector<f64>,
        w: &DVector<f64>,
    ) -> Result<(f64, DVector<f64>, DMatrix<f64>)> {
        let s = self.stacked(cur, prev, w);
        let ps = &self.p * &s;
        let m = 2 * self.n;
        Ok((
            0.5 * s.dot(&ps),
            ps.rows(0, m).into_owned(),
            self.p.view((0, 0), (m, m)).into_owned(),
        ))
    }
}

/// ξ_t^d(prev, w, cur) of an LTV window of length d, with w the stacked disturbances.
pub struct LtvSwitching<'a> {
    sys: &'a LtvSystem,
    model: &'a CostModel,
    t: usize,
    len: usize,
    ell: f64,
}

impl<'a> LtvSwitching<'a> {
    /// `ell` is the smoothness constant reported for this window (for example L2(len)).
    pub fn new(
        sys: &'a LtvSystem,
        model: &'a CostModel,
        t: usize,
        len: usize,
        ell: f64,
    ) -> Result<Self> {
        if len == 0 || t + len > sys.horizon() {
            return Err(Error::Range(format!(
                "window t = {t}, len = {len} exceeds the horizon"
            )));
        }
        Ok(Self {
            sys,
            model,
            t,
            len,
            ell,
        })
    }
}

impl SwitchingCost for LtvSwitching<'_> {
    fn state_dim(&self) -> usize {
        self.sys.state_dim()
    }

    fn disturbance_dim(&self) -> usize {
        self.sys.state_dim() * self.len
    }

    fn smoothness(&self) -> f64 {
        self.ell
    }

    fn value(&self, cur: &DVector<f64>, prev: &DVector<f64>, w: &DVector<f64>) -> Result<f64> {
        Ok(self.derivatives(cur, prev, w)?.0)
    }

    fn derivatives(
        &self,
        cur: &DVector<f64>,
        prev: &DVector<f64>,
        w: &DVector<f64>,
    ) -> Result<(f64, DVector<f64>, DMatrix<f64>)> {
        let n = self.sys.state_dim();
        let zeta = linalg::unstack(w, n, self.len);
        let d =
            switching_cost_derivatives(self.sys, self.model, self.t, self.len, prev, &zeta, cur)?;
        // θ = (x, ζ, z) with x = prev, z = cur
        let zoff = n + n * self.len;
        let idx: Vec<usize> = (zoff..zoff + n).chain(0..n).collect();
        let grad = DVector::from_fn(2 * n, |i, _| d.gradient[idx[i]]);
        let hess = DMatrix::from_fn(2 * n, 2 * n, |i, j| d.hessian[(idx[i], idx[j])]);
        Ok((d.value, grad, hess))
    }
}

/// min over x̂_1..x̂_{p−1} of Σ_{τ=1}^{p−1} f̂_τ(x̂_τ) + Σ_{τ=1}^{p} ĉ_τ(x̂_τ, x̂_{τ−1}, ŵ_{τ−1}).
pub struct SocoProblem<'a> {
    /// f̂_1..f̂_{p−1}.
    pub hitting: Vec<CostFn>,
    /// ĉ_1..ĉ_p.
    pub switching: Vec<Box<dyn SwitchingCost + 'a>>,
}

/// Minimizer of a SOCO problem, endpoints included.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SocoSolution {
    /// x̂_0..x̂_p.
    pub states: Vec<Vec<f64>>,
    pub value: f64,
    pub grad_norm: f64,
    pub iterations: usize,
}

impl SocoSolution {
    pub fn state(&self, h: usize) -> DVector<f64> {
        DVector::from_vec(self.states[h].clone())
    }
}

impl<'a> SocoProblem<'a> {
    pub fn new(hitting: Vec<CostFn>, switching: Vec<Box<dyn SwitchingCost + 'a>>) -> Result<Self> {
        if switching.is_empty() || hitting.len() + 1 != switching.len() {
            return Err(Error::Validation(format!(
                "need p switching costs and p - 1 hitting costs (got {} and {})",
                switching.len(),
                hitting.len()
            )));
        }
        let n = switching[0].state_dim();
        if switching.iter().any(|c| c.state_dim() != n) || hitting.iter().any(|f| f.dim() != n) {
            return Err(Error::Validation(
                "SOCO costs disagree on the state dimension".into(),
            ));
        }
        Ok(Self { hitting, switching })
    }

    /// Number of switching stages p.
    pub fn horizon(&self) -> usize {
        self.switching.len()
    }

    pub fn state_dim(&self) -> usize {
        self.switching[0].state_dim()
    }

    /// Strong convexity μ of the hitting costs.
    pub fn mu(&self) -> f64 {
        self.hitting
            .iter()
            .map(|f| f.strong_convexity())
            .fold(f64::INFINITY, f64::min)
    }

    /// Smoothness ℓ of the switching costs.
    pub fn ell(&self) -> f64 {
        self.switching
            .iter()
            .map(|c| c.smoothness())
            .fold(0.0, f64::max)
    }

    /// (λ0, C0) of the perturbation envelope.
    pub fn constants(&self) -> (f64, f64) {
        soco_constants(self.ell(), self.mu())
    }

    fn check_data(&self, x0: &DVector<f64>, w: &[DVector<f64>], xp: &DVector<f64>) -> Result<()> {
        let n = self.state_dim();
        if x0.len() != n || xp.len() != n || w.len() != self.horizon() {
            return Err(Error::Validation(
                "SOCO endpoint or disturbance shape mismatch".into(),
            ));
        }
        for (c, wi) in self.switching.iter().zip(w) {
            if wi.len() != c.disturbance_dim() {
                return Err(Error::Validation(
                    "SOCO disturbance dimension mismatch".into(),
                ));
            }
        }
        Ok(())
    }

    fn full_states(
        &self,
        x0: &DVector<f64>,
        inner: &DVector<f64>,
        xp: &DVector<f64>,
    ) -> Vec<DVector<f64>> {
        let n = self.state_dim();
        let mut out = vec![x0.clone()];
        out.extend(linalg::unstack(inner, n, self.horizon() - 1));
        out.push(xp.clone());
        out
    }

    fn objective(&self, xs: &[DVector<f64>], w: &[DVector<f64>]) -> Result<f64> {
        let mut v: f64 = self
            .hitting
            .iter()
            .enumerate()
            .map(|(i, f)| f.value(&xs[i + 1]))
            .sum();
        for (tau, c) in self.switching.iter().enumerate() {
            v += c.value(&xs[tau + 1], &xs[tau], &w[tau])?;
        }
        Ok(v)
    }

    fn derivatives(
        &self,
        xs: &[DVector<f64>],
        w: &[DVector<f64>],
    ) -> Result<(f64, DVector<f64>, DMatrix<f64>)> {
        let n = self.state_dim();
        let p = self.horizon();
        let dim = n * (p - 1);
        let mut g = DVector::zeros(dim);
        let mut h = DMatrix::zeros(dim, dim);
        let mut v = 0.0;
        for (i, f) in self.hitting.iter().enumerate() {
            let x = &xs[i + 1];
            v += f.value(x);
            g.rows_mut(i * n, n).add_assign(&f.gradient(x));
            h.view_mut((i * n, i * n), (n, n)).add_assign(&f.hessian(x));
        }
        let parts: Vec<_> = (0..p)
            .into_par_iter()
            .map(|tau| self.switching[tau].derivatives(&xs[tau + 1], &xs[tau], &w[tau]))
            .collect::<Result<_>>()?;
        for (tau, (cv, cg, ch)) in parts.into_iter().enumerate() {
            v += cv;
            // stage τ+1 couples inner blocks τ (cur) and τ−1 (prev)
            let cur = (tau + 1 < p).then_some(tau);
            let prev = (tau >= 1).then(|| tau - 1);
            let blocks = [(cur, 0), (prev, n)];
            for &(bi, oi) in &blocks {
                let Some(bi) = bi else { continue };
                g.rows_mut(bi * n, n).add_assign(&cg.rows(oi, n));
                for &(bj, oj) in &blocks {
                    let Some(bj) = bj else { continue };
                    h.view_mut((bi * n, bj * n), (n, n))
                        .add_assign(&ch.view((oi, oj), (n, n)));
                }
            }
        }
        Ok((v, g, h))
    }

    /// ψ̂(x̂_0, ŵ, x̂_p) by damped Newton.
    pub fn solve(
        &self,
        x0: &DVector<f64>,
        w: &[DVector<f64>],
        xp: &DVector<f64>,
    ) -> Result<SocoSolution> {
        self.check_data(x0, w, xp)?;
        let n = self.state_dim();
        let p = self.horizon();
        let mut inner = DVector::zeros(n * (p - 1));
        let mut iterations = 0;
        let (value, grad_norm) = loop {
            let xs = self.full_states(x0, &inner, xp);
            if p == 1 {
                break (self.objective(&xs, w)?, 0.0);
            }
            let (v, g, h) = self.derivatives(&xs, w)?;
            let gn = g.norm();
            if gn <= EPS_OPT * (1.0 + v.abs()) {
                break (v, gn);
            }
            if iterations >= MAX_ITER {
                return Err(Error::Convergence {
                    iterations,
                    residual: gn,
                });
            }
            iterations += 1;
            let step = linalg::spd_solve(&h, &(-&g))
                .ok_or_else(|| Error::Invariant("singular SOCO Hessian".into()))?;
            let slope = g.dot(&step);
            let mut alpha = 1.0;
            let mut accepted = false;
            for _ in 0..=MAX_HALVINGS {
                let trial = &inner + &step * alpha;
                let tv = self.objective(&self.full_states(x0, &trial, xp), w)?;
                if tv <= v + ARMIJO_SLOPE * alpha * slope
                    || (alpha == 1.0 && tv - v <= 1e-14 * (1.0 + v.abs()))
                {
                    inner = trial;
                    accepted = true;
                    break;
                }
                alpha *= 0.5;
            }
            if !accepted {
                // no representable decrease left: accept when the gradient is at noise level
                if gn <= 1e-6 * (1.0 + v.abs()) {
                    break (v, gn);
                }
                return Err(Error::Convergence {
                    iterations,
                    residual: gn,
                });
            }
        };
        let xs = self.full_states(x0, &inner, xp);
        Ok(SocoSolution {
            states: xs.iter().map(|x| x.iter().cloned().collect()).collect(),
            value,
            grad_norm,
            iterations,
        })
    }

    /// Random instance: quadratic hitting costs centered at random points with curvature in
    /// `mu_range`, and PSD quadratic switching costs with scale in `ell_range`.
    pub fn random_quadratic(
        rng: &mut ChaCha8Rng,
        n: usize,
        p: usize,
        mu_range: (f64, f64),
        ell_range: (f64, f64),
    ) -> Result<SocoProblem<'static>> {
        if p == 0 || n == 0 {
            return Err(Error::Range("SOCO problems need p >= 1 and n >= 1".into()));
        }
        let hitting = (1..p)
            .map(|_| {
                let q = random_spd(rng, n, mu_range.0, mu_range.1);
                let center = gaussian(rng, n);
                Ok(CostFn::quadratic(q)?.centered_at(&center))
            })
            .collect::<Result<Vec<_>>>()?;
        let dim = 3 * n;
        let switching = (0..p)
            .map(|_| -> Result<Box<dyn SwitchingCost>> {
                let rank = rng.random_range(1..=dim);
                let g = DMatrix::from_fn(dim, rank, |_, _| {
                    rng.sample::<f64, _>(rand_distr::StandardNormal)
                });
                let raw = &g * g.transpose();
                let scale =
                    rng.random_range(ell_range.0..ell_range.1) / linalg::spectral_norm(&raw);
                let sym = (&raw + raw.transpose()) * (0.5 * scale);
                Ok(Box::new(QuadraticSwitching::new(n, n, sym)?))
            })
            .collect::<Result<Vec<_>>>()?;
        SocoProblem::new(hitting, switching)
    }
}

/// Checks ‖Δψ̂_h‖ ≤ C0(λ0^{h−1}‖Δx̂_0‖ + Σ_τ λ0^{|h−τ|−1}‖Δŵ_τ‖ + λ0^{p−h−1}‖Δx̂_p‖) for
/// h = 1..p−1 around random base data, and fits the decay from endpoint-only perturbations.
pub fn verify_soco_sensitivity(
    problem: &SocoProblem,
    trials: usize,
    seed: u64,
) -> Result<SensitivityReport> {
    let p = problem.horizon();
    if p < 2 {
        return Err(Error::Precondition("SOCO sensitivity needs p >= 2".into()));
    }
    let n = problem.state_dim();
    let (lambda0, c0) = problem.constants();
    let wdims: Vec<usize> = problem
        .switching
        .iter()
        .map(|c| c.disturbance_dim())
        .collect();
    let pw = |e: f64| lambda0.powf(e);
    let per_trial: Vec<Vec<(f64, f64)>> = (0..trials)
        .into_par_iter()
        .map(|i| -> Result<Vec<(f64, f64)>> {
            let mut rng = trial_rng(seed, i);
            let x0 = gaussian(&mut rng, n);
            let xp = gaussian(&mut rng, n);
            let w: Vec<DVector<f64>> = wdims.iter().map(|&k| gaussian(&mut rng, k)).collect();
            let scale = 10f64.powf(rng.random_range(-2.0..0.0));
            let mode = i % 4;
            let mut dx0 = DVector::zeros(n);
            let mut dxp = DVector::zeros(n);
            let mut dw: Vec<DVector<f64>> = wdims.iter().map(|&k| DVector::zeros(k)).collect();
            if mode == 0 || mode == 1 {
                dx0 = gaussian(&mut rng, n) * scale;
            }
            if mode == 0 || mode == 3 {
                dxp = gaussian(&mut rng, n) * scale;
            }
            if mode == 0 {
                for (d, &k) in dw.iter_mut().zip(&wdims) {
                    *d = gaussian(&mut rng, k) * scale;
                }
            } else if mode == 2 {
                let tau = rng.random_range(0..p);
                dw[tau] = gaussian(&mut rng, wdims[tau]) * scale;
            }
            let w2: Vec<DVector<f64>> = w.iter().zip(&dw).map(|(a, b)| a + b).collect();
            let a = problem.solve(&x0, &w, &xp)?;
            let b = problem.solve(&(&x0 + &dx0), &w2, &(&xp + &dxp))?;
            let dwn: Vec<f64> = dw.iter().map(|d| d.norm()).collect();
            Ok((1..p)
                .map(|h| {
                    let dev = (a.state(h) - b.state(h)).norm();
                    let mut env =
                        pw(h as f64 - 1.0) * dx0.norm() + pw((p - h) as f64 - 1.0) * dxp.norm();
                    for (tau, dn) in dwn.iter().enumerate() {
                        if *dn > 0.0 {
                            env += pw((h as f64 - tau as f64).abs() - 1.0) * dn;
                        }
                    }
                    (dev, c0 * env)
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    let fit_runs: Vec<Vec<f64>> = (0..trials.clamp(1, 5))
        .map(|i| -> Result<Vec<f64>> {
            let mut rng = trial_rng(seed ^ 0x50c0, i);
            let x0 = gaussian(&mut rng, n);
            let dx0 = gaussian(&mut rng, n);
            let xp = gaussian(&mut rng, n);
            let w: Vec<DVector<f64>> = wdims.iter().map(|&k| gaussian(&mut rng, k)).collect();
            let a = problem.solve(&x0, &w, &xp)?;
            let b = problem.solve(&(&x0 + &dx0), &w, &xp)?;
            Ok((1..p).map(|h| (a.state(h) - b.state(h)).norm()).collect())
        })
        .collect::<Result<_>>()?;
    Ok(SensitivityReport::aggregate(
        (1..p).collect(),
        lambda0,
        &per_trial,
        &fit_runs,
    ))
}

/// Decision-point comparison between the SOCO reduction and the direct window solve.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReductionReport {
    pub t0: usize,
    /// Steps between decision points (the controllability index).
    pub d: usize,
    pub decision_points: usize,
    /// max_j ‖x̂_j − y_{jd}‖.
    pub max_state_gap: f64,
    pub soco_value: f64,
    /// ι of the direct solve minus the terminal hitting cost.
    pub direct_value: f64,
    pub soco_iterations: usize,
}

/// Builds the SOCO problem whose decisions are the states every d steps of the window
/// [t0, t0 + blocks·d) ending at z, and compares it with the direct terminal-constrained solve.
pub fn verify_reduction(
    sys: &LtvSystem,
    model: &CostModel,
    t0: usize,
    blocks: usize,
    x: &DVector<f64>,
    z: &DVector<f64>,
    ell: f64,
) -> Result<ReductionReport> {
    let d = sys.analyze_controllability(DEFAULT_RANK_TOL)?.index;
    if blocks == 0 || t0 + blocks * d > sys.horizon() {
        return Err(Error::Range(format!(
            "{blocks} blocks of length {d} from t = {t0} exceed the horizon {}",
            sys.horizon()
        )));
    }
    let span = blocks * d;
    let zeta = sys.disturbance_window(t0, span)?;
    let direct = solve_terminal_constraint(sys, model, t0, span, x, &zeta, z)?;
    let hitting: Vec<CostFn> = (1..blocks).map(|j| model.f(t0 + j * d).clone()).collect();
    let switching: Vec<Box<dyn SwitchingCost + '_>> = (0..blocks)
        .map(|j| -> Result<Box<dyn SwitchingCost + '_>> {
            Ok(Box::new(LtvSwitching::new(sys, model, t0 + j * d, d, ell)?))
        })
        .collect::<Result<_>>()?;
    let problem = SocoProblem::new(hitting, switching)?;
    let w: Vec<DVector<f64>> = (0..blocks)
        .map(|j| linalg::stack(&zeta[j * d..(j + 1) * d]))
        .collect();
    let sol = problem.solve(x, &w, z)?;
    let max_state_gap = (0..=blocks)
        .map(|j| (sol.state(j) - &direct.states[j * d]).norm())
        .fold(0.0, f64::max);
    Ok(ReductionReport {
        t0,
        d,
        decision_points: blocks,
        max_state_gap,
        soco_value: sol.value,
        direct_value: direct.value - model.f(t0 + span).value(z),
        soco_iterations: sol.iterations,
    })
}

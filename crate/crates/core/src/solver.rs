//! Finite-horizon trajectory optimization over a window of the LTV system.
//!
//! Both problem variants eliminate the states through the stacked rollout maps
//! `y = S_x x + S_v v + S_ζ ζ` and run a damped Newton method on the remaining
//! unconstrained variable: the stacked controls `v` for the terminal-cost problem,
//! the nullspace coordinate `r` in `v = M†(z − Φx − R_ζ ζ) + V r` for the
//! terminal-constrained one. Long windows switch to a Riccati factorization of the
//! same Newton step.

use nalgebra::{DMatrix, DVector};

use crate::costs::{CostFn, CostModel, TerminalCost};
use crate::error::{Error, Result};
use crate::linalg;
use crate::riccati;
use crate::system::{LtvSystem, Trajectory, DEFAULT_RANK_TOL, EPS_DYN};

const ARMIJO_SLOPE: f64 = 1e-4;
const MAX_HALVINGS: usize = 60;

/// Windows longer than this use the Riccati solver under [`SolveMethod::Auto`].
pub const RICCATI_MIN_WINDOW: usize = 32;

/// Linear algebra behind the Newton steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SolveMethod {
    /// Dense for short windows, Riccati for long ones.
    #[default]
    Auto,
    /// Dense reduced Hessian over the stacked controls or nullspace coordinates.
    Dense,
    /// Backward Riccati sweep over the window, linear in p.
    Riccati,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    /// Gradient tolerance, scaled by 1 + |value|.
    pub eps_opt: f64,
    pub max_iter: usize,
    pub eps_dyn: f64,
    pub method: SolveMethod,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            eps_opt: 1e-9,
            max_iter: 200,
            eps_dyn: EPS_DYN,
            method: SolveMethod::Auto,
        }
    }
}

impl SolverOptions {
    fn use_riccati(&self, p: usize) -> bool {
        match self.method {
            SolveMethod::Auto => p > RICCATI_MIN_WINDOW,
            SolveMethod::Dense => false,
            SolveMethod::Riccati => true,
        }
    }
}

fn from_riccati(out: riccati::Outcome, terminal_residual: f64) -> SolveResult {
    SolveResult {
        states: out.states,
        controls: out.controls,
        value: out.value,
        grad_norm: out.grad_norm,
        iterations: out.iterations,
        terminal_residual,
    }
}

/// Linear maps of a length-`p` window starting at `t`.
#[derive(Debug, Clone)]
pub struct StackedMaps {
    pub t: usize,
    pub p: usize,
    /// ((p+1)n × n), block τ is Φ(t+τ, t).
    pub s_x: DMatrix<f64>,
    /// ((p+1)n × mp), block (τ, j) is Φ(t+τ, t+j+1) B_{t+j} for j < τ.
    pub s_v: DMatrix<f64>,
    /// ((p+1)n × np), block (τ, j) is Φ(t+τ, t+j+1) for j < τ.
    pub s_zeta: DMatrix<f64>,
    /// Controllability matrix M(t, p).
    pub m: DMatrix<f64>,
    pub m_dagger: DMatrix<f64>,
    /// Last block row of `s_zeta`.
    pub r_zeta: DMatrix<f64>,
    /// Φ(t+p, t).
    pub phi: DMatrix<f64>,
    pub sigma_min: f64,
    v: Option<DMatrix<f64>>,
}

impl StackedMaps {
    pub fn is_full_row_rank(&self) -> bool {
        self.v.is_some()
    }

    /// Orthonormal basis V of ker M (mp × (mp − n)).
    pub fn nullspace(&self) -> Result<&DMatrix<f64>> {
        self.v.as_ref().ok_or(Error::Rank {
            t: self.t,
            p: self.p,
            sigma_min: self.sigma_min,
        })
    }

    /// Stacked predicted states y_0..y_p.
    pub fn apply(&self, x: &DVector<f64>, v: &DVector<f64>, zeta: &DVector<f64>) -> DVector<f64> {
        &self.s_x * x + &self.s_v * v + &self.s_zeta * zeta
    }
}

fn check_window(sys: &LtvSystem, t: usize, p: usize) -> Result<()> {
    if p == 0 {
        return Err(Error::Range("window length p must be at least 1".into()));
    }
    if t + p > sys.horizon() {
        return Err(Error::Range(format!(
            "window [{t}, {}) exceeds horizon {}",
            t + p,
            sys.horizon()
        )));
    }
    Ok(())
}

fn rollout_maps(sys: &LtvSystem, t: usize, p: usize) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
    let (n, m) = (sys.state_dim(), sys.control_dim());
    let rows = (p + 1) * n;
    let mut s_x = DMatrix::zeros(rows, n);
    let mut s_v = DMatrix::zeros(rows, m * p);
    let mut s_zeta = DMatrix::zeros(rows, n * p);
    let mut phi = DMatrix::<f64>::identity(n, n);
    s_x.view_mut((0, 0), (n, n)).copy_from(&phi);
    for tau in 1..=p {
        phi = sys.a(t + tau - 1) * phi;
        s_x.view_mut((tau * n, 0), (n, n)).copy_from(&phi);
    }
    for j in 0..p {
        let mut blk_v = sys.b(t + j).clone();
        let mut blk_z = DMatrix::<f64>::identity(n, n);
        for tau in j + 1..=p {
            if tau > j + 1 {
                blk_v = sys.a(t + tau - 1) * blk_v;
                blk_z = sys.a(t + tau - 1) * blk_z;
            }
            s_v.view_mut((tau * n, j * m), (n, m)).copy_from(&blk_v);
            s_zeta.view_mut((tau * n, j * n), (n, n)).copy_from(&blk_z);
        }
    }
    (s_x, s_v, s_zeta)
}

pub fn build_stacked_maps(sys: &LtvSystem, t: usize, p: usize) -> Result<StackedMaps> {
    check_window(sys, t, p)?;
    let n = sys.state_dim();
    let (s_x, s_v, s_zeta) = rollout_maps(sys, t, p);
    let m = s_v.rows(p * n, n).into_owned();
    let r_zeta = s_zeta.rows(p * n, n).into_owned();
    let phi = s_x.rows(p * n, n).into_owned();
    let sv = linalg::singular_values(&m);
    let smax = sv.iter().cloned().fold(0.0, f64::max);
    let sigma_min = if m.ncols() < n {
        0.0
    } else {
        sv.iter().cloned().fold(f64::INFINITY, f64::min)
    };
    let full = m.ncols() >= n && smax > 0.0 && sigma_min > DEFAULT_RANK_TOL * smax;
    let m_dagger = linalg::pseudo_inverse(&m);
    let v = full.then(|| linalg::nullspace_basis(&m));
    Ok(StackedMaps {
        t,
        p,
        s_x,
        s_v,
        s_zeta,
        m,
        m_dagger,
        r_zeta,
        phi,
        sigma_min,
        v,
    })
}

/// Optimal window trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct SolveResult {
    /// y_0..y_p.
    pub states: Vec<DVector<f64>>,
    /// v_0..v_{p−1}.
    pub controls: Vec<DVector<f64>>,
    pub value: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    /// ‖y_p − z‖ for terminal-constrained solves, 0 otherwise.
    pub terminal_residual: f64,
}

impl SolveResult {
    pub fn horizon(&self) -> usize {
        self.controls.len()
    }

    /// Max dynamics residual of the segment against `sys` from `t` with disturbances `zeta`.
    pub fn segment_residual(&self, sys: &LtvSystem, t: usize, zeta: &[DVector<f64>]) -> f64 {
        (0..self.horizon())
            .map(|tau| {
                (&self.states[tau + 1]
                    - sys.a(t + tau) * &self.states[tau]
                    - sys.b(t + tau) * &self.controls[tau]
                    - &zeta[tau])
                    .norm()
            })
            .fold(0.0, f64::max)
    }

    /// Full-horizon solution as a certified trajectory.
    pub fn to_trajectory(&self, sys: &LtvSystem) -> Result<Trajectory> {
        Trajectory::certify(sys, self.states.clone(), self.controls.clone())
    }

    pub fn to_json(&self) -> serde_json::Value {
        let vecs = |xs: &[DVector<f64>]| -> Vec<Vec<f64>> {
            xs.iter().map(|v| v.iter().cloned().collect()).collect()
        };
        serde_json::json!({
            "states": vecs(&self.states),
            "controls": vecs(&self.controls),
            "value": self.value,
            "grad_norm": self.grad_norm,
            "iterations": self.iterations,
            "terminal_residual": self.terminal_residual,
        })
    }
}

/// Objective of a window in an affine parameterization
/// y_{1:p} = y_base + Y r, v_{0:p−1} = v_base + U r (U = I when absent).
struct Reduced<'a> {
    n: usize,
    m: usize,
    p: usize,
    fs: Vec<&'a CostFn>,
    cs: Vec<&'a CostFn>,
    terminal: Option<&'a CostFn>,
    y_base: DVector<f64>,
    v_base: DVector<f64>,
    ymap: DMatrix<f64>,
    vmap: Option<DMatrix<f64>>,
}

impl<'a> Reduced<'a> {
    fn dim(&self) -> usize {
        self.ymap.ncols()
    }

    fn point(&self, r: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let y = &self.y_base + &self.ymap * r;
        let v = match &self.vmap {
            Some(u) => &self.v_base + u * r,
            None => &self.v_base + r,
        };
        (y, v)
    }

    fn y_block(&self, y: &DVector<f64>, tau: usize) -> DVector<f64> {
        y.rows(tau * self.n, self.n).into_owned()
    }

    fn v_block(&self, v: &DVector<f64>, tau: usize) -> DVector<f64> {
        v.rows(tau * self.m, self.m).into_owned()
    }

    fn value(&self, y: &DVector<f64>, v: &DVector<f64>) -> f64 {
        let mut total = 0.0;
        for tau in 0..self.p {
            total += self.fs[tau].value(&self.y_block(y, tau));
            total += self.cs[tau].value(&self.v_block(v, tau));
        }
        if let Some(g) = self.terminal {
            total += g.value(&self.y_block(y, self.p - 1));
        }
        total
    }

    /// Gradients of the objective in the stacked y and v coordinates.
    fn stacked_gradients(
        &self,
        y: &DVector<f64>,
        v: &DVector<f64>,
    ) -> (DVector<f64>, DVector<f64>) {
        let (n, m, p) = (self.n, self.m, self.p);
        let mut gy = DVector::zeros(n * p);
        let mut gv = DVector::zeros(m * p);
        for tau in 0..p {
            let yb = self.y_block(y, tau);
            let mut g = self.fs[tau].gradient(&yb);
            if tau == p - 1 {
                if let Some(term) = self.terminal {
                    g += term.gradient(&yb);
                }
            }
            gy.rows_mut(tau * n, n).copy_from(&g);
            gv.rows_mut(tau * m, m)
                .copy_from(&self.cs[tau].gradient(&self.v_block(v, tau)));
        }
        (gy, gv)
    }

    fn stacked_hessian_blocks(
        &self,
        y: &DVector<f64>,
        v: &DVector<f64>,
    ) -> (Vec<DMatrix<f64>>, Vec<DMatrix<f64>>) {
        let p = self.p;
        let mut hy = Vec::with_capacity(p);
        let mut hv = Vec::with_capacity(p);
        for tau in 0..p {
            let yb = self.y_block(y, tau);
            let mut h = self.fs[tau].hessian(&yb);
            if tau == p - 1 {
                if let Some(term) = self.terminal {
                    h += term.hessian(&yb);
                }
            }
            hy.push(h);
            hv.push(self.cs[tau].hessian(&self.v_block(v, tau)));
        }
        (hy, hv)
    }

    fn gradient(&self, y: &DVector<f64>, v: &DVector<f64>) -> DVector<f64> {
        let (gy, gv) = self.stacked_gradients(y, v);
        let mut g = self.ymap.tr_mul(&gy);
        match &self.vmap {
            Some(u) => g += u.tr_mul(&gv),
            None => g += gv,
        }
        g
    }

    fn hessian(&self, y: &DVector<f64>, v: &DVector<f64>) -> DMatrix<f64> {
        let (n, m) = (self.n, self.m);
        let (hy, hv) = self.stacked_hessian_blocks(y, v);
        let mut hymap = DMatrix::zeros(self.ymap.nrows(), self.dim());
        for (tau, h) in hy.iter().enumerate() {
            hymap
                .rows_mut(tau * n, n)
                .copy_from(&(h * self.ymap.rows(tau * n, n)));
        }
        let mut out = self.ymap.tr_mul(&hymap);
        match &self.vmap {
            Some(u) => {
                let mut humap = DMatrix::zeros(u.nrows(), self.dim());
                for (tau, h) in hv.iter().enumerate() {
                    humap
                        .rows_mut(tau * m, m)
                        .copy_from(&(h * u.rows(tau * m, m)));
                }
                out += u.tr_mul(&humap);
            }
            None => {
                for (tau, h) in hv.iter().enumerate() {
                    let mut blk = out.view_mut((tau * m, tau * m), (m, m));
                    blk += h;
                }
            }
        }
        (&out + out.transpose()) * 0.5
    }
}

struct NewtonOutcome {
    r: DVector<f64>,
    grad_norm: f64,
    iterations: usize,
}

fn newton(problem: &Reduced, opts: &SolverOptions) -> Result<NewtonOutcome> {
    let q = problem.dim();
    let mut r = DVector::zeros(q);
    if q == 0 {
        return Ok(NewtonOutcome {
            r,
            grad_norm: 0.0,
            iterations: 0,
        });
    }
    let (mut y, mut v) = problem.point(&r);
    let mut val = problem.value(&y, &v);
    let mut iter = 0;
    loop {
        let g = problem.gradient(&y, &v);
        let gn = g.norm();
        if gn <= opts.eps_opt * (1.0 + val.abs()) {
            return Ok(NewtonOutcome {
                r,
                grad_norm: gn,
                iterations: iter,
            });
        }
        if iter >= opts.max_iter {
            return Err(Error::Convergence {
                iterations: iter,
                residual: gn,
            });
        }
        let h = problem.hessian(&y, &v);
        let rhs = -&g;
        let mut d = linalg::spd_solve(&h, &rhs).unwrap_or_else(|| rhs.clone());
        if let Some(corr) = linalg::spd_solve(&h, &(&rhs - &h * &d)) {
            d += corr;
        }
        let mut slope = g.dot(&d);
        if !(slope < 0.0) || !d.iter().all(|x| x.is_finite()) {
            d = rhs;
            slope = -gn * gn;
        }
        let mut step = 1.0;
        let mut accepted = false;
        for _ in 0..MAX_HALVINGS {
            let cand = &r + &d * step;
            let (yc, vc) = problem.point(&cand);
            let valc = problem.value(&yc, &vc);
            let armijo = valc <= val + ARMIJO_SLOPE * step * slope;
            // a full Newton step that only loses to rounding noise is still a step toward the optimum
            let noise = step == 1.0 && valc <= val + 1e-14 * (1.0 + val.abs());
            if valc.is_finite() && (armijo || noise) {
                r = cand;
                y = yc;
                v = vc;
                val = valc;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        iter += 1;
        if !accepted {
            return Err(Error::Convergence {
                iterations: iter,
                residual: gn,
            });
        }
    }
}

fn window_costs(model: &CostModel, t: usize, p: usize) -> (Vec<&CostFn>, Vec<&CostFn>) {
    let fs = (1..=p).map(|tau| model.f(t + tau)).collect();
    let cs = (1..=p).map(|tau| model.c(t + tau)).collect();
    (fs, cs)
}

fn check_inputs(
    sys: &LtvSystem,
    model: &CostModel,
    t: usize,
    p: usize,
    x: &DVector<f64>,
    zeta: &[DVector<f64>],
) -> Result<()> {
    check_window(sys, t, p)?;
    model.check_compatible(sys)?;
    if x.len() != sys.state_dim() {
        return Err(Error::Validation(format!(
            "initial state has length {}, expected {}",
            x.len(),
            sys.state_dim()
        )));
    }
    if zeta.len() != p || zeta.iter().any(|w| w.len() != sys.state_dim()) {
        return Err(Error::Validation(format!(
            "disturbance segment must hold {p} vectors of length {}",
            sys.state_dim()
        )));
    }
    Ok(())
}

fn finish(
    sys: &LtvSystem,
    problem: &Reduced,
    outcome: &NewtonOutcome,
    t: usize,
    x: &DVector<f64>,
    zeta: &[DVector<f64>],
) -> (Vec<DVector<f64>>, Vec<DVector<f64>>, f64) {
    let (_, v) = problem.point(&outcome.r);
    let m = sys.control_dim();
    let controls: Vec<DVector<f64>> = (0..problem.p)
        .map(|j| v.rows(j * m, m).into_owned())
        .collect();
    let mut states = Vec::with_capacity(problem.p + 1);
    states.push(x.clone());
    for tau in 0..problem.p {
        let next = sys.a(t + tau) * &states[tau] + sys.b(t + tau) * &controls[tau] + &zeta[tau];
        states.push(next);
    }
    let mut value = 0.0;
    for tau in 0..problem.p {
        value += problem.fs[tau].value(&states[tau + 1]) + problem.cs[tau].value(&controls[tau]);
    }
    if let Some(g) = problem.terminal {
        value += g.value(&states[problem.p]);
    }
    (states, controls, value)
}

fn terminal_cost_problem<'a>(
    sys: &LtvSystem,
    model: &'a CostModel,
    terminal: Option<&'a CostFn>,
    t: usize,
    p: usize,
    x: &DVector<f64>,
    zeta: &[DVector<f64>],
) -> Reduced<'a> {
    let (n, m) = (sys.state_dim(), sys.control_dim());
    let (s_x, s_v, s_zeta) = rollout_maps(sys, t, p);
    let zeta_stacked = linalg::stack(zeta);
    let y_all = &s_x * x + &s_zeta * zeta_stacked;
    let (fs, cs) = window_costs(model, t, p);
    Reduced {
        n,
        m,
        p,
        fs,
        cs,
        terminal,
        y_base: y_all.rows(n, n * p).into_owned(),
        v_base: DVector::zeros(m * p),
        ymap: s_v.rows(n, n * p).into_owned(),
        vmap: None,
    }
}

fn terminal_constraint_problem<'a>(
    sys: &LtvSystem,
    model: &'a CostModel,
    maps: &StackedMaps,
    x: &DVector<f64>,
    zeta: &[DVector<f64>],
    z: &DVector<f64>,
) -> Result<Reduced<'a>> {
    let (n, m) = (sys.state_dim(), sys.control_dim());
    let (t, p) = (maps.t, maps.p);
    let basis = match maps.nullspace() {
        Ok(v) => v.clone(),
        Err(_) => {
            let d = sys
                .analyze_controllability(DEFAULT_RANK_TOL)
                .map(|r| r.index)
                .unwrap_or(sys.horizon() + 1);
            return Err(Error::Reachability { p, d });
        }
    };
    let zeta_stacked = linalg::stack(zeta);
    let free = &maps.phi * x + &maps.r_zeta * &zeta_stacked;
    let target = z - &free;
    let mut v0 = &maps.m_dagger * &target;
    let resid = &target - &maps.m * &v0;
    v0 += &maps.m_dagger * resid;
    let y_all = &maps.s_x * x + &maps.s_v * &v0 + &maps.s_zeta * &zeta_stacked;
    let sv_rows = maps.s_v.rows(n, n * p);
    let (fs, cs) = window_costs(model, t, p);
    Ok(Reduced {
        n,
        m,
        p,
        fs,
        cs,
        terminal: None,
        y_base: y_all.rows(n, n * p).into_owned(),
        v_base: v0,
        ymap: sv_rows * &basis,
        vmap: Some(basis),
    })
}

/// ψ̃_t^p(x, ζ; F): optimal p-step trajectory from `x` with terminal cost `terminal`.
pub fn solve_terminal_cost(
    sys: &LtvSystem,
    model: &CostModel,
    terminal: &TerminalCost,
    t: usize,
    p: usize,
    x: &DVector<f64>,
    zeta: &[DVector<f64>],
) -> Result<SolveResult> {
    solve_terminal_cost_with(
        sys,
        model,
        terminal,
        t,
        p,
        x,
        zeta,
        &SolverOptions::default(),
    )
}

#[allow(clippy::too_many_arguments)]
pub fn solve_terminal_cost_with(
    sys: &LtvSystem,
    model: &CostModel,
    terminal: &TerminalCost,
    t: usize,
    p: usize,
    x: &DVector<f64>,
    zeta: &[DVector<f64>],
    opts: &SolverOptions,
) -> Result<SolveResult> {
    let smooth = match terminal {
        TerminalCost::IndicatorOrigin => {
            let z = DVector::zeros(sys.state_dim());
            return solve_terminal_constraint_with(sys, model, t, p, x, zeta, &z, opts);
        }
        TerminalCost::Zero => None,
        TerminalCost::Smooth(g) => {
            if g.dim() != sys.state_dim() {
                return Err(Error::Validation("terminal cost dimension mismatch".into()));
            }
            Some(g)
        }
    };
    check_inputs(sys, model, t, p, x, zeta)?;
    if opts.use_riccati(p) {
        let out = riccati::Window::new(sys, model, smooth, t, p, x, zeta, None)
            .solve(opts.eps_opt, opts.max_iter)?;
        return Ok(from_riccati(out, 0.0));
    }
    let problem = terminal_cost_problem(sys, model, smooth, t, p, x, zeta);
    let outcome = newton(&problem, opts)?;
    let (states, controls, value) = finish(sys, &problem, &outcome, t, x, zeta);
    Ok(SolveResult {
        states,
        controls,
        value,
        grad_norm: outcome.grad_norm,
        iterations: outcome.iterations,
        terminal_residual: 0.0,
    })
}

/// ψ_t^p(x, ζ, z): optimal p-step trajectory from `x` constrained to end at `z`.
pub fn solve_terminal_constraint(
    sys: &LtvSystem,
    model: &CostModel,
    t: usize,
    p: usize,
    x: &DVector<f64>,
    zeta: &[DVector<f64>],
    z: &DVector<f64>,
) -> Result<SolveResult> {
    solve_terminal_constraint_with(sys, model, t, p, x, zeta, z, &SolverOptions::default())
}

#[allow(clippy::too_many_arguments)]
pub fn solve_terminal_constraint_with(
    sys: &LtvSystem,
    model: &CostModel,
    t: usize,
    p: usize,
    x: &DVector<f64>,
    zeta: &[DVector<f64>],
    z: &DVector<f64>,
    opts: &SolverOptions,
) -> Result<SolveResult> {
    check_inputs(sys, model, t, p, x, zeta)?;
    if z.len() != sys.state_dim() {
        return Err(Error::Validation(
            "terminal state dimension mismatch".into(),
        ));
    }
    if opts.use_riccati(p) {
        let out = riccati::Window::new(sys, model, None, t, p, x, zeta, Some(z))
            .solve(opts.eps_opt, opts.max_iter)?;
        let residual = (&out.states[p] - z).norm();
        return Ok(from_riccati(out, residual));
    }
    let maps = build_stacked_maps(sys, t, p)?;
    let problem = terminal_constraint_problem(sys, model, &maps, x, zeta, z)?;
    let outcome = newton(&problem, opts)?;
    let (states, controls, value) = finish(sys, &problem, &outcome, t, x, zeta);
    let terminal_residual = (&states[p] - z).norm();
    Ok(SolveResult {
        states,
        controls,
        value,
        grad_norm: outcome.grad_norm,
        iterations: outcome.iterations,
        terminal_residual,
    })
}

/// ι_t^p(x, ζ, z).
pub fn optimal_value(
    sys: &LtvSystem,
    model: &CostModel,
    t: usize,
    p: usize,
    x: &DVector<f64>,
    zeta: &[DVector<f64>],
    z: &DVector<f64>,
) -> Result<f64> {
    Ok(solve_terminal_constraint(sys, model, t, p, x, zeta, z)?.value)
}

/// ξ_t^p(x, ζ, z) = ι_t^p(x, ζ, z) − f_{t+p}(z).
pub fn switching_cost(
    sys: &LtvSystem,
    model: &CostModel,
    t: usize,
    p: usize,
    x: &DVector<f64>,
    zeta: &[DVector<f64>],
    z: &DVector<f64>,
) -> Result<f64> {
    let iota = optimal_value(sys, model, t, p, x, zeta, z)?;
    Ok(iota - model.f(t + p).value(z))
}

/// Offline optimum: ψ̃_0^T(x_0, w_{0:T−1}; 0).
pub fn offline_optimal(sys: &LtvSystem, model: &CostModel) -> Result<SolveResult> {
    solve_terminal_cost(
        sys,
        model,
        &TerminalCost::Zero,
        0,
        sys.horizon(),
        sys.x0(),
        sys.disturbances(),
    )
}

/// Hessian of the reduced objective at the optimum (in v for terminal costs, in r for the
/// indicator terminal cost).
pub fn reduced_hessian_at_solution(
    sys: &LtvSystem,
    model: &CostModel,
    terminal: &TerminalCost,
    t: usize,
    p: usize,
    x: &DVector<f64>,
    zeta: &[DVector<f64>],
) -> Result<DMatrix<f64>> {
    check_inputs(sys, model, t, p, x, zeta)?;
    let opts = SolverOptions::default();
    let maps;
    let problem = match terminal {
        TerminalCost::IndicatorOrigin => {
            maps = build_stacked_maps(sys, t, p)?;
            terminal_constraint_problem(
                sys,
                model,
                &maps,
                x,
                zeta,
                &DVector::zeros(sys.state_dim()),
            )?
        }
        TerminalCost::Zero => terminal_cost_problem(sys, model, None, t, p, x, zeta),
        TerminalCost::Smooth(g) => terminal_cost_problem(sys, model, Some(g), t, p, x, zeta),
    };
    let outcome = newton(&problem, &opts)?;
    let (y, v) = problem.point(&outcome.r);
    Ok(problem.hessian(&y, &v))
}

/// ι_t^p and its first and second derivatives in θ = (x, ζ_0, …, ζ_{p−1}, z).
#[derive(Debug, Clone)]
pub struct ValueDerivatives {
    pub value: f64,
    pub gradient: DVector<f64>,
    pub hessian: DMatrix<f64>,
    pub solution: SolveResult,
}

/// Derivatives of the optimal value by implicit differentiation of the nullspace
/// parameterization: the stacked trajectory is W = Kθ + J r, so at the optimum
/// ∇ι = Kᵀ∇G and ∇²ι = KᵀHK − KᵀHJ (JᵀHJ)⁻¹ JᵀHK.
pub fn optimal_value_derivatives(
    sys: &LtvSystem,
    model: &CostModel,
    t: usize,
    p: usize,
    x: &DVector<f64>,
    zeta: &[DVector<f64>],
    z: &DVector<f64>,
) -> Result<ValueDerivatives> {
    check_inputs(sys, model, t, p, x, zeta)?;
    let (n, m) = (sys.state_dim(), sys.control_dim());
    let maps = build_stacked_maps(sys, t, p)?;
    let problem = terminal_constraint_problem(sys, model, &maps, x, zeta, z)?;
    let outcome = newton(&problem, &SolverOptions::default())?;
    let (states, controls, value) = finish(sys, &problem, &outcome, t, x, zeta);
    let (y, v) = problem.point(&outcome.r);

    let dim_theta = 2 * n + n * p;
    let (ny, nv) = (n * p, m * p);
    // K_v = M† [−Φ, −R_ζ, I]
    let mut rhs = DMatrix::zeros(n, dim_theta);
    rhs.view_mut((0, 0), (n, n)).copy_from(&(-&maps.phi));
    rhs.view_mut((0, n), (n, n * p)).copy_from(&(-&maps.r_zeta));
    rhs.view_mut((0, n + n * p), (n, n))
        .copy_from(&DMatrix::identity(n, n));
    let k_v = &maps.m_dagger * rhs;
    let mut k_y = DMatrix::zeros(ny, dim_theta);
    k_y.view_mut((0, 0), (ny, n))
        .copy_from(&maps.s_x.rows(n, ny));
    k_y.view_mut((0, n), (ny, n * p))
        .copy_from(&maps.s_zeta.rows(n, ny));
    k_y += maps.s_v.rows(n, ny) * &k_v;

    let mut k = DMatrix::zeros(ny + nv, dim_theta);
    k.rows_mut(0, ny).copy_from(&k_y);
    k.rows_mut(ny, nv).copy_from(&k_v);
    let basis = problem
        .vmap
        .as_ref()
        .expect("terminal-constrained problems carry a basis");
    let mut j = DMatrix::zeros(ny + nv, basis.ncols());
    j.rows_mut(0, ny).copy_from(&problem.ymap);
    j.rows_mut(ny, nv).copy_from(basis);

    let (gy, gv) = problem.stacked_gradients(&y, &v);
    let g = linalg::stack(&[gy, gv]);
    let (hy, hv) = problem.stacked_hessian_blocks(&y, &v);
    let mut h = DMatrix::zeros(ny + nv, ny + nv);
    for (tau, blk) in hy.iter().enumerate() {
        h.view_mut((tau * n, tau * n), (n, n)).copy_from(blk);
    }
    for (tau, blk) in hv.iter().enumerate() {
        h.view_mut((ny + tau * m, ny + tau * m), (m, m))
            .copy_from(blk);
    }
    let mut gradient = k.tr_mul(&g);
    let hk = &h * &k;
    let mut hessian = k.tr_mul(&hk);
    if j.ncols() > 0 {
        let hj = &h * &j;
        let jhj = j.tr_mul(&hj);
        let jhk = j.tr_mul(&hk);
        // the reduced gradient Jᵀg is only zero up to the solver tolerance; removing its
        // first-order effect keeps the gradient accurate enough to difference
        let mut rhs = DMatrix::zeros(jhj.nrows(), jhk.ncols() + 1);
        rhs.columns_mut(0, jhk.ncols()).copy_from(&jhk);
        rhs.column_mut(jhk.ncols()).copy_from(&j.tr_mul(&g));
        let solved = match jhj.clone().cholesky() {
            Some(ch) => ch.solve(&rhs),
            None => jhj
                .lu()
                .solve(&rhs)
                .ok_or_else(|| Error::Invariant("singular reduced Hessian".into()))?,
        };
        hessian -= jhk.tr_mul(&solved.columns(0, jhk.ncols()));
        gradient -= jhk.tr_mul(&solved.column(jhk.ncols()));
    }
    let hessian = (&hessian + hessian.transpose()) * 0.5;
    Ok(ValueDerivatives {
        value,
        gradient,
        hessian,
        solution: SolveResult {
            terminal_residual: (&states[p] - z).norm(),
            states,
            controls,
            value,
            grad_norm: outcome.grad_norm,
            iterations: outcome.iterations,
        },
    })
}

/// Derivatives of ξ_t^p = ι_t^p − f_{t+p}(z) in θ = (x, ζ, z).
pub fn switching_cost_derivatives(
    sys: &LtvSystem,
    model: &CostModel,
    t: usize,
    p: usize,
    x: &DVector<f64>,
    zeta: &[DVector<f64>],
    z: &DVector<f64>,
) -> Result<ValueDerivatives> {
    let mut out = optimal_value_derivatives(sys, model, t, p, x, zeta, z)?;
    let n = sys.state_dim();
    let off = n + n * p;
    let f_end = model.f(t + p);
    out.value -= f_end.value(z);
    let mut g = out.gradient.rows_mut(off, n);
    g -= f_end.gradient(z);
    let mut hb = out.hessian.view_mut((off, off), (n, n));
    hb -= f_end.hessian(z);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::costs::quadratic_family;
    use crate::system::{generate_instance, InstanceFamily, InstanceSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scalar_sys(horizon: usize, x0: f64) -> LtvSystem {
        LtvSystem::time_invariant(
            DMatrix::from_element(1, 1, 0.5),
            DMatrix::from_element(1, 1, 1.0),
            vec![DVector::zeros(1); horizon],
            DVector::from_element(1, x0),
        )
        .unwrap()
    }

    /// f(x) = x², c(u) = u².
    fn scalar_costs(horizon: usize) -> CostModel {
        quadratic_family(
            vec![DMatrix::from_element(1, 1, 2.0); horizon],
            vec![DMatrix::from_element(1, 1, 2.0); horizon],
        )
        .unwrap()
    }

    fn one(x: f64) -> DVector<f64> {
        DVector::from_element(1, x)
    }

    #[test]
    fn stacked_maps_scalar_one_step() {
        let sys = scalar_sys(3, 1.0);
        let maps = build_stacked_maps(&sys, 0, 1).unwrap();
        assert_eq!(maps.s_x.as_slice(), &[1.0, 0.5]);
        assert_eq!(maps.s_v.as_slice(), &[0.0, 1.0]);
        assert!(maps.is_full_row_rank());
        assert_eq!(maps.nullspace().unwrap().ncols(), 0);
    }

    #[test]
    fn stacked_maps_reproduce_rollout() {
        let spec = InstanceSpec::new(InstanceFamily::RandomGeneral, 2, 2, 8);
        let sys = generate_instance(&spec, 21).unwrap();
        let maps = build_stacked_maps(&sys, 2, 4).unwrap();
        let x = DVector::from_vec(vec![0.7, -1.2]);
        let v = DVector::from_fn(8, |i, _| (i as f64 * 0.37).sin());
        let zeta = DVector::from_fn(8, |i, _| (i as f64 * 0.11).cos());
        let y = maps.apply(&x, &v, &zeta);
        let mut state = x.clone();
        for tau in 0..4 {
            state = sys.a(2 + tau) * &state
                + sys.b(2 + tau) * v.rows(2 * tau, 2)
                + zeta.rows(2 * tau, 2);
            assert!((y.rows(2 * (tau + 1), 2) - &state).norm() < 1e-10);
        }
        let basis = maps.nullspace().unwrap();
        assert!(linalg::max_abs(&(&maps.m * basis)) < 1e-10);
        assert!(linalg::max_abs(&(basis.transpose() * basis - DMatrix::identity(6, 6))) < 1e-10);
        assert!(linalg::max_abs(&(&maps.m * &maps.m_dagger - DMatrix::identity(2, 2))) < 1e-8);
        let zero = maps.apply(&DVector::zeros(2), &DVector::zeros(8), &DVector::zeros(8));
        assert_eq!(zero.norm(), 0.0);
    }

    #[test]
    fn rank_deficient_window_has_no_nullspace() {
        let sys = LtvSystem::time_invariant(
            DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 1.0]),
            DMatrix::from_row_slice(2, 1, &[0.0, 1.0]),
            vec![DVector::zeros(2); 4],
            DVector::zeros(2),
        )
        .unwrap();
        let maps = build_stacked_maps(&sys, 0, 1).unwrap();
        assert!(matches!(maps.nullspace(), Err(Error::Rank { .. })));
        let model = quadratic_family(
            vec![DMatrix::identity(2, 2); 4],
            vec![DMatrix::identity(1, 1); 4],
        )
        .unwrap();
        let zeta = vec![DVector::zeros(2)];
        let r = solve_terminal_constraint(
            &sys,
            &model,
            0,
            1,
            &DVector::zeros(2),
            &zeta,
            &DVector::zeros(2),
        );
        assert!(matches!(r, Err(Error::Reachability { p: 1, d: 2 })));
    }

    #[test]
    fn one_step_terminal_cost_closed_form() {
        let sys = scalar_sys(1, 1.0);
        let model = scalar_costs(1);
        let res = solve_terminal_cost(
            &sys,
            &model,
            &TerminalCost::Zero,
            0,
            1,
            &one(1.0),
            &[one(0.0)],
        )
        .unwrap();
        assert!((res.controls[0][0] + 0.25).abs() < 1e-12);
        assert!((res.states[1][0] - 0.25).abs() < 1e-12);
        assert!((res.value - 0.125).abs() < 1e-12);
        let opt = offline_optimal(&sys, &model).unwrap();
        assert!((opt.value - 0.125).abs() < 1e-12);
    }

    #[test]
    fn one_step_terminal_constraint_closed_form() {
        let sys = scalar_sys(2, 1.0);
        let model = scalar_costs(2);
        let res = solve_terminal_constraint(&sys, &model, 0, 1, &one(1.0), &[one(0.0)], &one(0.0))
            .unwrap();
        assert!((res.controls[0][0] + 0.5).abs() < 1e-12);
        assert!((res.value - 0.25).abs() < 1e-12);
        let xi = switching_cost(&sys, &model, 0, 1, &one(1.0), &[one(0.0)], &one(0.0)).unwrap();
        assert!((xi - 0.25).abs() < 1e-12);
    }

    #[test]
    fn origin_is_a_fixed_point() {
        let sys = scalar_sys(4, 0.0);
        let model = scalar_costs(4);
        let zeta = vec![one(0.0); 3];
        for f in [
            TerminalCost::Zero,
            TerminalCost::IndicatorOrigin,
            TerminalCost::Smooth(CostFn::scaled_identity(3.0, 1).unwrap()),
        ] {
            let res = solve_terminal_cost(&sys, &model, &f, 0, 3, &one(0.0), &zeta).unwrap();
            assert_eq!(res.value, 0.0);
            assert!(res.states.iter().all(|s| s.norm() == 0.0));
        }
    }

    #[test]
    fn indicator_dispatch_matches_constraint() {
        let spec = InstanceSpec::new(InstanceFamily::RandomStable, 2, 1, 8);
        let sys = generate_instance(&spec, 4).unwrap();
        let model = quadratic_family(
            vec![DMatrix::identity(2, 2); 8],
            vec![DMatrix::identity(1, 1); 8],
        )
        .unwrap();
        let zeta = sys.disturbance_window(1, 5).unwrap();
        let a = solve_terminal_cost(
            &sys,
            &model,
            &TerminalCost::IndicatorOrigin,
            1,
            5,
            sys.x0(),
            &zeta,
        )
        .unwrap();
        let b = solve_terminal_constraint(&sys, &model, 1, 5, sys.x0(), &zeta, &DVector::zeros(2))
            .unwrap();
        assert_eq!(a, b);
        assert!(a.terminal_residual <= 1e-10);
        assert!(a.segment_residual(&sys, 1, &zeta) <= 1e-12);
    }

    #[test]
    fn zero_window_rejected() {
        let sys = scalar_sys(3, 1.0);
        let model = scalar_costs(3);
        let r = solve_terminal_cost(&sys, &model, &TerminalCost::Zero, 0, 0, &one(1.0), &[]);
        assert!(matches!(r, Err(Error::Range(_))));
        let r = solve_terminal_cost(
            &sys,
            &model,
            &TerminalCost::Zero,
            2,
            2,
            &one(1.0),
            &[one(0.0), one(0.0)],
        );
        assert!(matches!(r, Err(Error::Range(_))));
    }

    #[test]
    fn derivative_gradient_matches_finite_differences() {
        let spec = InstanceSpec::new(InstanceFamily::RandomStable, 2, 1, 6);
        let sys = generate_instance(&spec, 8).unwrap();
        let model = crate::costs::pseudo_huber_family(1.0, 0.7, 2, 1, 6).unwrap();
        let x = DVector::from_vec(vec![0.4, -0.9]);
        let z = DVector::from_vec(vec![0.2, 0.3]);
        let zeta = sys.disturbance_window(0, 3).unwrap();
        let der = optimal_value_derivatives(&sys, &model, 0, 3, &x, &zeta, &z).unwrap();
        let h = 1e-6;
        for i in 0..2 {
            let mut xp = x.clone();
            xp[i] += h;
            let mut xm = x.clone();
            xm[i] -= h;
            let fd = (optimal_value(&sys, &model, 0, 3, &xp, &zeta, &z).unwrap()
                - optimal_value(&sys, &model, 0, 3, &xm, &zeta, &z).unwrap())
                / (2.0 * h);
            assert!(
                (fd - der.gradient[i]).abs() < 1e-6,
                "{fd} vs {}",
                der.gradient[i]
            );
        }
    }

    fn method(method: SolveMethod) -> SolverOptions {
        SolverOptions {
            method,
            eps_opt: 1e-11,
            ..SolverOptions::default()
        }
    }

    fn assert_same(a: &SolveResult, b: &SolveResult, tol: f64) {
        assert!(
            (a.value - b.value).abs() <= tol * (1.0 + a.value.abs()),
            "{} vs {}",
            a.value,
            b.value
        );
        for (x, y) in a.states.iter().zip(&b.states) {
            assert!((x - y).amax() <= tol * 10.0, "{x} vs {y}");
        }
    }

    #[test]
    fn riccati_matches_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (family, p) in [(0, 3), (0, 12), (1, 9), (1, 20)] {
            let spec = InstanceSpec::new(InstanceFamily::RandomGeneral, 3, 2, 24);
            let sys = generate_instance(&spec, 40 + p as u64).unwrap();
            let model = if family == 0 {
                crate::costs::random_quadratic_family(&mut rng, 3, 2, 24, (0.5, 2.0), (0.5, 2.0))
                    .unwrap()
            } else {
                crate::costs::pseudo_huber_family(1.0, 0.7, 3, 2, 24).unwrap()
            };
            let t = 2;
            let zeta = sys.disturbance_window(t, p).unwrap();
            let x = DVector::from_vec(vec![0.8, -1.1, 0.3]);
            let z = DVector::from_vec(vec![0.2, 0.1, -0.4]);
            for terminal in [
                TerminalCost::Zero,
                TerminalCost::Smooth(CostFn::scaled_identity(2.0, 3).unwrap()),
            ] {
                let d = solve_terminal_cost_with(
                    &sys,
                    &model,
                    &terminal,
                    t,
                    p,
                    &x,
                    &zeta,
                    &method(SolveMethod::Dense),
                )
                .unwrap();
                let r = solve_terminal_cost_with(
                    &sys,
                    &model,
                    &terminal,
                    t,
                    p,
                    &x,
                    &zeta,
                    &method(SolveMethod::Riccati),
                )
                .unwrap();
                assert_same(&d, &r, 1e-9);
            }
            if p >= 2 {
                let d = solve_terminal_constraint_with(
                    &sys,
                    &model,
                    t,
                    p,
                    &x,
                    &zeta,
                    &z,
                    &method(SolveMethod::Dense),
                )
                .unwrap();
                let r = solve_terminal_constraint_with(
                    &sys,
                    &model,
                    t,
                    p,
                    &x,
                    &zeta,
                    &z,
                    &method(SolveMethod::Riccati),
                )
                .unwrap();
                assert_same(&d, &r, 1e-9);
                assert!(r.terminal_residual < 1e-9);
            }
        }
    }

    #[test]
    fn riccati_reports_unreachable_terminal() {
        // n = 2, m = 1 needs two steps to reach an arbitrary state
        let spec = InstanceSpec::new(InstanceFamily::RandomStable, 2, 1, 10);
        let sys = generate_instance(&spec, 5).unwrap();
        let model = crate::costs::pseudo_huber_family(1.0, 0.5, 2, 1, 10).unwrap();
        let zeta = sys.disturbance_window(0, 1).unwrap();
        let x = DVector::from_vec(vec![1.0, 0.0]);
        let z = DVector::from_vec(vec![0.0, 1.0]);
        let out = solve_terminal_constraint_with(
            &sys,
            &model,
            0,
            1,
            &x,
            &zeta,
            &z,
            &method(SolveMethod::Riccati),
        );
        assert!(matches!(out, Err(Error::Reachability { .. })));
    }

    #[test]
    fn long_window_is_fast_and_optimal() {
        let horizon = 600;
        let sys = scalar_sys(horizon, 1.5);
        let model = scalar_costs(horizon);
        let zeta = sys.disturbance_window(0, horizon).unwrap();
        let res = solve_terminal_cost(
            &sys,
            &model,
            &TerminalCost::Zero,
            0,
            horizon,
            sys.x0(),
            &zeta,
        )
        .unwrap();
        // stationary scalar LQR: u = −K x with P = 1 + a²P − a²P²/(1 + P)
        let a: f64 = 0.5;
        let mut pinf = 1.0;
        for _ in 0..200 {
            pinf = 1.0 + a * a * pinf - (a * pinf).powi(2) / (1.0 + pinf);
        }
        let gain = a * pinf / (1.0 + pinf);
        let ratio = res.controls[0][0] / res.states[0][0];
        assert!((ratio + gain).abs() < 1e-9, "{ratio} vs {}", -gain);
    }
}

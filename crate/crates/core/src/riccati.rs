//! Structured Newton solver for long windows.
//!
//! The Newton step of a window problem is an LQR problem in the step (δy, δv) with
//! δy_0 = 0. A backward Riccati sweep factors it in O(p(n + m)³) instead of the O((mp)³)
//! of the dense reduced Hessian. A terminal equality δy_p = target is handled with a
//! multiplier on y_p: the step is affine in the multiplier, so n + 1 extra linear sweeps
//! over the same factorization pin it down.

use nalgebra::linalg::Cholesky;
use nalgebra::{DMatrix, DVector, Dyn};

use crate::costs::{CostFn, CostModel};
use crate::error::{Error, Result};
use crate::linalg;
use crate::system::{LtvSystem, DEFAULT_RANK_TOL};

const ARMIJO_SLOPE: f64 = 1e-4;
const MAX_HALVINGS: usize = 60;

pub(crate) struct Window<'a> {
    sys: &'a LtvSystem,
    t: usize,
    p: usize,
    fs: Vec<&'a CostFn>,
    cs: Vec<&'a CostFn>,
    terminal: Option<&'a CostFn>,
    x: &'a DVector<f64>,
    zeta: &'a [DVector<f64>],
    /// Terminal state for the constrained problem.
    z: Option<&'a DVector<f64>>,
}

pub(crate) struct Outcome {
    pub states: Vec<DVector<f64>>,
    pub controls: Vec<DVector<f64>>,
    pub value: f64,
    pub grad_norm: f64,
    pub iterations: usize,
}

struct Factor {
    /// Cholesky factors of Q_uu = H_v + BᵀPB, per step.
    quu: Vec<Cholesky<f64, Dyn>>,
    /// Feedback gains K = Q_uu⁻¹ BᵀPA, per step.
    gain: Vec<DMatrix<f64>>,
}

impl<'a> Window<'a> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        sys: &'a LtvSystem,
        model: &'a CostModel,
        terminal: Option<&'a CostFn>,
        t: usize,
        p: usize,
        x: &'a DVector<f64>,
        zeta: &'a [DVector<f64>],
        z: Option<&'a DVector<f64>>,
    ) -> Self {
        Self {
            sys,
            t,
            p,
            fs: (1..=p).map(|tau| model.f(t + tau)).collect(),
            cs: (1..=p).map(|tau| model.c(t + tau)).collect(),
            terminal,
            x,
            zeta,
            z,
        }
    }

    fn a(&self, tau: usize) -> &DMatrix<f64> {
        self.sys.a(self.t + tau)
    }

    fn b(&self, tau: usize) -> &DMatrix<f64> {
        self.sys.b(self.t + tau)
    }

    fn rollout(&self, v: &[DVector<f64>]) -> Vec<DVector<f64>> {
        let mut ys = Vec::with_capacity(self.p + 1);
        ys.push(self.x.clone());
        for tau in 0..self.p {
            let next = self.a(tau) * &ys[tau] + self.b(tau) * &v[tau] + &self.zeta[tau];
            ys.push(next);
        }
        ys
    }

    fn value(&self, ys: &[DVector<f64>], v: &[DVector<f64>]) -> f64 {
        let mut total = 0.0;
        for tau in 0..self.p {
            total += self.fs[tau].value(&ys[tau + 1]) + self.cs[tau].value(&v[tau]);
        }
        if let Some(g) = self.terminal {
            total += g.value(&ys[self.p]);
        }
        total
    }

    /// State and control gradients of the stage costs: entry τ of the first vector is the
    /// gradient at y_{τ+1}.
    fn stage_gradients(
        &self,
        ys: &[DVector<f64>],
        v: &[DVector<f64>],
    ) -> (Vec<DVector<f64>>, Vec<DVector<f64>>) {
        let p = self.p;
        let gy = (0..p)
            .map(|tau| {
                let mut g = self.fs[tau].gradient(&ys[tau + 1]);
                if tau == p - 1 {
                    if let Some(term) = self.terminal {
                        g += term.gradient(&ys[p]);
                    }
                }
                g
            })
            .collect();
        let gv = (0..p).map(|tau| self.cs[tau].gradient(&v[tau])).collect();
        (gy, gv)
    }

    /// Gradient of the objective in the controls, by the adjoint recursion.
    fn control_gradient(&self, gy: &[DVector<f64>], gv: &[DVector<f64>]) -> Vec<DVector<f64>> {
        let mut lam = DVector::zeros(self.sys.state_dim());
        let mut out = vec![DVector::zeros(0); self.p];
        for tau in (0..self.p).rev() {
            lam = if tau + 1 < self.p {
                &gy[tau] + self.a(tau + 1).tr_mul(&lam)
            } else {
                gy[tau].clone()
            };
            out[tau] = &gv[tau] + self.b(tau).tr_mul(&lam);
        }
        out
    }

    fn factor(&self, ys: &[DVector<f64>], v: &[DVector<f64>]) -> Result<Factor> {
        let p = self.p;
        let hy = |tau: usize| {
            let mut h = self.fs[tau].hessian(&ys[tau + 1]);
            if tau == p - 1 {
                if let Some(term) = self.terminal {
                    h += term.hessian(&ys[p]);
                }
            }
            h
        };
        let mut quu = Vec::with_capacity(p);
        let mut gain = Vec::with_capacity(p);
        let mut pm = hy(p - 1);
        for tau in (0..p).rev() {
            let (a, b) = (self.a(tau), self.b(tau));
            let pb = &pm * b;
            let mut q = self.cs[tau].hessian(&v[tau]) + b.tr_mul(&pb);
            q = (&q + q.transpose()) * 0.5;
            let qux = pb.tr_mul(a);
            let chol = q.cholesky().ok_or_else(|| {
                Error::Invariant(format!(
                    "Riccati pivot at step {tau} is not positive definite"
                ))
            })?;
            let k = chol.solve(&qux);
            if tau > 0 {
                let next = a.tr_mul(&(&pm * a)) - qux.tr_mul(&k) + hy(tau - 1);
                pm = (&next + next.transpose()) * 0.5;
            }
            quu.push(chol);
            gain.push(k);
        }
        quu.reverse();
        gain.reverse();
        Ok(Factor { quu, gain })
    }

    /// Minimizer of the quadratic model with linear terms (gy, gv) plus `extra`ᵀδy_p.
    /// Returns the control step and the resulting δy_p.
    fn sweep(
        &self,
        f: &Factor,
        gy: &[DVector<f64>],
        gv: &[DVector<f64>],
        extra: Option<&DVector<f64>>,
    ) -> (Vec<DVector<f64>>, DVector<f64>) {
        let (n, p) = (self.sys.state_dim(), self.p);
        let mut s = match extra {
            Some(e) => &gy[p - 1] + e,
            None => gy[p - 1].clone(),
        };
        let mut ff = vec![DVector::zeros(0); p];
        for tau in (0..p).rev() {
            let qu = &gv[tau] + self.b(tau).tr_mul(&s);
            ff[tau] = f.quu[tau].solve(&qu);
            if tau > 0 {
                s = self.a(tau).tr_mul(&s) - f.gain[tau].tr_mul(&qu) + &gy[tau - 1];
            }
        }
        let mut dy = DVector::zeros(n);
        let mut dv = Vec::with_capacity(p);
        for tau in 0..p {
            let step = -(&f.gain[tau] * &dy) - &ff[tau];
            dy = self.a(tau) * &dy + self.b(tau) * &step;
            dv.push(step);
        }
        (dv, dy)
    }

    /// Newton step, constrained to move y_p by `target` when given.
    fn step(
        &self,
        f: &Factor,
        gy: &[DVector<f64>],
        gv: &[DVector<f64>],
        target: Option<&DVector<f64>>,
    ) -> Result<Vec<DVector<f64>>> {
        let (mut dv, dy) = self.sweep(f, gy, gv, None);
        let Some(target) = target else {
            return Ok(dv);
        };
        let n = self.sys.state_dim();
        let zy: Vec<DVector<f64>> = vec![DVector::zeros(n); self.p];
        let zv: Vec<DVector<f64>> = gv.iter().map(|g| DVector::zeros(g.len())).collect();
        let mut g = DMatrix::zeros(n, n);
        let mut cols = Vec::with_capacity(n);
        for i in 0..n {
            let mut e = DVector::zeros(n);
            e[i] = 1.0;
            let (dvi, dyi) = self.sweep(f, &zy, &zv, Some(&e));
            g.set_column(i, &dyi);
            cols.push(dvi);
        }
        let nu = g
            .lu()
            .solve(&(target - dy))
            .ok_or_else(|| Error::Invariant("terminal multiplier system is singular".into()))?;
        for (i, col) in cols.iter().enumerate() {
            for (d, c) in dv.iter_mut().zip(col) {
                d.axpy(nu[i], c, 1.0);
            }
        }
        Ok(dv)
    }

    /// Gramian M Mᵀ of the window's controllability matrix.
    fn gramian(&self) -> DMatrix<f64> {
        let n = self.sys.state_dim();
        let mut w = DMatrix::zeros(n, n);
        for tau in 0..self.p {
            let (a, b) = (self.a(tau), self.b(tau));
            w = a * &w * a.transpose() + b * b.transpose();
        }
        w
    }

    /// g − Mᵀ(MMᵀ)⁻¹Mg: the component of the control gradient tangent to the terminal constraint.
    fn project(&self, g: &[DVector<f64>], w_chol: &Cholesky<f64, Dyn>) -> Vec<DVector<f64>> {
        let n = self.sys.state_dim();
        let mut y = DVector::zeros(n);
        for tau in 0..self.p {
            y = self.a(tau) * &y + self.b(tau) * &g[tau];
        }
        let mu = w_chol.solve(&y);
        let mut lam = mu;
        let mut out = vec![DVector::zeros(0); self.p];
        for tau in (0..self.p).rev() {
            if tau + 1 < self.p {
                lam = self.a(tau + 1).tr_mul(&lam);
            }
            out[tau] = &g[tau] - self.b(tau).tr_mul(&lam);
        }
        out
    }

    pub fn solve(&self, eps_opt: f64, max_iter: usize) -> Result<Outcome> {
        let m = self.sys.control_dim();
        let mut v: Vec<DVector<f64>> = vec![DVector::zeros(m); self.p];
        let w_chol = match self.z {
            Some(z) => {
                let w = self.gramian();
                let (lo, hi) = linalg::sym_eig_range(&w);
                let full = hi > 0.0 && lo.max(0.0).sqrt() > DEFAULT_RANK_TOL * hi.sqrt();
                let chol = full.then(|| w.cholesky()).flatten();
                let Some(chol) = chol else {
                    let d = self
                        .sys
                        .analyze_controllability(DEFAULT_RANK_TOL)
                        .map(|r| r.index)
                        .unwrap_or(self.sys.horizon() + 1);
                    return Err(Error::Reachability { p: self.p, d });
                };
                // a full Newton step from v = 0 lands on the constraint
                let ys = self.rollout(&v);
                let (gy, gv) = self.stage_gradients(&ys, &v);
                let f = self.factor(&ys, &v)?;
                v = self.step(&f, &gy, &gv, Some(&(z - &ys[self.p])))?;
                Some(chol)
            }
            None => None,
        };
        let mut ys = self.rollout(&v);
        let mut val = self.value(&ys, &v);
        let mut iter = 0;
        loop {
            let (gy, gv) = self.stage_gradients(&ys, &v);
            let full = self.control_gradient(&gy, &gv);
            let g = match &w_chol {
                Some(c) => self.project(&full, c),
                None => full.clone(),
            };
            let gn = g.iter().map(|b| b.norm_squared()).sum::<f64>().sqrt();
            if gn <= eps_opt * (1.0 + val.abs()) {
                return Ok(Outcome {
                    states: ys,
                    controls: v,
                    value: val,
                    grad_norm: gn,
                    iterations: iter,
                });
            }
            if iter >= max_iter {
                return Err(Error::Convergence {
                    iterations: iter,
                    residual: gn,
                });
            }
            let f = self.factor(&ys, &v)?;
            let target = self.z.map(|z| z - &ys[self.p]);
            let mut d = self.step(&f, &gy, &gv, target.as_ref())?;
            let dot = |a: &[DVector<f64>], b: &[DVector<f64>]| {
                a.iter().zip(b).map(|(x, y)| x.dot(y)).sum::<f64>()
            };
            let mut slope = dot(&full, &d);
            if !(slope < 0.0) || !d.iter().all(|b| b.iter().all(|x| x.is_finite())) {
                d = g.iter().map(|b| -b).collect();
                slope = -gn * gn;
            }
            let mut step = 1.0;
            let mut accepted = false;
            for _ in 0..MAX_HALVINGS {
                let cand: Vec<DVector<f64>> = v.iter().zip(&d).map(|(a, b)| a + b * step).collect();
                let yc = self.rollout(&cand);
                let valc = self.value(&yc, &cand);
                let armijo = valc <= val + ARMIJO_SLOPE * step * slope;
                let noise = step == 1.0 && valc <= val + 1e-14 * (1.0 + val.abs());
                if valc.is_finite() && (armijo || noise) {
                    v = cand;
                    ys = yc;
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
}

//! Independent reference solvers and instance builders shared by the integration tests.
#![allow(dead_code)]

use ltv_pc::analysis::{theory_constants, TheoryConstants};
use ltv_pc::costs::{quadratic_family, CostFn, CostModel};
use ltv_pc::system::DEFAULT_RANK_TOL;
use ltv_pc::LtvSystem;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Quadratic window problem: minimize Σ_{τ=1}^{p} ½y_τᵀQ_τy_τ + ½v_{τ−1}ᵀR_τv_{τ−1}
/// (+ ½y_pᵀQ_F y_p) subject to the dynamics and optionally y_p = z, solved as one dense KKT system.
pub struct KktWindow<'a> {
    pub sys: &'a LtvSystem,
    pub t: usize,
    pub p: usize,
    pub q: Vec<DMatrix<f64>>,
    pub r: Vec<DMatrix<f64>>,
    pub q_terminal: Option<DMatrix<f64>>,
}

impl KktWindow<'_> {
    /// Returns (value, states y_0..y_p).
    pub fn solve(
        &self,
        x: &DVector<f64>,
        zeta: &[DVector<f64>],
        z: Option<&DVector<f64>>,
    ) -> (f64, Vec<DVector<f64>>) {
        let (n, m, p, t) = (self.sys.state_dim(), self.sys.control_dim(), self.p, self.t);
        let ny = n * p;
        let nv = m * p;
        let nvar = ny + nv;
        let ncon = n * p + if z.is_some() { n } else { 0 };
        let mut h = DMatrix::zeros(nvar, nvar);
        for tau in 0..p {
            let mut qb = self.q[tau].clone();
            if tau == p - 1 {
                if let Some(qf) = &self.q_terminal {
                    qb += qf;
                }
            }
            h.view_mut((tau * n, tau * n), (n, n)).copy_from(&qb);
            h.view_mut((ny + tau * m, ny + tau * m), (m, m))
                .copy_from(&self.r[tau]);
        }
        let mut e = DMatrix::zeros(ncon, nvar);
        let mut rhs = DVector::zeros(ncon);
        for tau in 0..p {
            // y_{τ+1} − A y_τ − B v_τ = ζ_τ, with y_0 = x moved to the right side
            e.view_mut((tau * n, tau * n), (n, n))
                .copy_from(&DMatrix::identity(n, n));
            if tau > 0 {
                e.view_mut((tau * n, (tau - 1) * n), (n, n))
                    .copy_from(&(-self.sys.a(t + tau)));
            }
            e.view_mut((tau * n, ny + tau * m), (n, m))
                .copy_from(&(-self.sys.b(t + tau)));
            let mut r = zeta[tau].clone();
            if tau == 0 {
                r += self.sys.a(t) * x;
            }
            rhs.rows_mut(tau * n, n).copy_from(&r);
        }
        if let Some(z) = z {
            e.view_mut((n * p, (p - 1) * n), (n, n))
                .copy_from(&DMatrix::identity(n, n));
            rhs.rows_mut(n * p, n).copy_from(z);
        }
        let dim = nvar + ncon;
        let mut kkt = DMatrix::zeros(dim, dim);
        kkt.view_mut((0, 0), (nvar, nvar)).copy_from(&h);
        kkt.view_mut((nvar, 0), (ncon, nvar)).copy_from(&e);
        kkt.view_mut((0, nvar), (nvar, ncon))
            .copy_from(&e.transpose());
        let mut b = DVector::zeros(dim);
        b.rows_mut(nvar, ncon).copy_from(&rhs);
        let sol = kkt.lu().solve(&b).expect("KKT system is nonsingular");
        let u = sol.rows(0, nvar).into_owned();
        let value = 0.5 * u.dot(&(&h * &u));
        let mut states = vec![x.clone()];
        for tau in 0..p {
            states.push(u.rows(tau * n, n).into_owned());
        }
        (value, states)
    }
}

/// ½m‖x‖² + α Σ_i (√(1 + x_i²) − 1), written out independently of the library.
#[derive(Clone, Copy)]
pub struct Huber {
    pub m: f64,
    pub alpha: f64,
}

impl Huber {
    pub fn value(&self, x: &DVector<f64>) -> f64 {
        0.5 * self.m * x.dot(x)
            + self.alpha * x.iter().map(|v| (1.0 + v * v).sqrt() - 1.0).sum::<f64>()
    }

    pub fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        x.map(|v| self.m * v + self.alpha * v / (1.0 + v * v).sqrt())
    }

    pub fn smoothness(&self) -> f64 {
        self.m + self.alpha
    }
}

/// Accelerated projected gradient on the stacked controls, run to convergence. Handles the
/// terminal-cost problem with zero terminal cost (z = None) and the terminal-constrained one.
pub fn huber_pg_oracle(
    sys: &LtvSystem,
    cost: Huber,
    t: usize,
    p: usize,
    x: &DVector<f64>,
    zeta: &[DVector<f64>],
    z: Option<&DVector<f64>>,
) -> f64 {
    let (n, m) = (sys.state_dim(), sys.control_dim());
    let roll = |v: &DVector<f64>, x0: &DVector<f64>, with_w: bool| -> Vec<DVector<f64>> {
        let mut ys = vec![x0.clone()];
        for tau in 0..p {
            let mut next = sys.a(t + tau) * &ys[tau] + sys.b(t + tau) * v.rows(tau * m, m);
            if with_w {
                next += &zeta[tau];
            }
            ys.push(next);
        }
        ys
    };
    // linear map v ↦ (y_1..y_p) and the terminal map M from unit rollouts
    let mut s = DMatrix::zeros(n * p, m * p);
    for j in 0..m * p {
        let mut e = DVector::zeros(m * p);
        e[j] = 1.0;
        let ys = roll(&e, &DVector::zeros(n), false);
        for tau in 0..p {
            s.view_mut((tau * n, j), (n, 1)).copy_from(&ys[tau + 1]);
        }
    }
    let mmat = s.rows((p - 1) * n, n).into_owned();
    let free = roll(&DVector::zeros(m * p), x, true)[p].clone();
    let project: Box<dyn Fn(&DVector<f64>) -> DVector<f64>> = match z {
        Some(z) => {
            let pinv = mmat.clone().pseudo_inverse(1e-13).unwrap();
            let target = z - &free;
            Box::new(move |v: &DVector<f64>| {
                let mut out = v - &pinv * (&mmat * v - &target);
                out -= &pinv * (&mmat * &out - &target);
                out
            })
        }
        None => Box::new(|v: &DVector<f64>| v.clone()),
    };
    let objective = |v: &DVector<f64>| -> f64 {
        let ys = roll(v, x, true);
        (0..p)
            .map(|tau| cost.value(&ys[tau + 1]) + cost.value(&v.rows(tau * m, m).into_owned()))
            .sum()
    };
    let gradient = |v: &DVector<f64>| -> DVector<f64> {
        let ys = roll(v, x, true);
        let mut lam = DVector::zeros(n);
        let mut g = DVector::zeros(m * p);
        for tau in (0..p).rev() {
            lam = cost.gradient(&ys[tau + 1])
                + if tau + 1 < p {
                    sys.a(t + tau + 1).transpose() * &lam
                } else {
                    lam
                };
            let gv =
                cost.gradient(&v.rows(tau * m, m).into_owned()) + sys.b(t + tau).transpose() * &lam;
            g.rows_mut(tau * m, m).copy_from(&gv);
        }
        g
    };
    let smax = s.singular_values().max();
    let lip = cost.smoothness() * (smax * smax + 1.0);
    let kappa = lip / cost.m;
    let momentum = (kappa.sqrt() - 1.0) / (kappa.sqrt() + 1.0);
    let mut v = project(&DVector::zeros(m * p));
    let mut prev = v.clone();
    for _ in 0..2_000_000 {
        let look = &v + (&v - &prev) * momentum;
        let next = project(&(&look - gradient(&look) / lip));
        let change = (&next - &v).norm();
        prev = v;
        v = next;
        if change <= 1e-14 * (1.0 + v.norm()) {
            break;
        }
    }
    objective(&v)
}

/// Scalar instance with B_t = 1, |A_t| ≤ 0.3 and near-identical quadratic costs: the regime
/// with the smallest theory constants, hence the shortest admissible windows. Step data is
/// drawn one step at a time, so a longer horizon extends a shorter one.
pub fn scalar_instance(seed: u64, horizon: usize) -> (LtvSystem, CostModel) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    let x0 = DVector::from_element(1, sign * rng.random_range(0.5..2.0));
    let (mut a, mut w, mut q, mut r) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for _ in 0..horizon {
        a.push(DMatrix::from_element(1, 1, rng.random_range(-0.3..0.3)));
        w.push(DVector::from_element(1, rng.random_range(-1.0..1.0)));
        q.push(DMatrix::from_element(1, 1, rng.random_range(1.0..1.05)));
        r.push(DMatrix::from_element(1, 1, rng.random_range(1.0..1.05)));
    }
    let b = vec![DMatrix::from_element(1, 1, 1.0); horizon];
    let sys = LtvSystem::new(a, b, w, x0).unwrap();
    (sys, quadratic_family(q, r).unwrap())
}

pub fn constants(sys: &LtvSystem, model: &CostModel) -> TheoryConstants {
    theory_constants(
        &sys.analyze_controllability(DEFAULT_RANK_TOL).unwrap(),
        model,
    )
}

/// Scalar instance whose horizon is at least `need(constants)`. The constants depend on the
/// horizon through the extremes of the step data, so the horizon grows until it is stable.
pub fn scalar_fitted(
    seed: u64,
    need: impl Fn(&TheoryConstants) -> usize,
) -> (LtvSystem, CostModel, TheoryConstants) {
    let mut horizon = 8;
    loop {
        let (sys, model) = scalar_instance(seed, horizon);
        let tc = constants(&sys, &model);
        let want = need(&tc);
        if want <= horizon {
            return (sys, model, tc);
        }
        horizon = want;
    }
}

/// Quadratic weight matrices of a model built from quadratic costs.
pub fn weights(model: &CostModel) -> (Vec<DMatrix<f64>>, Vec<DMatrix<f64>>) {
    let h = model.horizon();
    let n = model.state_dim();
    let m = model.control_dim();
    let q = (1..=h)
        .map(|t| model.f(t).hessian(&DVector::zeros(n)))
        .collect();
    let r = (1..=h)
        .map(|t| model.c(t).hessian(&DVector::zeros(m)))
        .collect();
    (q, r)
}

pub fn quadratic_terminal(weight: f64, n: usize) -> CostFn {
    CostFn::scaled_identity(weight, n).unwrap()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian_vec(rng: &mut ChaCha8Rng, dim: usize) -> DVector<f64> {
    DVector::from_fn(dim, |_, _| rng.sample::<f64, _>(rand_distr::StandardNormal))
}

//! Stage-cost oracles, terminal-cost variants and cost families.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::system::{LtvSystem, Trajectory};

/// A strongly convex, strongly smooth stage cost minimized at the origin with value zero
/// (except for `Shifted`, which moves the minimizer to `center`).
#[derive(Debug, Clone, PartialEq)]
pub enum CostFn {
    /// ½ xᵀQx.
    Quadratic { q: DMatrix<f64>, m: f64, l: f64 },
    /// (m/2)‖x‖² + α Σᵢ (√(1 + xᵢ²) − 1).
    PseudoHuber { m: f64, alpha: f64, dim: usize },
    /// `inner(x − center)`.
    Shifted {
        inner: Box<CostFn>,
        center: DVector<f64>,
    },
}

impl CostFn {
    pub fn quadratic(q: DMatrix<f64>) -> Result<Self> {
        if q.nrows() != q.ncols() || q.nrows() == 0 {
            return Err(Error::Validation(
                "quadratic weight must be a nonempty square matrix".into(),
            ));
        }
        let scale = linalg::max_abs(&q).max(1.0);
        if linalg::max_abs(&(&q - q.transpose())) > 1e-12 * scale {
            return Err(Error::Validation(
                "quadratic weight is not symmetric".into(),
            ));
        }
        if !q.iter().all(|v| v.is_finite()) {
            return Err(Error::Validation(
                "quadratic weight has non-finite entries".into(),
            ));
        }
        let q = (&q + q.transpose()) * 0.5;
        let (m, l) = linalg::sym_eig_range(&q);
        if !(m > 0.0) {
            return Err(Error::Validation(format!(
                "quadratic weight is not positive definite (min eigenvalue {m:e})"
            )));
        }
        Ok(CostFn::Quadratic { q, m, l })
    }

    pub fn scaled_identity(weight: f64, dim: usize) -> Result<Self> {
        Self::quadratic(DMatrix::identity(dim, dim) * weight)
    }

    pub fn pseudo_huber(m: f64, alpha: f64, dim: usize) -> Result<Self> {
        if !(m > 0.0) || !m.is_finite() {
            return Err(Error::Validation(format!(
                "pseudo-Huber curvature must be positive (got {m})"
            )));
        }
        if !(alpha >= 0.0) || !alpha.is_finite() {
            return Err(Error::Validation(format!(
                "pseudo-Huber weight must be nonnegative (got {alpha})"
            )));
        }
        if dim == 0 {
            return Err(Error::Validation("dimension must be positive".into()));
        }
        Ok(CostFn::PseudoHuber { m, alpha, dim })
    }

    /// `x ↦ self(x + by)`. Offsets of nested shifts are merged and a zero offset collapses.
    pub fn translate(self, by: &DVector<f64>) -> CostFn {
        let (inner, center) = match self {
            CostFn::Shifted { inner, center } => (inner, center - by),
            other => (Box::new(other), -by),
        };
        if center.iter().all(|v| *v == 0.0) {
            *inner
        } else {
            CostFn::Shifted { inner, center }
        }
    }

    /// Cost with its minimizer moved from the origin to `center`.
    pub fn centered_at(self, center: &DVector<f64>) -> CostFn {
        self.translate(&-center)
    }

    pub fn dim(&self) -> usize {
        match self {
            CostFn::Quadratic { q, .. } => q.nrows(),
            CostFn::PseudoHuber { dim, .. } => *dim,
            CostFn::Shifted { inner, .. } => inner.dim(),
        }
    }

    pub fn strong_convexity(&self) -> f64 {
        match self {
            CostFn::Quadratic { m, .. } => *m,
            CostFn::PseudoHuber { m, .. } => *m,
            CostFn::Shifted { inner, .. } => inner.strong_convexity(),
        }
    }

    pub fn smoothness(&self) -> f64 {
        match self {
            CostFn::Quadratic { l, .. } => *l,
            CostFn::PseudoHuber { m, alpha, .. } => m + alpha,
            CostFn::Shifted { inner, .. } => inner.smoothness(),
        }
    }

    /// Location of the unique minimizer.
    pub fn minimizer(&self) -> DVector<f64> {
        match self {
            CostFn::Shifted { inner, center } => inner.minimizer() + center,
            other => DVector::zeros(other.dim()),
        }
    }

    pub fn value(&self, x: &DVector<f64>) -> f64 {
        match self {
            CostFn::Quadratic { q, .. } => 0.5 * x.dot(&(q * x)),
            CostFn::PseudoHuber { m, alpha, .. } => {
                let smooth: f64 = x.iter().map(|v| v.hypot(1.0) - 1.0).sum();
                0.5 * m * x.norm_squared() + alpha * smooth
            }
            CostFn::Shifted { inner, center } => inner.value(&(x - center)),
        }
    }

    pub fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        match self {
            CostFn::Quadratic { q, .. } => q * x,
            CostFn::PseudoHuber { m, alpha, .. } => {
                DVector::from_fn(x.len(), |i, _| m * x[i] + alpha * x[i] / x[i].hypot(1.0))
            }
            CostFn::Shifted { inner, center } => inner.gradient(&(x - center)),
        }
    }

    pub fn hessian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        match self {
            CostFn::Quadratic { q, .. } => q.clone(),
            CostFn::PseudoHuber { m, alpha, .. } => DMatrix::from_fn(x.len(), x.len(), |i, j| {
                if i == j {
                    let s = x[i].hypot(1.0);
                    m + alpha / (s * s * s)
                } else {
                    0.0
                }
            }),
            CostFn::Shifted { inner, center } => inner.hessian(&(x - center)),
        }
    }
}

/// Terminal cost F of the finite-horizon predictive problem.
#[derive(Debug, Clone, PartialEq)]
pub enum TerminalCost {
    Zero,
    /// Hard constraint that the terminal predicted state is the origin.
    IndicatorOrigin,
    Smooth(CostFn),
}

impl TerminalCost {
    pub fn tag(&self) -> &'static str {
        match self {
            TerminalCost::Zero => "zero",
            TerminalCost::IndicatorOrigin => "indicator",
            TerminalCost::Smooth(_) => "smooth",
        }
    }
}

/// Stage costs f_1..f_T (states) and c_1..c_T (controls, c_t acting on u_{t−1})
/// with their uniform curvature constants.
#[derive(Debug, Clone, PartialEq)]
pub struct CostModel {
    f: Vec<CostFn>,
    c: Vec<CostFn>,
    pub m_f: f64,
    pub l_f: f64,
    pub m_c: f64,
    pub l_c: f64,
}

impl CostModel {
    pub fn new(f: Vec<CostFn>, c: Vec<CostFn>) -> Result<Self> {
        let horizon = f.len();
        if horizon == 0 || c.len() != horizon {
            return Err(Error::Validation(format!(
                "cost sequences need equal positive length (got {} state, {} control)",
                f.len(),
                c.len()
            )));
        }
        let (n, m) = (f[0].dim(), c[0].dim());
        if f.iter().any(|g| g.dim() != n) || c.iter().any(|g| g.dim() != m) {
            return Err(Error::Validation("cost dimensions vary across time".into()));
        }
        let m_f = f
            .iter()
            .map(CostFn::strong_convexity)
            .fold(f64::INFINITY, f64::min);
        // f_T is exempt from the uniform smoothness requirement unless it is the only state cost
        let smooth_range = if horizon == 1 {
            &f[..]
        } else {
            &f[..horizon - 1]
        };
        let l_f = smooth_range
            .iter()
            .map(CostFn::smoothness)
            .fold(0.0, f64::max);
        let m_c = c
            .iter()
            .map(CostFn::strong_convexity)
            .fold(f64::INFINITY, f64::min);
        let l_c = c.iter().map(CostFn::smoothness).fold(0.0, f64::max);
        Ok(Self {
            f,
            c,
            m_f,
            l_f,
            m_c,
            l_c,
        })
    }

    pub fn horizon(&self) -> usize {
        self.f.len()
    }

    pub fn state_dim(&self) -> usize {
        self.f[0].dim()
    }

    pub fn control_dim(&self) -> usize {
        self.c[0].dim()
    }

    /// f_t for t in 1..=T.
    pub fn f(&self, t: usize) -> &CostFn {
        &self.f[t - 1]
    }

    /// c_t for t in 1..=T; acts on u_{t−1}.
    pub fn c(&self, t: usize) -> &CostFn {
        &self.c[t - 1]
    }

    /// max(ℓ_f, ℓ_c).
    pub fn ell(&self) -> f64 {
        self.l_f.max(self.l_c)
    }

    pub fn check_compatible(&self, sys: &LtvSystem) -> Result<()> {
        if self.horizon() != sys.horizon()
            || self.state_dim() != sys.state_dim()
            || self.control_dim() != sys.control_dim()
        {
            return Err(Error::Validation(format!(
                "cost model (T={}, n={}, m={}) does not match system (T={}, n={}, m={})",
                self.horizon(),
                self.state_dim(),
                self.control_dim(),
                sys.horizon(),
                sys.state_dim(),
                sys.control_dim()
            )));
        }
        Ok(())
    }

    /// f_t(x_t) + c_t(u_{t−1}) for t = 1..T.
    pub fn per_step_costs(&self, traj: &Trajectory) -> Vec<f64> {
        (1..=self.horizon())
            .map(|t| self.f(t).value(&traj.states[t]) + self.c(t).value(&traj.controls[t - 1]))
            .collect()
    }

    pub fn total_cost(&self, traj: &Trajectory) -> f64 {
        self.per_step_costs(traj).iter().sum()
    }
}

/// f_t(x) = ½xᵀQ_t x, c_t(u) = ½uᵀR_t u.
pub fn quadratic_family(q: Vec<DMatrix<f64>>, r: Vec<DMatrix<f64>>) -> Result<CostModel> {
    let f = q
        .into_iter()
        .map(CostFn::quadratic)
        .collect::<Result<Vec<_>>>()?;
    let c = r
        .into_iter()
        .map(CostFn::quadratic)
        .collect::<Result<Vec<_>>>()?;
    CostModel::new(f, c)
}

pub fn pseudo_huber_family(
    m: f64,
    alpha: f64,
    state_dim: usize,
    control_dim: usize,
    horizon: usize,
) -> Result<CostModel> {
    let f = CostFn::pseudo_huber(m, alpha, state_dim)?;
    let c = CostFn::pseudo_huber(m, alpha, control_dim)?;
    CostModel::new(vec![f; horizon], vec![c; horizon])
}

/// Random SPD matrix with eigenvalues drawn uniformly from `[lo, hi]`.
pub fn random_spd(rng: &mut ChaCha8Rng, dim: usize, lo: f64, hi: f64) -> DMatrix<f64> {
    let g = DMatrix::from_fn(dim, dim, |_, _| rng.sample::<f64, _>(StandardNormal));
    let q = g.qr().q();
    let eig = DVector::from_fn(dim, |_, _| lo + (hi - lo) * rng.random::<f64>());
    let out = &q * DMatrix::from_diagonal(&eig) * q.transpose();
    (&out + out.transpose()) * 0.5
}

/// Time-varying random quadratic costs with state eigenvalues in `q_range` and control
/// eigenvalues in `r_range`.
pub fn random_quadratic_family(
    rng: &mut ChaCha8Rng,
    state_dim: usize,
    control_dim: usize,
    horizon: usize,
    q_range: (f64, f64),
    r_range: (f64, f64),
) -> Result<CostModel> {
    for (lo, hi) in [q_range, r_range] {
        if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
            return Err(Error::Validation(format!(
                "invalid eigenvalue band [{lo}, {hi}]"
            )));
        }
    }
    let mut q = Vec::with_capacity(horizon);
    let mut r = Vec::with_capacity(horizon);
    for _ in 0..horizon {
        q.push(random_spd(rng, state_dim, q_range.0, q_range.1));
        r.push(random_spd(rng, control_dim, r_range.0, r_range.1));
    }
    quadratic_family(q, r)
}

/// Moves each cost's minimizer to the origin and folds the offsets into the dynamics.
///
/// `f_min` has T+1 entries (`f_min[0]` shifts the initial state, `f_min[t]` minimizes f_t);
/// `c_min` has T entries (`c_min[t]` minimizes c_{t+1}). With x' = x − f_min and u' = u − c_min
/// the disturbances become w'_t = w_t + A_t f_min[t] + B_t c_min[t] − f_min[t+1], so every
/// trajectory keeps its cost.
pub fn recenter_costs(
    model: &CostModel,
    sys: &LtvSystem,
    f_min: &[DVector<f64>],
    c_min: &[DVector<f64>],
) -> Result<(CostModel, LtvSystem)> {
    model.check_compatible(sys)?;
    let horizon = sys.horizon();
    if f_min.len() != horizon + 1 || c_min.len() != horizon {
        return Err(Error::Validation(format!(
            "recentering needs {} state offsets and {horizon} control offsets, got {} and {}",
            horizon + 1,
            f_min.len(),
            c_min.len()
        )));
    }
    let (n, m) = (sys.state_dim(), sys.control_dim());
    if f_min.iter().any(|v| v.len() != n) || c_min.iter().any(|v| v.len() != m) {
        return Err(Error::Validation(
            "offset dimensions do not match the system".into(),
        ));
    }
    let check = |g: &CostFn, at: &DVector<f64>, what: &str| -> Result<()> {
        let grad = g.gradient(at).norm();
        if grad > 1e-8 * (1.0 + g.smoothness() * at.norm()) {
            return Err(Error::Validation(format!(
                "{what} is not a minimizer (gradient norm {grad:e})"
            )));
        }
        Ok(())
    };
    let mut f = Vec::with_capacity(horizon);
    let mut c = Vec::with_capacity(horizon);
    for t in 1..=horizon {
        check(model.f(t), &f_min[t], &format!("f_min[{t}]"))?;
        check(model.c(t), &c_min[t - 1], &format!("c_min[{}]", t - 1))?;
        f.push(model.f(t).clone().translate(&f_min[t]));
        c.push(model.c(t).clone().translate(&c_min[t - 1]));
    }
    let w = (0..horizon)
        .map(|t| sys.w(t) + sys.a(t) * &f_min[t] + sys.b(t) * &c_min[t] - &f_min[t + 1])
        .collect();
    let sys2 = sys
        .with_disturbances(w)?
        .with_initial_state(sys.x0() - &f_min[0])?;
    Ok((CostModel::new(f, c)?, sys2))
}

fn default_one() -> f64 {
    1.0
}

/// Cost family selection as read from an experiment configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum CostSpec {
    /// Random time-varying SPD weights with eigenvalues in the given bands.
    Quadratic {
        #[serde(default = "default_one")]
        q_min: f64,
        #[serde(default = "default_one")]
        q_max: f64,
        #[serde(default = "default_one")]
        r_min: f64,
        #[serde(default = "default_one")]
        r_max: f64,
    },
    PseudoHuber {
        #[serde(default = "default_one")]
        m: f64,
        #[serde(default = "default_one")]
        alpha: f64,
    },
}

impl CostSpec {
    pub fn build(&self, sys: &LtvSystem, rng: &mut ChaCha8Rng) -> Result<CostModel> {
        let (n, m, horizon) = (sys.state_dim(), sys.control_dim(), sys.horizon());
        match *self {
            CostSpec::Quadratic {
                q_min,
                q_max,
                r_min,
                r_max,
            } => random_quadratic_family(rng, n, m, horizon, (q_min, q_max), (r_min, r_max)),
            CostSpec::PseudoHuber { m: curv, alpha } => {
                pseudo_huber_family(curv, alpha, n, m, horizon)
            }
        }
    }
}

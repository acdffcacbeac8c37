//! Linear time-varying dynamics `x_{t+1} = A_t x_t + B_t u_t + w_t`, controllability
//! analysis and seeded instance families.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;

/// Default rank tolerance for the controllability index, relative to ‖M(t, d)‖.
pub const DEFAULT_RANK_TOL: f64 = 1e-10;

/// Default dynamics-residual tolerance for certified trajectories.
pub const EPS_DYN: f64 = 1e-8;

/// Forward-Euler step used by the grid-frequency family.
pub const GRIDFREQ_STEP: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct LtvSystem {
    a: Vec<DMatrix<f64>>,
    b: Vec<DMatrix<f64>>,
    w: Vec<DVector<f64>>,
    x0: DVector<f64>,
}

impl LtvSystem {
    pub fn new(
        a: Vec<DMatrix<f64>>,
        b: Vec<DMatrix<f64>>,
        w: Vec<DVector<f64>>,
        x0: DVector<f64>,
    ) -> Result<Self> {
        let horizon = a.len();
        if horizon == 0 {
            return Err(Error::Validation("horizon must be positive".into()));
        }
        if b.len() != horizon || w.len() != horizon {
            return Err(Error::Validation(format!(
                "sequence lengths differ: A has {}, B has {}, w has {}",
                horizon,
                b.len(),
                w.len()
            )));
        }
        let n = x0.len();
        if n == 0 {
            return Err(Error::Validation("state dimension must be positive".into()));
        }
        let m = b[0].ncols();
        if m == 0 {
            return Err(Error::Validation(
                "control dimension must be positive".into(),
            ));
        }
        for t in 0..horizon {
            if a[t].shape() != (n, n) {
                return Err(Error::Validation(format!("A_{t} is not {n}x{n}")));
            }
            if b[t].shape() != (n, m) {
                return Err(Error::Validation(format!("B_{t} is not {n}x{m}")));
            }
            if w[t].len() != n {
                return Err(Error::Validation(format!("w_{t} does not have length {n}")));
            }
            let finite = a[t]
                .iter()
                .chain(b[t].iter())
                .chain(w[t].iter())
                .all(|v| v.is_finite());
            if !finite {
                return Err(Error::Validation(format!("non-finite entry at t = {t}")));
            }
        }
        if !x0.iter().all(|v| v.is_finite()) {
            return Err(Error::Validation("non-finite initial state".into()));
        }
        Ok(Self { a, b, w, x0 })
    }

    /// Time-invariant convenience constructor.
    pub fn time_invariant(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        w: Vec<DVector<f64>>,
        x0: DVector<f64>,
    ) -> Result<Self> {
        let horizon = w.len();
        Self::new(vec![a; horizon], vec![b; horizon], w, x0)
    }

    pub fn horizon(&self) -> usize {
        self.a.len()
    }

    pub fn state_dim(&self) -> usize {
        self.x0.len()
    }

    pub fn control_dim(&self) -> usize {
        self.b[0].ncols()
    }

    pub fn a(&self, t: usize) -> &DMatrix<f64> {
        &self.a[t]
    }

    pub fn b(&self, t: usize) -> &DMatrix<f64> {
        &self.b[t]
    }

    pub fn w(&self, t: usize) -> &DVector<f64> {
        &self.w[t]
    }

    pub fn disturbances(&self) -> &[DVector<f64>] {
        &self.w
    }

    pub fn x0(&self) -> &DVector<f64> {
        &self.x0
    }

    /// sup_t ‖w_t‖.
    pub fn disturbance_sup(&self) -> f64 {
        self.w.iter().map(|w| w.norm()).fold(0.0, f64::max)
    }

    pub fn with_disturbances(&self, w: Vec<DVector<f64>>) -> Result<Self> {
        Self::new(self.a.clone(), self.b.clone(), w, self.x0.clone())
    }

    pub fn with_initial_state(&self, x0: DVector<f64>) -> Result<Self> {
        Self::new(self.a.clone(), self.b.clone(), self.w.clone(), x0)
    }

    /// Disturbance window `w_{t..t+len-1}`.
    pub fn disturbance_window(&self, t: usize, len: usize) -> Result<Vec<DVector<f64>>> {
        if t + len > self.horizon() {
            return Err(Error::Range(format!(
                "disturbance window [{t}, {}) exceeds horizon {}",
                t + len,
                self.horizon()
            )));
        }
        Ok(self.w[t..t + len].to_vec())
    }

    /// Φ(t2, t1) = A_{t2-1}···A_{t1} for t2 > t1, identity otherwise.
    pub fn transition_matrix(&self, t2: usize, t1: usize) -> Result<DMatrix<f64>> {
        let horizon = self.horizon();
        if t1 > horizon || t2 > horizon {
            return Err(Error::Range(format!(
                "transition indices ({t2}, {t1}) exceed horizon {horizon}"
            )));
        }
        let n = self.state_dim();
        let mut phi = DMatrix::identity(n, n);
        for s in t1..t2 {
            phi = &self.a[s] * phi;
        }
        Ok(phi)
    }

    /// M(t, p) = [Φ(t+p, t+1)B_t, Φ(t+p, t+2)B_{t+1}, …, B_{t+p-1}].
    pub fn controllability_matrix(&self, t: usize, p: usize) -> Result<DMatrix<f64>> {
        if p == 0 || t + p > self.horizon() {
            return Err(Error::Range(format!(
                "controllability window M({t}, {p}) needs 1 <= p and t + p <= {}",
                self.horizon()
            )));
        }
        let (n, m) = (self.state_dim(), self.control_dim());
        let mut out = DMatrix::zeros(n, m * p);
        let mut phi = DMatrix::<f64>::identity(n, n);
        for j in (0..p).rev() {
            out.columns_mut(j * m, m)
                .copy_from(&(&phi * &self.b[t + j]));
            phi = &phi * &self.a[t + j];
        }
        Ok(out)
    }

    pub fn analyze_controllability(&self, rank_tol: f64) -> Result<ControllabilityReport> {
        if !(rank_tol >= 0.0) {
            return Err(Error::Validation(
                "rank tolerance must be nonnegative".into(),
            ));
        }
        let horizon = self.horizon();
        let n = self.state_dim();
        let m = self.control_dim();
        let mut last_failure = 0;
        for d in 1..=horizon {
            if m * d < n {
                continue;
            }
            let mut per_t = Vec::with_capacity(horizon - d + 1);
            let mut failed = None;
            for t in 0..=horizon - d {
                let sv = linalg::singular_values(&self.controllability_matrix(t, d)?);
                let smax = sv.iter().cloned().fold(0.0, f64::max);
                let smin = sv.iter().cloned().fold(f64::INFINITY, f64::min);
                if !(smin > rank_tol * smax) || smax == 0.0 {
                    failed = Some(t);
                    break;
                }
                per_t.push(smin);
            }
            match failed {
                Some(t) => last_failure = t,
                None => {
                    let sigma = per_t.iter().cloned().fold(f64::INFINITY, f64::min);
                    let (a, b, b_prime) = self.norm_bounds();
                    return Ok(ControllabilityReport {
                        index: d,
                        sigma,
                        a,
                        b,
                        b_prime,
                        per_t_sigma: per_t,
                    });
                }
            }
        }
        Err(Error::Uncontrollable {
            t: last_failure,
            max_window: horizon,
        })
    }

    /// (max ‖A_t‖, max ‖B_t‖, max ‖B_t†‖).
    pub fn norm_bounds(&self) -> (f64, f64, f64) {
        let mut a = 0.0_f64;
        let mut b = 0.0_f64;
        let mut bp = 0.0_f64;
        for t in 0..self.horizon() {
            a = a.max(linalg::spectral_norm(&self.a[t]));
            b = b.max(linalg::spectral_norm(&self.b[t]));
            bp = bp.max(linalg::spectral_norm(&linalg::pseudo_inverse(&self.b[t])));
        }
        (a, b, bp)
    }

    /// Rolls the dynamics forward from `x0` under `controls`.
    pub fn rollout(&self, x0: &DVector<f64>, controls: &[DVector<f64>]) -> Result<Trajectory> {
        if controls.len() != self.horizon() {
            return Err(Error::Validation(format!(
                "expected {} controls, got {}",
                self.horizon(),
                controls.len()
            )));
        }
        let mut states = Vec::with_capacity(controls.len() + 1);
        states.push(x0.clone());
        for (t, u) in controls.iter().enumerate() {
            let next = &self.a[t] * &states[t] + &self.b[t] * u + &self.w[t];
            states.push(next);
        }
        Trajectory::certify(self, states, controls.to_vec())
    }

    pub fn to_json(&self) -> SystemJson {
        fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
            (0..m.nrows())
                .map(|i| m.row(i).iter().cloned().collect())
                .collect()
        }
        SystemJson {
            horizon: self.horizon(),
            n: self.state_dim(),
            m: self.control_dim(),
            a: self.a.iter().map(rows).collect(),
            b: self.b.iter().map(rows).collect(),
            w: self.w.iter().map(|v| v.iter().cloned().collect()).collect(),
            x0: self.x0.iter().cloned().collect(),
        }
    }

    pub fn from_json(doc: &SystemJson) -> Result<Self> {
        fn mat(rows: &[Vec<f64>], r: usize, c: usize, name: &str) -> Result<DMatrix<f64>> {
            if rows.len() != r || rows.iter().any(|row| row.len() != c) {
                return Err(Error::Validation(format!("{name} is not {r}x{c}")));
            }
            Ok(DMatrix::from_fn(r, c, |i, j| rows[i][j]))
        }
        let (n, m) = (doc.n, doc.m);
        if doc.a.len() != doc.horizon || doc.b.len() != doc.horizon || doc.w.len() != doc.horizon {
            return Err(Error::Validation("sequence lengths do not match T".into()));
        }
        let a = doc
            .a
            .iter()
            .enumerate()
            .map(|(t, r)| mat(r, n, n, &format!("A[{t}]")))
            .collect::<Result<Vec<_>>>()?;
        let b = doc
            .b
            .iter()
            .enumerate()
            .map(|(t, r)| mat(r, n, m, &format!("B[{t}]")))
            .collect::<Result<Vec<_>>>()?;
        let w = doc.w.iter().map(|v| DVector::from_vec(v.clone())).collect();
        Self::new(a, b, w, DVector::from_vec(doc.x0.clone()))
    }
}

/// JSON wire form of an [`LtvSystem`]; matrices are row-major nested arrays.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemJson {
    #[serde(rename = "T")]
    pub horizon: usize,
    pub n: usize,
    pub m: usize,
    #[serde(rename = "A")]
    pub a: Vec<Vec<Vec<f64>>>,
    #[serde(rename = "B")]
    pub b: Vec<Vec<Vec<f64>>>,
    pub w: Vec<Vec<f64>>,
    pub x0: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControllabilityReport {
    /// Controllability index d.
    pub index: usize,
    /// Uniform lower bound on σ_min(M(t, d)).
    pub sigma: f64,
    pub a: f64,
    pub b: f64,
    pub b_prime: f64,
    pub per_t_sigma: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: Vec<DVector<f64>>,
    pub controls: Vec<DVector<f64>>,
    /// max_t ‖x_{t+1} − A_t x_t − B_t u_t − w_t‖.
    pub dyn_residual: f64,
}

impl Trajectory {
    /// Wraps a state/control sequence, measuring its dynamics residual against `sys`.
    pub fn certify(
        sys: &LtvSystem,
        states: Vec<DVector<f64>>,
        controls: Vec<DVector<f64>>,
    ) -> Result<Self> {
        let horizon = sys.horizon();
        if states.len() != horizon + 1 || controls.len() != horizon {
            return Err(Error::Validation(format!(
                "trajectory needs {} states and {horizon} controls, got {} and {}",
                horizon + 1,
                states.len(),
                controls.len()
            )));
        }
        let dyn_residual = (0..horizon)
            .map(|t| {
                (&states[t + 1] - sys.a(t) * &states[t] - sys.b(t) * &controls[t] - sys.w(t)).norm()
            })
            .fold(0.0, f64::max);
        Ok(Self {
            states,
            controls,
            dyn_residual,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InstanceFamily {
    RandomStable,
    RandomGeneral,
    Tracking,
    GridfreqToy,
}

fn default_disturbance_bound() -> f64 {
    1.0
}
fn default_x0_norm() -> f64 {
    1.0
}
fn default_b_scale() -> f64 {
    1.0
}
fn default_period() -> f64 {
    20.0
}

/// Parameters of a seeded instance family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstanceSpec {
    pub family: InstanceFamily,
    pub n: usize,
    pub m: usize,
    #[serde(rename = "T")]
    pub horizon: usize,
    /// Radius D of the ball the disturbances are drawn from.
    #[serde(default = "default_disturbance_bound")]
    pub disturbance_bound: f64,
    #[serde(default = "default_x0_norm")]
    pub x0_norm: f64,
    /// Spectral-norm cap on A_t; family default when absent.
    #[serde(default)]
    pub a_max: Option<f64>,
    #[serde(default = "default_b_scale")]
    pub b_scale: f64,
    /// Amplitude of the sinusoidal reference (tracking) or inertia modulation (gridfreq_toy).
    #[serde(default)]
    pub amplitude: f64,
    #[serde(default = "default_period")]
    pub period: f64,
}

impl InstanceSpec {
    pub fn new(family: InstanceFamily, n: usize, m: usize, horizon: usize) -> Self {
        Self {
            family,
            n,
            m,
            horizon,
            disturbance_bound: default_disturbance_bound(),
            x0_norm: default_x0_norm(),
            a_max: None,
            b_scale: default_b_scale(),
            amplitude: 0.0,
            period: default_period(),
        }
    }

    fn a_max_or_default(&self) -> f64 {
        self.a_max.unwrap_or(match self.family {
            InstanceFamily::RandomGeneral => 1.3,
            _ => 0.8,
        })
    }

    fn validate(&self) -> Result<()> {
        if self.n == 0 || self.m == 0 || self.horizon == 0 {
            return Err(Error::Validation("n, m and T must be positive".into()));
        }
        if !(self.b_scale > 0.0) || !self.b_scale.is_finite() {
            return Err(Error::Validation(format!(
                "b_scale must be positive (got {}); a zero input matrix is uncontrollable",
                self.b_scale
            )));
        }
        if !(self.disturbance_bound >= 0.0) || !(self.x0_norm >= 0.0) {
            return Err(Error::Validation(
                "disturbance_bound and x0_norm must be nonnegative".into(),
            ));
        }
        let a_max = self.a_max_or_default();
        if !(a_max > 0.0) || !a_max.is_finite() {
            return Err(Error::Validation("a_max must be positive".into()));
        }
        if matches!(
            self.family,
            InstanceFamily::RandomStable | InstanceFamily::Tracking
        ) && a_max >= 1.0
        {
            return Err(Error::Validation(format!(
                "{:?} requires a_max < 1 (got {a_max})",
                self.family
            )));
        }
        if self.family == InstanceFamily::GridfreqToy {
            if self.n != 2 * self.m {
                return Err(Error::Validation(
                    "gridfreq_toy needs n = 2m (phase angle and frequency per bus)".into(),
                ));
            }
            if !(self.amplitude >= 0.0 && self.amplitude < 1.0) {
                return Err(Error::Validation(
                    "inertia modulation amplitude must lie in [0, 1)".into(),
                ));
            }
        }
        if !(self.period > 0.0) {
            return Err(Error::Validation("period must be positive".into()));
        }
        Ok(())
    }
}

fn gaussian_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.sample::<f64, _>(StandardNormal))
}

/// Uniform sample from the ball of the given radius.
pub fn sample_ball(rng: &mut ChaCha8Rng, dim: usize, radius: f64) -> DVector<f64> {
    let dir = DVector::from_fn(dim, |_, _| rng.sample::<f64, _>(StandardNormal));
    let norm = dir.norm();
    if norm == 0.0 || radius == 0.0 {
        return DVector::zeros(dim);
    }
    let r = radius * rng.random::<f64>().powf(1.0 / dim as f64);
    dir * (r / norm)
}

/// Uniform sample from the sphere of the given radius.
pub fn sample_sphere(rng: &mut ChaCha8Rng, dim: usize, radius: f64) -> DVector<f64> {
    let dir = DVector::from_fn(dim, |_, _| rng.sample::<f64, _>(StandardNormal));
    let norm = dir.norm();
    if norm == 0.0 {
        return DVector::zeros(dim);
    }
    dir * (radius / norm)
}

/// Deterministic instance generator: same `(spec, seed)`, same system.
pub fn generate_instance(spec: &InstanceSpec, seed: u64) -> Result<LtvSystem> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    generate_with_rng(spec, &mut rng)
}

pub fn generate_with_rng(spec: &InstanceSpec, rng: &mut ChaCha8Rng) -> Result<LtvSystem> {
    spec.validate()?;
    let sys = match spec.family {
        InstanceFamily::RandomStable | InstanceFamily::RandomGeneral => random_family(spec, rng)?,
        InstanceFamily::Tracking => {
            let base = random_family(spec, rng)?;
            let reference = sinusoid_reference(spec, rng);
            fold_reference(&base, &reference)?
        }
        InstanceFamily::GridfreqToy => gridfreq(spec, rng)?,
    };
    sys.analyze_controllability(DEFAULT_RANK_TOL).map_err(|e| {
        Error::Validation(format!(
            "generated {:?} instance fails controllability: {e}",
            spec.family
        ))
    })?;
    Ok(sys)
}

fn random_family(spec: &InstanceSpec, rng: &mut ChaCha8Rng) -> Result<LtvSystem> {
    let (n, m, horizon) = (spec.n, spec.m, spec.horizon);
    let a_max = spec.a_max_or_default();
    let lower = if spec.family == InstanceFamily::RandomGeneral {
        0.7
    } else {
        0.5
    };
    let mut a = Vec::with_capacity(horizon);
    let mut b = Vec::with_capacity(horizon);
    let mut w = Vec::with_capacity(horizon);
    // Nominal input directions keep B_t well conditioned; a random perturbation makes it time-varying.
    let nominal = DMatrix::from_fn(n, m, |i, j| if i == j { 1.0 } else { 0.0 });
    for _ in 0..horizon {
        let g = gaussian_matrix(rng, n, n);
        let gn = linalg::spectral_norm(&g).max(f64::MIN_POSITIVE);
        let scale = a_max * (lower + (1.0 - lower) * rng.random::<f64>());
        a.push(g * (scale / gn));
        let h = gaussian_matrix(rng, n, m);
        let hn = linalg::spectral_norm(&h).max(f64::MIN_POSITIVE);
        b.push((&nominal + h * (0.4 / hn)) * spec.b_scale);
    }
    for _ in 0..horizon {
        w.push(sample_ball(rng, n, spec.disturbance_bound));
    }
    let x0 = sample_sphere(rng, n, spec.x0_norm);
    LtvSystem::new(a, b, w, x0)
}

fn sinusoid_reference(spec: &InstanceSpec, rng: &mut ChaCha8Rng) -> Vec<DVector<f64>> {
    let phases: Vec<f64> = (0..spec.n)
        .map(|_| rng.random::<f64>() * std::f64::consts::TAU)
        .collect();
    (0..=spec.horizon)
        .map(|t| {
            DVector::from_fn(spec.n, |i, _| {
                spec.amplitude * (std::f64::consts::TAU * t as f64 / spec.period + phases[i]).sin()
            })
        })
        .collect()
}

/// Re-expresses tracking of `reference` (length T+1) as regulation:
/// x̃_t = x_t − d_t and w̃_t = w_t + A_t d_t − d_{t+1}.
pub fn fold_reference(sys: &LtvSystem, reference: &[DVector<f64>]) -> Result<LtvSystem> {
    let horizon = sys.horizon();
    if reference.len() != horizon + 1 {
        return Err(Error::Validation(format!(
            "reference needs {} points, got {}",
            horizon + 1,
            reference.len()
        )));
    }
    let w = (0..horizon)
        .map(|t| sys.w(t) + sys.a(t) * &reference[t] - &reference[t + 1])
        .collect();
    LtvSystem::new(sys.a.clone(), sys.b.clone(), w, sys.x0() - &reference[0])
}

fn gridfreq(spec: &InstanceSpec, rng: &mut ChaCha8Rng) -> Result<LtvSystem> {
    let buses = spec.m;
    let n = spec.n;
    let dt = GRIDFREQ_STEP;
    // ring-graph Laplacian
    let mut lap = DMatrix::<f64>::zeros(buses, buses);
    if buses > 1 {
        for i in 0..buses {
            let j = (i + 1) % buses;
            if i == j {
                continue;
            }
            lap[(i, i)] += 1.0;
            lap[(j, j)] += 1.0;
            lap[(i, j)] -= 1.0;
            lap[(j, i)] -= 1.0;
        }
    }
    let damping = DMatrix::<f64>::identity(buses, buses) * 0.5;
    let base: Vec<f64> = (0..buses).map(|_| 1.0 + rng.random::<f64>()).collect();
    let phases: Vec<f64> = (0..buses)
        .map(|_| rng.random::<f64>() * std::f64::consts::TAU)
        .collect();
    let mut a = Vec::with_capacity(spec.horizon);
    let mut b = Vec::with_capacity(spec.horizon);
    for t in 0..spec.horizon {
        let inv_inertia = DMatrix::from_fn(buses, buses, |i, j| {
            if i == j {
                let s = (std::f64::consts::TAU * t as f64 / spec.period + phases[i]).sin();
                1.0 / (base[i] * (1.0 + spec.amplitude * s))
            } else {
                0.0
            }
        });
        let mut a_hat = DMatrix::<f64>::zeros(n, n);
        a_hat
            .view_mut((0, buses), (buses, buses))
            .copy_from(&DMatrix::identity(buses, buses));
        a_hat
            .view_mut((buses, 0), (buses, buses))
            .copy_from(&(-&inv_inertia * &lap));
        a_hat
            .view_mut((buses, buses), (buses, buses))
            .copy_from(&(-&inv_inertia * &damping));
        let mut b_hat = DMatrix::<f64>::zeros(n, buses);
        b_hat
            .view_mut((buses, 0), (buses, buses))
            .copy_from(&inv_inertia);
        a.push(DMatrix::identity(n, n) + a_hat * dt);
        b.push(b_hat * (dt * spec.b_scale));
    }
    let w = (0..spec.horizon)
        .map(|_| sample_ball(rng, n, spec.disturbance_bound))
        .collect();
    let x0 = sample_sphere(rng, n, spec.x0_norm);
    LtvSystem::new(a, b, w, x0)
}

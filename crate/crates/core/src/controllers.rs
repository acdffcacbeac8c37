//! Online predictive controllers and the offline benchmark.

use nalgebra::DVector;
use serde::Serialize;

use crate::costs::{CostModel, TerminalCost};
use crate::error::{Error, Result};
use crate::format;
use crate::solver::{offline_optimal, solve_terminal_cost, SolveResult};
use crate::system::{LtvSystem, Trajectory, DEFAULT_RANK_TOL};

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "controller", rename_all = "snake_case")]
pub enum ControllerTag {
    Pck {
        k: usize,
        terminal: String,
    },
    Pckh {
        k: usize,
        h: usize,
        terminal: String,
    },
    Opt,
}

impl ControllerTag {
    pub fn label(&self) -> String {
        match self {
            ControllerTag::Pck { k, terminal } => format!("pck_k{k}_{terminal}"),
            ControllerTag::Pckh { k, h, terminal } => format!("pckh_k{k}_h{h}_{terminal}"),
            ControllerTag::Opt => "opt".to_string(),
        }
    }
}

/// One solve made by a controller.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Decision {
    pub t: usize,
    pub horizon: usize,
    pub iterations: usize,
    /// Number of controls committed from this solve.
    pub committed: usize,
    /// ‖y_p‖ of the predicted trajectory.
    pub terminal_norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub trajectory: Trajectory,
    /// f_t(x_t) + c_t(u_{t−1}) for t = 1..T.
    pub per_step_cost: Vec<f64>,
    pub total_cost: f64,
    pub tag: ControllerTag,
    pub decisions: Vec<Decision>,
}

impl RunRecord {
    fn new(
        sys: &LtvSystem,
        model: &CostModel,
        trajectory: Trajectory,
        tag: ControllerTag,
        decisions: Vec<Decision>,
    ) -> Result<Self> {
        if trajectory.dyn_residual > crate::system::EPS_DYN * (1.0 + sys.x0().norm()) {
            return Err(Error::Invariant(format!(
                "{} trajectory violates the dynamics by {:e}",
                tag.label(),
                trajectory.dyn_residual
            )));
        }
        let per_step_cost = model.per_step_costs(&trajectory);
        let total_cost = per_step_cost.iter().sum();
        Ok(Self {
            trajectory,
            per_step_cost,
            total_cost,
            tag,
            decisions,
        })
    }

    pub fn horizon(&self) -> usize {
        self.per_step_cost.len()
    }

    /// Columns t, x_norm, u_norm, step_cost for t = 1..T (u_norm is ‖u_{t−1}‖).
    pub fn to_csv(&self) -> String {
        let rows = (1..=self.horizon()).map(|t| {
            vec![
                t.to_string(),
                format::float(self.trajectory.states[t].norm()),
                format::float(self.trajectory.controls[t - 1].norm()),
                format::float(self.per_step_cost[t - 1]),
            ]
        });
        format::csv(&["t", "x_norm", "u_norm", "step_cost"], rows)
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "tag": self.tag,
            "label": self.tag.label(),
            "total_cost": self.total_cost,
            "per_step_cost": self.per_step_cost,
            "dyn_residual": self.trajectory.dyn_residual,
            "solver_iterations": self.decisions.iter().map(|d| d.iterations).collect::<Vec<_>>(),
        })
    }
}

fn decision(t: usize, res: &SolveResult, committed: usize) -> Decision {
    Decision {
        t,
        horizon: res.horizon(),
        iterations: res.iterations,
        committed,
        terminal_norm: res.states[res.horizon()].norm(),
    }
}

fn require_reachable(sys: &LtvSystem, k: usize, terminal: &TerminalCost) -> Result<()> {
    if *terminal == TerminalCost::IndicatorOrigin {
        let d = sys.analyze_controllability(DEFAULT_RANK_TOL)?.index;
        if k < d {
            return Err(Error::Reachability { p: k, d });
        }
    }
    Ok(())
}

/// Rolls the plant one step under `u`.
fn step(sys: &LtvSystem, t: usize, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
    sys.a(t) * x + sys.b(t) * u + sys.w(t)
}

/// Predictive control with prediction window `k`: replans every step and commits the first
/// planned control; the last `k` steps are planned once with zero terminal cost.
pub fn run_pc_k(
    sys: &LtvSystem,
    model: &CostModel,
    k: usize,
    terminal: &TerminalCost,
) -> Result<RunRecord> {
    run_replanning(sys, model, k, 1, terminal, k)
}

/// Horizon split T = n₀h + m₀ with k − h + 1 ≤ m₀ ≤ k, taking the largest feasible m₀.
pub fn replan_decomposition(horizon: usize, k: usize, h: usize) -> Result<(usize, usize)> {
    if h == 0 || h > k || k > horizon {
        return Err(Error::Configuration(format!(
            "replan window needs 1 <= h <= k <= T (got h = {h}, k = {k}, T = {horizon})"
        )));
    }
    (k - h + 1..=k)
        .rev()
        .find(|m0| (horizon - m0).is_multiple_of(h))
        .map(|m0| ((horizon - m0) / h, m0))
        .ok_or_else(|| {
            Error::Configuration(format!(
                "no decomposition T = n0*h + m0 with {} <= m0 <= {k} for T = {horizon}, h = {h}",
                k - h + 1
            ))
        })
}

/// Predictive control with prediction window `k` and replan window `h`.
pub fn run_pc_kh(
    sys: &LtvSystem,
    model: &CostModel,
    k: usize,
    h: usize,
    terminal: &TerminalCost,
) -> Result<RunRecord> {
    let (_, m0) = replan_decomposition(sys.horizon(), k, h)?;
    run_replanning(sys, model, k, h, terminal, m0)
}

fn run_replanning(
    sys: &LtvSystem,
    model: &CostModel,
    k: usize,
    h: usize,
    terminal: &TerminalCost,
    final_len: usize,
) -> Result<RunRecord> {
    model.check_compatible(sys)?;
    let horizon = sys.horizon();
    if k == 0 || k > horizon {
        return Err(Error::Range(format!(
            "prediction window k = {k} must lie in [1, {horizon}]"
        )));
    }
    require_reachable(sys, k, terminal)?;
    let mut states = vec![sys.x0().clone()];
    let mut controls: Vec<DVector<f64>> = Vec::with_capacity(horizon);
    let mut decisions = Vec::new();
    let mut t = 0;
    while t < horizon - final_len {
        let x = states[t].clone();
        let zeta = sys.disturbance_window(t, k)?;
        let res =
            solve_terminal_cost(sys, model, terminal, t, k, &x, &zeta).map_err(|e| e.at_step(t))?;
        decisions.push(decision(t, &res, h));
        for j in 0..h {
            let u = res.controls[j].clone();
            states.push(step(sys, t + j, &states[t + j], &u));
            controls.push(u);
        }
        t += h;
    }
    let x = states[t].clone();
    let zeta = sys.disturbance_window(t, final_len)?;
    let res = solve_terminal_cost(sys, model, &TerminalCost::Zero, t, final_len, &x, &zeta)
        .map_err(|e| e.at_step(t))?;
    decisions.push(decision(t, &res, final_len));
    for j in 0..final_len {
        let u = res.controls[j].clone();
        states.push(step(sys, t + j, &states[t + j], &u));
        controls.push(u);
    }
    let tag = if h == 1 && final_len == k {
        ControllerTag::Pck {
            k,
            terminal: terminal.tag().to_string(),
        }
    } else {
        ControllerTag::Pckh {
            k,
            h,
            terminal: terminal.tag().to_string(),
        }
    };
    let traj = Trajectory::certify(sys, states, controls)?;
    RunRecord::new(sys, model, traj, tag, decisions)
}

/// The offline optimal trajectory as a run.
pub fn run_opt(sys: &LtvSystem, model: &CostModel) -> Result<RunRecord> {
    model.check_compatible(sys)?;
    let res = offline_optimal(sys, model)?;
    let d = decision(0, &res, sys.horizon());
    let traj = res.to_trajectory(sys)?;
    RunRecord::new(sys, model, traj, ControllerTag::Opt, vec![d])
}

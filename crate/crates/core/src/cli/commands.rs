//! Command implementations. Every command draws all randomness from one generator seeded by
//! the configuration, and writes artifacts only after its computation has finished.

use std::path::{Path, PathBuf};

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use super::config::{load, ControllerSpec, ExperimentConfig, LoadedConfig};
use crate::analysis::{
    competitive_report, random_banded_case, regret_sweep, theory_constants, verify_banded_decay,
    verify_cost_smoothness, verify_iss, verify_ltv_sensitivity, verify_one_step_difference,
    verify_opt_stability, verify_reduction, verify_soco_sensitivity, verify_switching_smoothness,
    window_thresholds, SensitivityVariant, SocoProblem, TheoryConstants,
};
use crate::controllers::{run_opt, run_pc_k, run_pc_kh, RunRecord};
use crate::costs::CostModel;
use crate::error::{Error, Result};
use crate::system::{generate_with_rng, ControllabilityReport, LtvSystem, DEFAULT_RANK_TOL};

pub const SUITES: [&str; 9] = [
    "sensitivity-ltv",
    "sensitivity-soco",
    "banded",
    "stability",
    "smoothness",
    "iss",
    "competitive",
    "potential",
    "constants",
];

/// Instance, costs and constants built from a configuration.
struct Context {
    loaded: LoadedConfig,
    rng: ChaCha8Rng,
    sys: LtvSystem,
    model: CostModel,
    report: ControllabilityReport,
    tc: TheoryConstants,
    out_dir: PathBuf,
}

impl Context {
    fn new(path: &Path, out_override: Option<&Path>) -> Result<Self> {
        let loaded = load(path)?;
        let mut rng = ChaCha8Rng::seed_from_u64(loaded.config.seed);
        let sys = generate_with_rng(&loaded.config.instance, &mut rng)?;
        let model = loaded.config.costs.build(&sys, &mut rng)?;
        model.check_compatible(&sys)?;
        let report = sys.analyze_controllability(DEFAULT_RANK_TOL)?;
        let tc = theory_constants(&report, &model);
        let out_dir = out_override
            .map(Path::to_path_buf)
            .unwrap_or_else(|| loaded.config.output_dir.clone());
        Ok(Self {
            loaded,
            rng,
            sys,
            model,
            report,
            tc,
            out_dir,
        })
    }

    fn config(&self) -> &ExperimentConfig {
        &self.loaded.config
    }

    fn next_seed(&mut self) -> u64 {
        self.rng.random()
    }

    fn envelope(&self, command: &str, body: Value) -> Value {
        json!({
            "command": command,
            "version": env!("CARGO_PKG_VERSION"),
            "config_digest": self.loaded.digest,
            "seed": self.config().seed,
            "instance": {
                "family": self.config().instance.family,
                "n": self.sys.state_dim(),
                "m": self.sys.control_dim(),
                "T": self.sys.horizon(),
                "controllability_index": self.report.index,
                "sigma": self.report.sigma,
            },
            "result": body,
        })
    }

    fn write(&self, name: &str, contents: &str) -> Result<PathBuf> {
        std::fs::create_dir_all(&self.out_dir)?;
        let path = self.out_dir.join(name);
        std::fs::write(&path, contents)?;
        Ok(path)
    }

    fn write_json(&self, name: &str, value: &Value) -> Result<PathBuf> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write(name, &text)
    }

    /// Window length for window-level suites: the configured p, else min(T − t, 2d + 2).
    fn window(&self) -> Result<(usize, usize)> {
        let v = &self.config().verification;
        let t = v.t;
        let room = self.sys.horizon().saturating_sub(t);
        let p = v.p.unwrap_or_else(|| room.min(2 * self.tc.d + 2));
        if p < self.tc.d {
            return Err(Error::Precondition(format!(
                "window p = {p} from t = {t} is shorter than the controllability index {}",
                self.tc.d
            )));
        }
        Ok((t, p))
    }
}

fn to_value<T: serde::Serialize>(v: &T) -> Result<Value> {
    Ok(serde_json::to_value(v)?)
}

fn run_controller(ctx: &Context, spec: &ControllerSpec) -> Result<RunRecord> {
    let n = ctx.sys.state_dim();
    let label = match spec {
        ControllerSpec::Pck { k, .. } => format!("pc_k (k = {k})"),
        ControllerSpec::Pckh { k, h, .. } => format!("pc_kh (k = {k}, h = {h})"),
        ControllerSpec::Opt => "opt".to_string(),
    };
    let out = match spec {
        ControllerSpec::Pck { k, terminal } => {
            run_pc_k(&ctx.sys, &ctx.model, *k, &terminal.build(n)?)
        }
        ControllerSpec::Pckh { k, h, terminal } => {
            run_pc_kh(&ctx.sys, &ctx.model, *k, *h, &terminal.build(n)?)
        }
        ControllerSpec::Opt => run_opt(&ctx.sys, &ctx.model),
    };
    out.inspect_err(|_| eprintln!("error: controller {label} failed"))
}

/// Runs the declared controllers; writes one trajectory CSV per run and a summary JSON.
pub fn simulate(path: &Path, out: Option<&Path>) -> Result<bool> {
    let ctx = Context::new(path, out)?;
    if ctx.config().controllers.is_empty() {
        return Err(Error::Configuration("no controllers declared".into()));
    }
    let mut runs = Vec::new();
    for spec in &ctx.config().controllers {
        runs.push(run_controller(&ctx, spec)?);
    }
    let opt_cost = runs
        .iter()
        .find(|r| r.tag == crate::controllers::ControllerTag::Opt)
        .map(|r| r.total_cost);
    let mut summaries = Vec::new();
    for (i, rec) in runs.iter().enumerate() {
        let name = format!("run_{i:02}_{}.csv", rec.tag.label());
        ctx.write(&name, &rec.to_csv())?;
        let mut s = rec.to_json();
        s["csv"] = json!(name);
        if let Some(opt) = opt_cost {
            s["regret"] = json!(rec.total_cost - opt);
            s["ratio"] = if opt > 0.0 {
                json!(rec.total_cost / opt)
            } else {
                Value::Null
            };
        }
        summaries.push(s);
    }
    let body = json!({ "runs": summaries });
    ctx.write_json("summary.json", &ctx.envelope("simulate", body))?;
    Ok(true)
}

/// Regret of PC_k for k_min..=k_max against the offline optimum.
pub fn regret(path: &Path, k_min: usize, k_max: usize, out: Option<&Path>) -> Result<bool> {
    let ctx = Context::new(path, out)?;
    let horizon = ctx.sys.horizon();
    if k_min == 0 || k_min > k_max || k_max > horizon {
        return Err(Error::Configuration(format!(
            "k grid needs 1 <= k_min <= k_max <= T (got {k_min}..{k_max}, T = {horizon})"
        )));
    }
    let ks: Vec<usize> = (k_min..=k_max).collect();
    let terminal = ctx
        .config()
        .verification
        .terminal
        .build(ctx.sys.state_dim())?;
    let sweep = regret_sweep(&ctx.sys, &ctx.model, &ctx.tc, &ks, &terminal)?;
    let th = window_thresholds(
        &ctx.tc,
        ctx.config().verification.delta,
        ctx.config().verification.epsilon,
    )?;
    ctx.write("regret_sweep.csv", &sweep.to_csv())?;
    let body = json!({
        "slope": sweep.slope,
        "intercept": sweep.intercept,
        "r2": sweep.r2,
        "fit_points": sweep.fit_points,
        "lambda_fit": sweep.slope.map(f64::exp),
        "lambda_theory": sweep.lambda_theory,
        "k_regret_threshold": th.k_regret,
        "failures": sweep.failures,
    });
    ctx.write_json("regret_fit.json", &ctx.envelope("regret-sweep", body))?;
    Ok(sweep.failures.is_empty())
}

/// Theory constants and thresholds.
pub fn constants(path: &Path, out: Option<&Path>) -> Result<bool> {
    let ctx = Context::new(path, out)?;
    let body = constants_body(&ctx)?;
    let doc = ctx.envelope("constants", body);
    ctx.write_json("constants.json", &doc)?;
    println!("{}", serde_json::to_string_pretty(&doc)?);
    Ok(true)
}

fn constants_body(ctx: &Context) -> Result<Value> {
    let v = &ctx.config().verification;
    let th = window_thresholds(&ctx.tc, v.delta, v.epsilon)?;
    let per_p: Vec<Value> = (ctx.tc.d..=2 * ctx.tc.d - 1)
        .map(|p| {
            json!({
                "p": p,
                "C_p": ctx.tc.c_of_p(p),
                "L1_stated": ctx.tc.l1_stated(p),
                "L1_derived": ctx.tc.l1_derived(p),
                "L2": ctx.tc.l2(p),
            })
        })
        .collect();
    Ok(json!({
        "constants": to_value(&ctx.tc)?,
        "thresholds": to_value(&th)?,
        "per_window": per_p,
    }))
}

/// Runs one verification suite; returns whether it found zero violations.
pub fn verify(path: &Path, suite: &str, out: Option<&Path>) -> Result<bool> {
    if !SUITES.contains(&suite) {
        return Err(Error::Configuration(format!(
            "unknown suite `{suite}` (expected one of {})",
            SUITES.join(", ")
        )));
    }
    let mut ctx = Context::new(path, out)?;
    let name = format!("verify_{suite}.json");
    match run_suite(&mut ctx, suite) {
        Ok((body, passed)) => {
            let mut doc = ctx.envelope("verify", body);
            doc["suite"] = json!(suite);
            doc["passed"] = json!(passed);
            ctx.write_json(&name, &doc)?;
            Ok(passed)
        }
        Err(e) => {
            let mut doc = ctx.envelope("verify", json!({ "error": e.to_string() }));
            doc["suite"] = json!(suite);
            doc["passed"] = json!(false);
            ctx.write_json(&name, &doc)?;
            Err(e)
        }
    }
}

fn run_suite(ctx: &mut Context, suite: &str) -> Result<(Value, bool)> {
    let v = ctx.config().verification.clone();
    let n = ctx.sys.state_dim();
    let terminal = v.terminal.build(n)?;
    match suite {
        "constants" => Ok((constants_body(ctx)?, true)),
        "sensitivity-ltv" => {
            let (t, p) = ctx.window()?;
            let seed = ctx.next_seed();
            let mut reports = Vec::new();
            let mut passed = true;
            for variant in [
                SensitivityVariant::TerminalConstraint,
                SensitivityVariant::TerminalCost(terminal),
            ] {
                let rep = verify_ltv_sensitivity(
                    &ctx.sys, &ctx.model, &ctx.tc, &variant, t, p, v.trials, seed,
                )?;
                passed &= rep.passed();
                reports
                    .push(json!({ "variant": format!("{variant:?}"), "report": to_value(&rep)? }));
            }
            Ok((json!({ "t": t, "p": p, "reports": reports }), passed))
        }
        "sensitivity-soco" => {
            let seed = ctx.next_seed();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let problem = SocoProblem::random_quadratic(
                &mut rng,
                n,
                v.soco_p.max(2),
                (0.5, 2.0),
                (0.5, 3.0),
            )?;
            let rep = verify_soco_sensitivity(&problem, v.trials, rng.random())?;
            let mut passed = rep.passed();
            let blocks = (ctx.sys.horizon() - v.t.min(ctx.sys.horizon())) / ctx.tc.d;
            let reduction = if blocks >= 1 {
                let x = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
                let z = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
                let r = verify_reduction(
                    &ctx.sys,
                    &ctx.model,
                    v.t,
                    blocks.min(4),
                    &x,
                    &z,
                    ctx.tc.l2(ctx.tc.d),
                )?;
                passed &= r.max_state_gap <= 1e-6;
                to_value(&r)?
            } else {
                Value::Null
            };
            Ok((
                json!({ "soco": to_value(&rep)?, "reduction": reduction }),
                passed,
            ))
        }
        "banded" => {
            let seed = ctx.next_seed();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut violations = 0;
            let mut checks = 0;
            let mut max_ratio: f64 = 0.0;
            let mut details = Vec::new();
            for i in 0..v.samples {
                let case = random_banded_case(&mut rng, 3, 12);
                let rep = verify_banded_decay(&case, 20, seed.wrapping_add(i as u64))?;
                violations += rep.violations;
                checks += rep.checks;
                max_ratio = max_ratio.max(rep.max_ratio);
                details.extend(rep.details.into_iter().map(|d| format!("matrix {i}: {d}")));
            }
            details.truncate(10);
            let body = json!({
                "matrices": v.samples,
                "checks": checks,
                "violations": violations,
                "max_ratio": max_ratio,
                "details": details,
            });
            Ok((body, violations == 0))
        }
        "stability" => {
            let (t, p) = ctx.window()?;
            let s1 = ctx.next_seed();
            let s2 = ctx.next_seed();
            let stab =
                verify_opt_stability(&ctx.sys, &ctx.model, &ctx.tc, &terminal, t, p, v.trials, s1)?;
            let step =
                verify_one_step_difference(&ctx.sys, &ctx.model, &ctx.tc, &terminal, v.trials, s2)?;
            let passed = stab.passed() && step.passed();
            Ok((
                json!({ "t": t, "p": p, "opt_stability": to_value(&stab)?, "one_step_difference": to_value(&step)? }),
                passed,
            ))
        }
        "smoothness" => {
            let (t, p) = ctx.window()?;
            let seed = ctx.next_seed();
            let cost =
                verify_cost_smoothness(&ctx.sys, &ctx.model, &ctx.tc, t, p, v.eta, v.trials, seed)?;
            let mut passed = cost.passed();
            let mut hessians = Vec::new();
            for q in ctx.tc.d..=2 * ctx.tc.d - 1 {
                if t + q > ctx.sys.horizon() {
                    break;
                }
                let seed = ctx.next_seed();
                let rep = verify_switching_smoothness(
                    &ctx.sys, &ctx.model, &ctx.tc, t, q, v.points, seed,
                )?;
                passed &= rep.passed();
                hessians.push(to_value(&rep)?);
            }
            Ok((
                json!({ "cost_smoothness": to_value(&cost)?, "switching_smoothness": hessians }),
                passed,
            ))
        }
        "iss" => {
            let th = window_thresholds(&ctx.tc, v.delta, v.epsilon)?;
            let k = v.k.unwrap_or(th.k_regret);
            if k > ctx.sys.horizon() {
                return Err(Error::Precondition(format!(
                    "stability threshold k = {k} exceeds the horizon {}",
                    ctx.sys.horizon()
                )));
            }
            let rec = run_pc_k(&ctx.sys, &ctx.model, k, &terminal)?;
            let rep = verify_iss(&ctx.sys, &rec, &ctx.tc, v.delta, ctx.sys.disturbance_sup())?;
            let passed = rep.passed();
            Ok((to_value(&rep)?, passed))
        }
        "competitive" | "potential" => {
            let th = window_thresholds(&ctx.tc, v.delta, v.epsilon)?;
            let k = v.k.unwrap_or(th.k_competitive.max(ctx.tc.d));
            if k > ctx.sys.horizon() {
                return Err(Error::Precondition(format!(
                    "competitive-ratio threshold k = {k} exceeds the horizon {}",
                    ctx.sys.horizon()
                )));
            }
            let rep = competitive_report(&ctx.sys, &ctx.model, &ctx.tc, k, v.epsilon)?;
            if suite == "potential" {
                let passed = rep.potential.passed;
                Ok((to_value(&rep.potential)?, passed))
            } else {
                let passed = rep.passed();
                Ok((to_value(&rep)?, passed))
            }
        }
        _ => unreachable!("suite names are checked by the caller"),
    }
}

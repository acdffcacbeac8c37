//! Public-API checks against independent oracles, plus property tests of solver and
//! controller invariants.

mod common;

use ltv_pc::analysis::{potential_series, verify_iss, TheoryConstants};
use ltv_pc::costs::{
    pseudo_huber_family, quadratic_family, random_quadratic_family, recenter_costs,
};
use ltv_pc::solver::{solve_terminal_constraint_with, solve_terminal_cost_with};
use ltv_pc::{
    generate_instance, optimal_value, run_opt, run_pc_k, solve_terminal_constraint,
    solve_terminal_cost, CostFn, InstanceFamily, InstanceSpec, LtvSystem, SolveMethod,
    SolverOptions, TerminalCost,
};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::Rng;

use common::{gaussian_vec, huber_pg_oracle, rng, weights, Huber, KktWindow};

fn scalar(a: f64, horizon: usize, x0: f64) -> LtvSystem {
    LtvSystem::time_invariant(
        DMatrix::from_element(1, 1, a),
        DMatrix::from_element(1, 1, 1.0),
        vec![DVector::zeros(1); horizon],
        DVector::from_element(1, x0),
    )
    .unwrap()
}

fn one(x: f64) -> DVector<f64> {
    DVector::from_element(1, x)
}

#[test]
fn transition_and_controllability_examples() {
    let sys = scalar(2.0, 5, 1.0);
    assert_eq!(sys.transition_matrix(3, 0).unwrap()[(0, 0)], 8.0);
    assert_eq!(sys.transition_matrix(3, 3).unwrap()[(0, 0)], 1.0);
    let half = scalar(0.5, 5, 1.0);
    assert_eq!(
        half.controllability_matrix(0, 2).unwrap().as_slice(),
        &[0.5, 1.0]
    );

    let a = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 1.0]);
    let b = DMatrix::from_column_slice(2, 1, &[0.0, 1.0]);
    let double =
        LtvSystem::time_invariant(a, b, vec![DVector::zeros(2); 6], DVector::zeros(2)).unwrap();
    assert_eq!(double.analyze_controllability(1e-10).unwrap().index, 2);
}

#[test]
fn appending_columns_never_lowers_sigma_min() {
    let sys = generate_instance(
        &InstanceSpec::new(InstanceFamily::RandomGeneral, 2, 2, 10),
        11,
    )
    .unwrap();
    // M(t, 3) = [A_{t+2} M(t, 2), B_{t+2}] holds the columns of M(t+1, 2), not of M(t, 2)
    for t in 0..6 {
        let two = sys
            .controllability_matrix(t + 1, 2)
            .unwrap()
            .singular_values()
            .min();
        let three = sys
            .controllability_matrix(t, 3)
            .unwrap()
            .singular_values()
            .min();
        assert!(three >= two - 1e-12);
    }
}

#[test]
fn gridfreq_with_constant_inertia_is_time_invariant() {
    let mut spec = InstanceSpec::new(InstanceFamily::GridfreqToy, 2, 1, 8);
    spec.amplitude = 0.0;
    let sys = generate_instance(&spec, 3).unwrap();
    assert_eq!(sys.a(0), sys.a(1));
}

#[test]
fn pseudo_huber_value_example() {
    let f = CostFn::pseudo_huber(1.0, 2.0, 1).unwrap();
    let expected = 0.5 + 2.0 * (2f64.sqrt() - 1.0);
    assert!((f.value(&one(1.0)) - expected).abs() < 1e-15);
    assert!((expected - 1.3284271).abs() < 1e-7);
}

#[test]
fn theory_constants_example() {
    let tc = TheoryConstants::from_parts(1.0, 1.0, 1.0, 1.0, 1, 2.0, 2.0, 2.0, 2.0).with_l0(4.0);
    let lambda0 = 1.0 - 2.0 / (5f64.sqrt() + 1.0);
    assert!((tc.lambda0 - lambda0).abs() < 1e-15);
    assert!((tc.lambda - lambda0).abs() < 1e-14);
    assert!((tc.lambda0 - 0.381_966_0).abs() < 1e-7);
    assert!((tc.c0 - 4.0).abs() < 1e-15);
    assert!((tc.c - 10.472_136_0).abs() < 1e-6);
}

#[test]
fn one_step_closed_forms() {
    // f = x², c = u², A = 0.5, B = 1: minimize (0.5 + u)² + u²
    let sys = scalar(0.5, 1, 1.0);
    let model = quadratic_family(
        vec![DMatrix::from_element(1, 1, 2.0)],
        vec![DMatrix::from_element(1, 1, 2.0)],
    )
    .unwrap();
    let free = solve_terminal_cost(
        &sys,
        &model,
        &TerminalCost::Zero,
        0,
        1,
        &one(1.0),
        &[one(0.0)],
    )
    .unwrap();
    assert!((free.controls[0][0] + 0.25).abs() < 1e-12);
    assert!((free.value - 0.125).abs() < 1e-12);
    let pinned = optimal_value(&sys, &model, 0, 1, &one(1.0), &[one(0.0)], &one(0.0)).unwrap();
    assert!((pinned - 0.25).abs() < 1e-12);
    assert!((run_opt(&sys, &model).unwrap().total_cost - 0.125).abs() < 1e-12);
}

#[test]
fn principle_of_optimality() {
    let mut r = rng(41);
    let sys = generate_instance(
        &InstanceSpec::new(InstanceFamily::RandomStable, 2, 1, 14),
        41,
    )
    .unwrap();
    let model = pseudo_huber_family(1.0, 0.7, 2, 1, 14).unwrap();
    let (t, p) = (1, 10);
    let x = gaussian_vec(&mut r, 2);
    let z = gaussian_vec(&mut r, 2);
    let zeta = sys.disturbance_window(t, p).unwrap();
    let full = solve_terminal_constraint(&sys, &model, t, p, &x, &zeta, &z).unwrap();
    let (i, j) = (3, 8);
    let sub = solve_terminal_constraint(
        &sys,
        &model,
        t + i,
        j - i,
        &full.states[i],
        &zeta[i..j],
        &full.states[j],
    )
    .unwrap();
    for (a, b) in sub.states.iter().zip(&full.states[i..=j]) {
        assert!((a - b).amax() < 1e-7);
    }
}

#[test]
fn recentering_preserves_costs() {
    let mut r = rng(5);
    let sys =
        generate_instance(&InstanceSpec::new(InstanceFamily::RandomStable, 2, 2, 6), 5).unwrap();
    let model = random_quadratic_family(&mut r, 2, 2, 6, (0.5, 2.0), (0.5, 2.0)).unwrap();
    let f_min: Vec<_> = (0..=6).map(|_| gaussian_vec(&mut r, 2)).collect();
    let c_min: Vec<_> = (0..6).map(|_| gaussian_vec(&mut r, 2)).collect();
    let shifted = model.clone();
    // costs of the original problem centered at the offsets
    let f: Vec<CostFn> = (1..=6)
        .map(|t| shifted.f(t).clone().centered_at(&f_min[t]))
        .collect();
    let c: Vec<CostFn> = (1..=6)
        .map(|t| shifted.c(t).clone().centered_at(&c_min[t - 1]))
        .collect();
    let original = ltv_pc::CostModel::new(f, c).unwrap();
    let (centered, moved) = recenter_costs(&original, &sys, &f_min, &c_min).unwrap();
    let controls: Vec<_> = (0..6).map(|_| gaussian_vec(&mut r, 2)).collect();
    let before = original.total_cost(&sys.rollout(sys.x0(), &controls).unwrap());
    let shifted_controls: Vec<_> = controls.iter().zip(&c_min).map(|(u, c)| u - c).collect();
    let after = centered.total_cost(&moved.rollout(moved.x0(), &shifted_controls).unwrap());
    assert!(
        (before - after).abs() <= 1e-12 * (1.0 + before.abs()),
        "{before} vs {after}"
    );
}

#[test]
fn potential_of_opt_against_itself_is_zero() {
    let sys = generate_instance(
        &InstanceSpec::new(InstanceFamily::RandomStable, 2, 1, 10),
        9,
    )
    .unwrap();
    let model = pseudo_huber_family(1.0, 0.5, 2, 1, 10).unwrap();
    let opt = run_opt(&sys, &model).unwrap();
    assert!(potential_series(&opt, &opt)
        .unwrap()
        .iter()
        .all(|&v| v == 0.0));
}

#[test]
fn iss_holds_trivially_at_rest() {
    let th = |tc: &TheoryConstants| ltv_pc::analysis::window_thresholds(tc, 0.5, 0.5).unwrap();
    let (sys, model, _) = common::scalar_fitted(3, |tc| th(tc).k_regret + 10);
    let horizon = sys.horizon();
    let rest = sys
        .with_disturbances(vec![DVector::zeros(1); horizon])
        .unwrap()
        .with_initial_state(DVector::zeros(1))
        .unwrap();
    let tc = common::constants(&rest, &model);
    let record = run_pc_k(&rest, &model, th(&tc).k_regret, &TerminalCost::Zero).unwrap();
    assert_eq!(record.total_cost, 0.0);
    let rep = verify_iss(&rest, &record, &tc, 0.5, 0.0).unwrap();
    assert!(rep.passed());
    assert!(rep.first_branch.checks > 0 && rep.second_branch.checks > 0);
}

fn random_window(
    seed: u64,
) -> (
    LtvSystem,
    ltv_pc::CostModel,
    usize,
    usize,
    DVector<f64>,
    Vec<DVector<f64>>,
    DVector<f64>,
) {
    let mut r = rng(seed);
    let n = r.random_range(1..=3);
    let m = r.random_range(1..=2);
    let p = r.random_range(1..=9);
    let t = r.random_range(0..3);
    let horizon = t + p + 8;
    let sys = generate_instance(
        &InstanceSpec::new(InstanceFamily::RandomGeneral, n, m, horizon),
        seed,
    )
    .unwrap();
    let model = random_quadratic_family(&mut r, n, m, horizon, (0.2, 4.0), (0.2, 4.0)).unwrap();
    let x = gaussian_vec(&mut r, n);
    let zeta = (0..p).map(|_| gaussian_vec(&mut r, n)).collect();
    let z = gaussian_vec(&mut r, n);
    (sys, model, t, p, x, zeta, z)
}

fn method(m: SolveMethod) -> SolverOptions {
    SolverOptions {
        method: m,
        ..SolverOptions::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn quadratic_windows_match_kkt(seed in 0u64..100_000) {
        let (sys, model, t, p, x, zeta, z) = random_window(seed);
        let (q, r) = weights(&model);
        let kkt = KktWindow { sys: &sys, t, p, q: q[t..t + p].to_vec(), r: r[t..t + p].to_vec(), q_terminal: None };
        for m in [SolveMethod::Dense, SolveMethod::Riccati] {
            let res = solve_terminal_cost_with(&sys, &model, &TerminalCost::Zero, t, p, &x, &zeta, &method(m)).unwrap();
            let (val, _) = kkt.solve(&x, &zeta, None);
            prop_assert!((res.value - val).abs() <= 1e-8 * val.abs().max(1e-12));
            if sys.control_dim() * p >= sys.state_dim() {
                let res = solve_terminal_constraint_with(&sys, &model, t, p, &x, &zeta, &z, &method(m)).unwrap();
                let (val, _) = kkt.solve(&x, &zeta, Some(&z));
                prop_assert!((res.value - val).abs() <= 1e-8 * val.abs().max(1e-12));
                prop_assert!(res.terminal_residual <= 1e-9 * (1.0 + z.norm()));
            }
        }
    }

    #[test]
    fn huber_windows_match_projected_gradient(seed in 0u64..100_000) {
        let mut r = rng(seed);
        let sys = generate_instance(&InstanceSpec::new(InstanceFamily::RandomStable, 2, 1, 8), seed).unwrap();
        let cost = Huber { m: r.random_range(0.5..2.0), alpha: r.random_range(0.0..2.0) };
        let model = pseudo_huber_family(cost.m, cost.alpha, 2, 1, 8).unwrap();
        let x = gaussian_vec(&mut r, 2) * 3.0;
        let zeta = sys.disturbance_window(1, 6).unwrap();
        let z = gaussian_vec(&mut r, 2);
        let free = solve_terminal_cost(&sys, &model, &TerminalCost::Zero, 1, 6, &x, &zeta).unwrap();
        prop_assert!((free.value - huber_pg_oracle(&sys, cost, 1, 6, &x, &zeta, None)).abs() <= 1e-6);
        let pinned = solve_terminal_constraint(&sys, &model, 1, 6, &x, &zeta, &z).unwrap();
        prop_assert!((pinned.value - huber_pg_oracle(&sys, cost, 1, 6, &x, &zeta, Some(&z))).abs() <= 1e-6);
    }

    #[test]
    fn constraint_never_helps(seed in 0u64..100_000) {
        let (sys, model, t, p, x, zeta, z) = random_window(seed);
        prop_assume!(sys.control_dim() * p >= sys.state_dim());
        let free = solve_terminal_cost(&sys, &model, &TerminalCost::Zero, t, p, &x, &zeta).unwrap();
        let pinned = solve_terminal_constraint(&sys, &model, t, p, &x, &zeta, &z).unwrap();
        prop_assert!(pinned.value >= free.value * (1.0 - 1e-9) - 1e-12);
        prop_assert!(free.value >= 0.0);
    }

    #[test]
    fn optimal_value_is_convex(seed in 0u64..100_000, theta in 0.0f64..1.0) {
        let mut r = rng(seed);
        let sys = generate_instance(&InstanceSpec::new(InstanceFamily::RandomStable, 2, 1, 8), seed).unwrap();
        let model = pseudo_huber_family(1.0, 1.0, 2, 1, 8).unwrap();
        let zeta = sys.disturbance_window(0, 5).unwrap();
        let (x1, x2, z) = (gaussian_vec(&mut r, 2) * 2.0, gaussian_vec(&mut r, 2) * 2.0, gaussian_vec(&mut r, 2));
        let mid = &x1 * theta + &x2 * (1.0 - theta);
        let iota = |x: &DVector<f64>| optimal_value(&sys, &model, 0, 5, x, &zeta, &z).unwrap();
        let lhs = iota(&mid);
        let rhs = theta * iota(&x1) + (1.0 - theta) * iota(&x2);
        prop_assert!(lhs <= rhs + 1e-9 * (1.0 + rhs));
    }

    #[test]
    fn offline_optimum_beats_every_window(seed in 0u64..100_000, k in 1usize..=12) {
        let mut r = rng(seed);
        let sys = generate_instance(&InstanceSpec::new(InstanceFamily::RandomStable, 2, 2, 12), seed).unwrap();
        let model = random_quadratic_family(&mut r, 2, 2, 12, (0.5, 2.0), (0.5, 2.0)).unwrap();
        let opt = run_opt(&sys, &model).unwrap();
        for f in [TerminalCost::Zero, TerminalCost::IndicatorOrigin] {
            let pc = run_pc_k(&sys, &model, k, &f).unwrap();
            prop_assert!(opt.total_cost <= pc.total_cost + 1e-8);
            prop_assert!(pc.trajectory.dyn_residual <= 1e-8);
        }
    }

    #[test]
    fn origin_is_a_fixed_point(seed in 0u64..100_000) {
        let (sys, model, t, p, x, _, _) = random_window(seed);
        let zeros = vec![DVector::zeros(x.len()); p];
        let res = solve_terminal_cost(&sys, &model, &TerminalCost::Zero, t, p, &DVector::zeros(x.len()), &zeros).unwrap();
        prop_assert_eq!(res.value, 0.0);
        prop_assert!(res.states.iter().all(|s| s.amax() == 0.0));
    }
}

//! Closed-form perturbation constants, decay rates and prediction-window thresholds.

use serde::Serialize;

use crate::costs::CostModel;
use crate::error::{Error, Result};
use crate::system::ControllabilityReport;

/// |a − 1| at or below this uses the a = 1 branch of C(p).
pub const UNIT_BRANCH_TOL: f64 = 1e-12;

/// Decay rate λ0 = (s − 1)/(s + 1) with s = √(1 + 2ℓ/μ), plus ln(1/λ0) computed without cancellation.
pub fn soco_rate(ell: f64, mu: f64) -> (f64, f64) {
    let s = (1.0 + 2.0 * ell / mu).sqrt();
    let lambda0 = (s - 1.0) / (s + 1.0);
    let log_inv = (2.0 / (s - 1.0)).ln_1p();
    (lambda0, log_inv)
}

/// (λ0, C0 = 2ℓ/μ) for a SOCO problem with μ-strongly convex hitting and ℓ-smooth switching costs.
pub fn soco_constants(ell: f64, mu: f64) -> (f64, f64) {
    (soco_rate(ell, mu).0, 2.0 * ell / mu)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TheoryConstants {
    pub a: f64,
    pub b: f64,
    pub b_prime: f64,
    pub sigma: f64,
    pub d: usize,
    pub m_f: f64,
    pub l_f: f64,
    pub m_c: f64,
    pub l_c: f64,
    /// max(ℓ_f, ℓ_c).
    pub ell: f64,
    /// max over d ≤ p ≤ 2d−1 of L2(p).
    pub l0: f64,
    pub lambda0: f64,
    pub c0: f64,
    pub lambda: f64,
    pub c: f64,
    pub l4: f64,
    /// ln(1/λ), kept separately because λ is often within 1e−3 of 1.
    pub log_inv_lambda: f64,
    /// Set when C < 1; several downstream bounds assume C ≥ 1.
    pub c_below_one: bool,
}

impl TheoryConstants {
    pub fn new(report: &ControllabilityReport, model: &CostModel) -> Self {
        Self::from_parts(
            report.a,
            report.b,
            report.b_prime,
            report.sigma,
            report.index,
            model.m_f,
            model.l_f,
            model.m_c,
            model.l_c,
        )
    }

    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        a: f64,
        b: f64,
        b_prime: f64,
        sigma: f64,
        d: usize,
        m_f: f64,
        l_f: f64,
        m_c: f64,
        l_c: f64,
    ) -> Self {
        let ell = l_f.max(l_c);
        let mut out = Self {
            a,
            b,
            b_prime,
            sigma,
            d,
            m_f,
            l_f,
            m_c,
            l_c,
            ell,
            l0: 0.0,
            lambda0: 0.0,
            c0: 0.0,
            lambda: 0.0,
            c: 0.0,
            l4: l_f + 2.0 * b_prime * b_prime * l_c + 2.0 * a * a * b_prime * b_prime * l_c,
            log_inv_lambda: 0.0,
            c_below_one: false,
        };
        out.l0 = (d..=2 * d - 1).map(|p| out.l2(p)).fold(0.0, f64::max);
        out.set_rates();
        out
    }

    /// Constants for a directly supplied L0 (used when only the smoothness of the
    /// switching cost is known).
    pub fn with_l0(mut self, l0: f64) -> Self {
        self.l0 = l0;
        self.set_rates();
        self
    }

    fn set_rates(&mut self) {
        let (lambda0, log_inv0) = soco_rate(self.l0, self.m_c);
        self.lambda0 = lambda0;
        self.c0 = 2.0 * self.l0 / self.m_c;
        self.c = self.c0 / lambda0;
        let span = (2 * self.d - 1) as f64;
        self.log_inv_lambda = log_inv0 / span;
        self.lambda = (-self.log_inv_lambda).exp();
        self.c_below_one = self.c < 1.0;
    }

    /// C(p) from the explicit bound on the implicit map's derivative.
    pub fn c_of_p(&self, p: usize) -> f64 {
        let (a, b, s2) = (self.a, self.b, self.sigma * self.sigma);
        let pf = p as f64;
        if (a - 1.0).abs() <= UNIT_BRANCH_TOL {
            return (b * pf.sqrt() / s2 * (pf.sqrt() + 2.0) + 1.0)
                * (1.0 + b * (pf * (pf + 1.0) / 2.0).sqrt())
                + (pf + 1.0).sqrt() * (1.0 + (pf / 2.0).sqrt());
        }
        let a2 = a * a;
        let first = b * (a.powi(p as i32 + 1) + a - 2.0) / (s2 * (a - 1.0))
            * ((a.powi(2 * p as i32) - 1.0) / (a2 - 1.0)).sqrt()
            + (1.0 + b) / b;
        let inner = (a.powi(2 * p as i32 + 2) - (pf + 1.0) * a2 + pf).max(0.0);
        let second = b * inner.sqrt() / (a2 - 1.0).abs() + 1.0;
        first * second + ((a.powi(2 * p as i32 + 2) - 1.0) / (a2 - 1.0)).sqrt() - 1.0 / b
    }

    /// Lipschitz constant of ψ_t^p as stated alongside the switching-cost smoothness result.
    pub fn l1_stated(&self, p: usize) -> f64 {
        let c = self.c_of_p(p);
        c * (1.0 + self.ell * c / self.m_c)
    }

    /// Lipschitz constant of ψ_t^p as concluded by the derivation (extra factor of C(p)).
    pub fn l1_derived(&self, p: usize) -> f64 {
        let c = self.c_of_p(p);
        c * (1.0 + self.ell * c * c / self.m_c)
    }

    /// Smoothness of ξ_t^p.
    pub fn l2(&self, p: usize) -> f64 {
        let c = self.c_of_p(p);
        self.ell * c * c + self.ell * self.ell * c.powi(4) / self.m_c
    }

    /// λ^k without underflow surprises for large k.
    pub fn lambda_pow(&self, k: f64) -> f64 {
        (-k * self.log_inv_lambda).exp()
    }

    /// 1 − λ, accurate when λ is close to 1.
    pub fn one_minus_lambda(&self) -> f64 {
        -(-self.log_inv_lambda).exp_m1()
    }

    /// 1 − λ².
    pub fn one_minus_lambda_sq(&self) -> f64 {
        -(-2.0 * self.log_inv_lambda).exp_m1()
    }

    /// ln of 24C⁴(C+1)²/(ε λ⁴ (1−λ)² (1−λ²)² m_f), the potential-sum coefficient.
    pub fn ln_potential_coefficient(&self, epsilon: f64) -> f64 {
        24f64.ln() + 4.0 * self.c.ln() + 2.0 * (self.c + 1.0).ln() - epsilon.ln()
            + 4.0 * self.log_inv_lambda
            - 2.0 * self.one_minus_lambda().ln()
            - 2.0 * self.one_minus_lambda_sq().ln()
            - self.m_f.ln()
    }

    /// The coefficient multiplying λ^k in the competitive-ratio bound with the
    /// indicator terminal cost: 1 + 24C⁴(C+1)²(2L4 + L0 + ℓ_f)/(ε λ⁴(1−λ)²(1−λ²)² m_f).
    pub fn cr_coefficient(&self, epsilon: f64) -> f64 {
        let ln_rest =
            self.ln_potential_coefficient(epsilon) + (2.0 * self.l4 + self.l0 + self.l_f).ln();
        1.0 + ln_rest.exp()
    }

    /// 1 + λ^k · cr_coefficient(ε).
    pub fn cr_bound(&self, k: usize, epsilon: f64) -> f64 {
        let ln_coef = self.cr_coefficient(epsilon).ln();
        1.0 + (ln_coef - k as f64 * self.log_inv_lambda).exp()
    }

    /// The sharper form at the end of the derivation, before (1 + λ^k) is bounded by 2:
    /// 1 + λ^k(1 + (1 + λ^k)/ε · 12C⁴(C+1)²(2L4 + L0 + ℓ_f)/(λ⁴(1−λ)²(1−λ²)² m_f)).
    pub fn cr_bound_sharp(&self, k: usize, epsilon: f64) -> f64 {
        let lk = self.lambda_pow(k as f64);
        let ln_half = self.ln_potential_coefficient(epsilon) - 2f64.ln()
            + (2.0 * self.l4 + self.l0 + self.l_f).ln();
        let inner = 1.0 + ((1.0 + lk).ln() + ln_half).exp();
        1.0 + (inner.ln() - k as f64 * self.log_inv_lambda).exp()
    }

    /// Right side of the potential-sum inequality: coefficient · λ^{2k} · Σ H_i*.
    pub fn potential_bound(&self, k: usize, epsilon: f64, opt_state_cost: f64) -> f64 {
        if opt_state_cost <= 0.0 {
            return 0.0;
        }
        (self.ln_potential_coefficient(epsilon) - 2.0 * k as f64 * self.log_inv_lambda
            + opt_state_cost.ln())
        .exp()
    }

    /// Input-to-state bound on ‖x_t‖ for PC_k, both branches.
    pub fn iss_bound(
        &self,
        t: usize,
        horizon: usize,
        k: usize,
        delta: f64,
        x0_norm: f64,
        dist: f64,
    ) -> f64 {
        let c = self.c;
        let oml = self.one_minus_lambda();
        let gain = 2.0 * c / (delta * oml) * (1.0 + 2.0 * c / oml);
        if t + k <= horizon {
            let decay = (t.saturating_sub(k)) as f64 * (1.0 - delta).ln();
            (c / delta) * decay.exp() * x0_norm + gain * dist
        } else {
            let ln_init = 2.0 * c.ln() - delta.ln()
                + (horizon as f64 - 2.0 * k as f64) * (1.0 - delta).ln()
                - (t + k - horizon) as f64 * self.log_inv_lambda;
            let init = if x0_norm > 0.0 {
                (ln_init + x0_norm.ln()).exp()
            } else {
                0.0
            };
            init + (c * gain + 2.0 * c / oml) * dist
        }
    }
}

/// Least admissible window lengths for a set of constants.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Thresholds {
    pub delta: f64,
    pub epsilon: f64,
    /// Least k with k ≥ 1 + ln(C(2C/(1−λ) + λ)/(1−δ))/ln(1/λ).
    pub k_regret: usize,
    /// Least k with k ≥ ln(6C⁶/((1−ε)λ²(1−λ)²(1−λ²)²))/(4 ln(1/λ)).
    pub k_competitive: usize,
    /// Least h with h ≥ max{ln((1+ε)C)/ln(1/λ), d}.
    pub h_replan: usize,
    /// Least k for the replan controller, h_replan + d.
    pub k_replan: usize,
    /// Coefficient multiplying λ^k in the competitive-ratio bound.
    pub cr_coefficient: f64,
    pub regret_raw: f64,
    pub competitive_raw: f64,
    pub replan_raw: f64,
}

fn least_integer_at_least(v: f64) -> usize {
    if v <= 1.0 {
        1
    } else {
        v.ceil() as usize
    }
}

pub fn window_thresholds(tc: &TheoryConstants, delta: f64, epsilon: f64) -> Result<Thresholds> {
    if !(delta > 0.0 && delta < 1.0) || !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(Error::Precondition(format!(
            "delta and epsilon must lie in (0, 1) (got {delta}, {epsilon})"
        )));
    }
    if !(tc.log_inv_lambda > 0.0) || !tc.lambda.is_finite() {
        return Err(Error::Invariant(format!(
            "decay rate {} is not below 1",
            tc.lambda
        )));
    }
    let li = tc.log_inv_lambda;
    let c = tc.c;
    let oml = tc.one_minus_lambda();
    let omls = tc.one_minus_lambda_sq();
    let regret_raw = 1.0 + (c * (2.0 * c / oml + tc.lambda) / (1.0 - delta)).ln() / li;
    let competitive_raw = (6f64.ln() + 6.0 * c.ln() - (1.0 - epsilon).ln() + 2.0 * li
        - 2.0 * oml.ln()
        - 2.0 * omls.ln())
        / (4.0 * li);
    let replan_raw = ((1.0 + epsilon) * c).ln() / li;
    let h_replan = least_integer_at_least(replan_raw).max(tc.d);
    Ok(Thresholds {
        delta,
        epsilon,
        k_regret: least_integer_at_least(regret_raw),
        k_competitive: least_integer_at_least(competitive_raw),
        h_replan,
        k_replan: h_replan + tc.d,
        cr_coefficient: tc.cr_coefficient(epsilon),
        regret_raw,
        competitive_raw,
        replan_raw,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base() -> TheoryConstants {
        TheoryConstants::from_parts(0.5, 1.0, 1.0, 1.0, 1, 1.0, 1.0, 2.0, 1.0)
    }

    #[test]
    fn rates_from_given_l0() {
        let tc = base().with_l0(4.0);
        let expected = 1.0 - 2.0 / (5f64.sqrt() + 1.0);
        assert!((tc.lambda0 - 0.3819660).abs() < 1e-7);
        assert!((tc.lambda0 - expected).abs() < 1e-15);
        assert_eq!(tc.lambda, tc.lambda0);
        assert!((tc.c0 - 4.0).abs() < 1e-15);
        assert!((tc.c - 10.4721360).abs() < 1e-6);
    }

    #[test]
    fn larger_smoothness_slows_decay() {
        let (l1, _) = soco_rate(1.0, 1.0);
        let (l2, _) = soco_rate(2.0, 1.0);
        assert!(l2 > l1);
    }

    #[test]
    fn l0_is_max_over_window_range() {
        let tc = TheoryConstants::from_parts(0.9, 1.2, 1.0, 0.3, 3, 1.0, 2.0, 1.0, 1.5);
        let expected = (3..=5).map(|p| tc.l2(p)).fold(0.0, f64::max);
        assert_eq!(tc.l0, expected);
        assert!(tc.lambda > 0.0 && tc.lambda < 1.0);
        assert!((tc.lambda - tc.lambda0.powf(1.0 / 5.0)).abs() < 1e-14);
    }

    #[test]
    fn unit_branch_near_one() {
        let p = 4;
        let tc1 = TheoryConstants::from_parts(1.0, 1.0, 1.0, 1.0, 1, 1.0, 1.0, 1.0, 1.0);
        let tc2 = TheoryConstants::from_parts(1.0 + 1e-13, 1.0, 1.0, 1.0, 1, 1.0, 1.0, 1.0, 1.0);
        assert_eq!(tc1.c_of_p(p), tc2.c_of_p(p));
        let pf = p as f64;
        let expected = (pf.sqrt() * (pf.sqrt() + 2.0) + 1.0)
            * (1.0 + (pf * (pf + 1.0) / 2.0).sqrt())
            + (pf + 1.0).sqrt() * (1.0 + (pf / 2.0).sqrt());
        assert!((tc1.c_of_p(p) - expected).abs() < 1e-12);
    }

    #[test]
    fn c_of_p_all_regimes_positive_finite() {
        for a in [0.3, 0.999, 1.0, 1.001, 1.7] {
            let tc = TheoryConstants::from_parts(a, 0.8, 1.3, 0.4, 2, 1.0, 1.0, 1.0, 1.0);
            for p in 1..8 {
                let c = tc.c_of_p(p);
                assert!(c.is_finite() && c > 0.0, "a = {a}, p = {p}: {c}");
                assert!(tc.l1_derived(p) >= tc.l1_stated(p) || tc.c_of_p(p) < 1.0);
            }
        }
    }

    #[test]
    fn unit_c_reduces_replan_threshold() {
        let mut tc = base().with_l0(4.0);
        tc.c = 1.0;
        let th = window_thresholds(&tc, 0.5, 0.5).unwrap();
        assert!((th.replan_raw - 1.5f64.ln() / tc.log_inv_lambda).abs() < 1e-14);
        assert_eq!(th.h_replan, least_integer_at_least(th.replan_raw).max(1));
    }

    #[test]
    fn thresholds_are_least_integers() {
        let tc = base();
        let th = window_thresholds(&tc, 0.5, 0.5).unwrap();
        let li = tc.log_inv_lambda;
        let regret_holds = |k: usize| {
            k as f64
                >= 1.0 + (tc.c * (2.0 * tc.c / tc.one_minus_lambda() + tc.lambda) / 0.5).ln() / li
        };
        assert!(regret_holds(th.k_regret));
        assert!(!regret_holds(th.k_regret - 1));
        let cr_holds = |k: usize| {
            let lam = tc.lambda;
            4.0 * k as f64 * li
                >= (6.0 * tc.c.powi(6)
                    / (0.5 * lam * lam * (1.0 - lam).powi(2) * (1.0 - lam * lam).powi(2)))
                .ln()
        };
        assert!(cr_holds(th.k_competitive));
        assert!(!cr_holds(th.k_competitive - 1));
    }

    #[test]
    fn thresholds_shrink_with_faster_decay() {
        let tc = base();
        let mut faster = tc.clone();
        faster.log_inv_lambda *= 2.0;
        faster.lambda = tc.lambda * tc.lambda;
        let a = window_thresholds(&tc, 0.5, 0.5).unwrap();
        let b = window_thresholds(&faster, 0.5, 0.5).unwrap();
        assert!(b.k_regret <= a.k_regret);
        assert!(b.k_competitive <= a.k_competitive);
        assert!(b.h_replan <= a.h_replan);
    }

    #[test]
    fn iss_bound_at_start_exceeds_initial_norm() {
        let tc = base();
        let v = tc.iss_bound(0, 100, 10, 0.5, 2.0, 0.0);
        assert!(v >= 2.0);
    }

    #[test]
    fn sharp_cr_bound_is_tighter() {
        let tc = base();
        for k in [1, 10, 100, 1000] {
            assert!(tc.cr_bound_sharp(k, 0.5) <= tc.cr_bound(k, 0.5) * (1.0 + 1e-12));
        }
    }

    #[test]
    fn invalid_delta_rejected() {
        assert!(window_thresholds(&base(), 1.0, 0.5).is_err());
    }
}

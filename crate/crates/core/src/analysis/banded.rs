//! Exponential off-diagonal decay of inverses of banded positive definite block matrices.

use nalgebra::DMatrix;
use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::trial_rng;
use crate::costs::random_spd;
use crate::error::{Error, Result};
use crate::linalg;

/// Additive slack for the decay check.
pub const BANDED_SLACK: f64 = 1e-10;

/// A symmetric PD block matrix A with block bandwidth q/2 and a block-diagonal PSD D.
#[derive(Debug, Clone, PartialEq)]
pub struct BandedCase {
    pub block_size: usize,
    pub blocks: usize,
    /// Even bandwidth parameter: blocks (i, j) with |i − j| > q/2 vanish.
    pub q: usize,
    pub a: DMatrix<f64>,
    pub d: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BandedReport {
    pub checks: usize,
    pub violations: usize,
    /// Spectrum bounds of A.
    pub a0: f64,
    pub b0: f64,
    pub gamma: f64,
    /// Largest ‖block‖ / bound over the samples.
    pub max_ratio: f64,
    pub details: Vec<String>,
}

impl BandedReport {
    pub fn passed(&self) -> bool {
        self.violations == 0
    }
}

fn normal_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| {
        rng.sample::<f64, _>(rand_distr::StandardNormal)
    })
}

/// Random block-tridiagonal PD A (block size ≤ `max_block`, at most `max_blocks` blocks) with a
/// random block-diagonal PSD D, some of whose blocks are zero.
pub fn random_banded_case(rng: &mut ChaCha8Rng, max_block: usize, max_blocks: usize) -> BandedCase {
    let bs = rng.random_range(1..=max_block.max(1));
    let nb = rng.random_range(2..=max_blocks.max(2));
    let dim = bs * nb;
    let mut a = DMatrix::zeros(dim, dim);
    for i in 0..nb {
        a.view_mut((i * bs, i * bs), (bs, bs))
            .copy_from(&random_spd(rng, bs, 0.5, 3.0));
        if i + 1 < nb {
            let off = normal_matrix(rng, bs, bs) * rng.random_range(0.1..1.5);
            a.view_mut((i * bs, (i + 1) * bs), (bs, bs)).copy_from(&off);
            a.view_mut(((i + 1) * bs, i * bs), (bs, bs))
                .copy_from(&off.transpose());
        }
    }
    let (lo, _) = linalg::sym_eig_range(&a);
    let shift = (-lo).max(0.0) + rng.random_range(0.05..1.0);
    for i in 0..dim {
        a[(i, i)] += shift;
    }
    let mut d = DMatrix::zeros(dim, dim);
    for i in 0..nb {
        if rng.random_bool(0.6) {
            let rank = rng.random_range(1..=bs);
            let g = normal_matrix(rng, bs, rank);
            let blk = &g * g.transpose() * rng.random_range(0.0..3.0);
            d.view_mut((i * bs, i * bs), (bs, bs)).copy_from(&blk);
        }
    }
    BandedCase {
        block_size: bs,
        blocks: nb,
        q: 2,
        a,
        d,
    }
}

fn validate(case: &BandedCase) -> Result<()> {
    let dim = case.block_size * case.blocks;
    if case.block_size == 0 || case.blocks == 0 {
        return Err(Error::Validation("empty block matrix".into()));
    }
    if case.q == 0 || !case.q.is_multiple_of(2) {
        return Err(Error::Validation(format!(
            "bandwidth q = {} must be a positive even integer",
            case.q
        )));
    }
    for m in [&case.a, &case.d] {
        if m.nrows() != dim || m.ncols() != dim {
            return Err(Error::Validation(format!(
                "block matrices must be {dim}x{dim}"
            )));
        }
        if linalg::max_abs(&(m - m.transpose())) > 1e-12 * (1.0 + linalg::max_abs(m)) {
            return Err(Error::Validation("block matrices must be symmetric".into()));
        }
    }
    let bs = case.block_size;
    for i in 0..case.blocks {
        for j in 0..case.blocks {
            let far = i.abs_diff(j) > case.q / 2;
            if (far && linalg::max_abs(&case.a.view((i * bs, j * bs), (bs, bs)).into_owned()) > 0.0)
                || (i != j
                    && linalg::max_abs(&case.d.view((i * bs, j * bs), (bs, bs)).into_owned()) > 0.0)
            {
                return Err(Error::Validation(format!(
                    "block ({i}, {j}) lies outside the band"
                )));
            }
        }
    }
    let (lo, _) = linalg::sym_eig_range(&case.a);
    if !(lo > 0.0) {
        return Err(Error::Validation(format!(
            "A is not positive definite (min eigenvalue {lo:e})"
        )));
    }
    let (dlo, dhi) = linalg::sym_eig_range(&case.d);
    if dlo < -1e-12 * (1.0 + dhi.abs()) {
        return Err(Error::Validation("D is not positive semidefinite".into()));
    }
    Ok(())
}

/// Checks ‖((A + D)⁻¹)_{S_R, S_C}‖ ≤ (2/a0) γ^{d̂} on `samples` random block-index sets, with
/// γ = ((√κ − 1)/(√κ + 1))^{2/q}, κ = b0/a0 from the spectrum of A, and d̂ = min |i − j|.
pub fn verify_banded_decay(case: &BandedCase, samples: usize, seed: u64) -> Result<BandedReport> {
    validate(case)?;
    let (a0, b0) = linalg::sym_eig_range(&case.a);
    let root = (b0 / a0).sqrt();
    let gamma = ((root - 1.0) / (root + 1.0))
        .max(0.0)
        .powf(2.0 / case.q as f64);
    let inv = (&case.a + &case.d)
        .cholesky()
        .ok_or_else(|| Error::Invariant("A + D lost positive definiteness".into()))?
        .inverse();
    let (bs, nb) = (case.block_size, case.blocks);
    let mut report = BandedReport {
        checks: 0,
        violations: 0,
        a0,
        b0,
        gamma,
        max_ratio: 0.0,
        details: Vec::new(),
    };
    for s in 0..samples {
        let mut rng = trial_rng(seed, s);
        let (nr, nc) = (
            rng.random_range(1..=nb.min(3)),
            rng.random_range(1..=nb.min(3)),
        );
        let rows = sample(&mut rng, nb, nr).into_vec();
        let cols = sample(&mut rng, nb, nc).into_vec();
        let dhat = rows
            .iter()
            .flat_map(|i| cols.iter().map(move |j| i.abs_diff(*j)))
            .min()
            .unwrap_or(0);
        let sub = DMatrix::from_fn(rows.len() * bs, cols.len() * bs, |r, c| {
            inv[(rows[r / bs] * bs + r % bs, cols[c / bs] * bs + c % bs)]
        });
        let lhs = linalg::spectral_norm(&sub);
        let rhs = 2.0 / a0
            * if dhat == 0 {
                1.0
            } else {
                gamma.powi(dhat as i32)
            };
        report.checks += 1;
        report.max_ratio = report.max_ratio.max(super::ratio(lhs, rhs));
        if lhs > rhs + BANDED_SLACK {
            report.violations += 1;
            if report.details.len() < 10 {
                report
                    .details
                    .push(format!("rows {rows:?}, cols {cols:?}: {lhs:e} > {rhs:e}"));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_has_no_off_diagonal_mass() {
        let case = BandedCase {
            block_size: 2,
            blocks: 4,
            q: 2,
            a: DMatrix::identity(8, 8),
            d: DMatrix::zeros(8, 8),
        };
        let rep = verify_banded_decay(&case, 50, 1).unwrap();
        assert_eq!(rep.gamma, 0.0);
        assert!(rep.passed());
    }

    #[test]
    fn random_cases_pass() {
        for s in 0..20 {
            let mut rng = trial_rng(77, s);
            let case = random_banded_case(&mut rng, 3, 12);
            let rep = verify_banded_decay(&case, 30, s as u64).unwrap();
            assert!(rep.passed(), "{:?}", rep.details);
        }
    }

    #[test]
    fn indefinite_rejected() {
        let mut a = DMatrix::identity(2, 2);
        a[(1, 1)] = -1.0;
        let case = BandedCase {
            block_size: 1,
            blocks: 2,
            q: 2,
            a,
            d: DMatrix::zeros(2, 2),
        };
        assert!(matches!(
            verify_banded_decay(&case, 1, 0),
            Err(Error::Validation(_))
        ));
    }
}

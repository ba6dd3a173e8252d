//! Exact first and second moments of a speaker's score distribution under the
//! target (H₁) and non-target (H₂) hypotheses.
//!
//! The score is a quadratic form in the test i-vector, so its mean and variance
//! follow from the test vector's mean and covariance:
//!
//! - H₂: `t ~ N(0, R)` with `R = U + V`;
//! - H₁: `t` conditioned on the enrollment, `t ~ N(μ̂, R̂)` with
//!   `μ̂ = (VŪ + L·VQ) i`, `R̂ = R − L·(VŪ + L·VQ) V`, `Q = −(L·V + U)⁻¹ V Ū`.
//!
//! `A` has rank at most `f`, so trace terms are evaluated in the projected
//! `f`-dimensional space (`A = P D Pᵀ`, `tr(A X) = tr(D Pᵀ X P)`).

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::model::DerivedOperators;
use crate::scoring::{quadratic_form, Enrollment, QuadraticForm};

/// Mean and variance of the score under both hypotheses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreMoments {
    pub mu1: f64,
    pub var1: f64,
    pub mu2: f64,
    pub var2: f64,
}

impl ScoreMoments {
    pub fn sigma1(&self) -> f64 {
        self.var1.sqrt()
    }

    pub fn sigma2(&self) -> f64 {
        self.var2.sqrt()
    }

    /// Moments of `(s − shift) · scale`.
    pub fn affine(&self, shift: f64, scale: f64) -> Self {
        Self {
            mu1: (self.mu1 - shift) * scale,
            var1: self.var1 * scale * scale,
            mu2: (self.mu2 - shift) * scale,
            var2: self.var2 * scale * scale,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeakerScoreStats {
    pub speaker_id: String,
    pub count: usize,
    pub moments: ScoreMoments,
}

/// Distribution of a same-speaker test i-vector given the enrollment.
#[derive(Debug, Clone)]
pub struct ConditionalTestDistribution {
    pub count: usize,
    pub mu_hat: DVector<f64>,
    pub r_hat: Arc<DMatrix<f64>>,
}

/// Per-`L` conditioning operators; independent of the enrollment sum.
#[derive(Debug)]
pub(crate) struct ConditionalOperators {
    /// `VŪ + L·VQ`
    gain: DMatrix<f64>,
    r_hat: Arc<DMatrix<f64>>,
    /// `Pᵀ R̂ P`
    projected_r_hat: DMatrix<f64>,
}

/// Mean and variance of `z = qᵀ Λ q` for Gaussian `q ~ N(μ_q, Σ_q)`.
pub fn quad_moments(lambda: &DMatrix<f64>, mu_q: &DVector<f64>, sigma_q: &DMatrix<f64>) -> Result<(f64, f64)> {
    let n = mu_q.len();
    if lambda.shape() != (n, n) {
        return Err(Error::mismatch("Lambda", n, lambda.nrows()));
    }
    if sigma_q.shape() != (n, n) {
        return Err(Error::mismatch("Sigma_q", n, sigma_q.nrows()));
    }
    let ls = lambda * sigma_q;
    let lm = lambda * mu_q;
    let mean = ls.trace() + mu_q.dot(&lm);
    let variance = 2.0 * linalg::trace_of_product(&ls, &ls) + 4.0 * lm.dot(&(sigma_q * &lm));
    Ok((mean, variance))
}

fn conditional_operators(ops: &DerivedOperators, count: usize) -> Result<Arc<ConditionalOperators>> {
    if count == 0 {
        return Err(Error::InvalidConfig("enrollment size must be at least 1".into()));
    }
    ops.conditionals.get_or_try_insert(count, || {
        let l = count as f64;
        let v = ops.between();
        let v_ubar = v * ops.within_inv();
        let stacked = ops.within() + v * l;
        let chol = linalg::cholesky(&linalg::symmetrize(&stacked), "L·V + U")?;
        let q = -chol.solve(&v_ubar);
        let gain = &v_ubar + (v * q) * l;
        let total = ops.total();
        let r_hat = total - (&gain * v) * l;
        let asym = linalg::asymmetry(&r_hat);
        if asym > 1e-8 * linalg::max_abs(total).max(1.0) {
            return Err(Error::Asymmetric {
                what: "conditional covariance R̂",
                asymmetry: asym,
            });
        }
        let r_hat = linalg::symmetrize(&r_hat);
        let p = ops.projection();
        let projected_r_hat = linalg::symmetrize(&(p.transpose() * &r_hat * p));
        Ok(ConditionalOperators {
            gain,
            r_hat: Arc::new(r_hat),
            projected_r_hat,
        })
    })
}

pub fn conditional_test_distribution(
    ops: &DerivedOperators,
    enrollment: &Enrollment,
) -> Result<ConditionalTestDistribution> {
    linalg::check_len("enrollment sum", &enrollment.i_sum, ops.dim())?;
    let cond = conditional_operators(ops, enrollment.count)?;
    Ok(ConditionalTestDistribution {
        count: enrollment.count,
        mu_hat: &cond.gain * &enrollment.i_sum,
        r_hat: Arc::clone(&cond.r_hat),
    })
}

/// `(μ₂, σ₂²) = (½ tr(AR) + c, ½ tr(ARAR) + bᵀRb)`
pub fn nontarget_stats(ops: &DerivedOperators, qf: &QuadraticForm) -> (f64, f64) {
    let ds = &qf.core * &ops.projected_total;
    let mean = 0.5 * ds.trace() + qf.c;
    let variance = 0.5 * linalg::trace_of_product(&ds, &ds) + qf.b.dot(&(ops.total() * &qf.b));
    (mean, variance)
}

/// `μ₁ = ½ tr(AR̂) − μ̂ᵀAd + ½ μ̂ᵀAμ̂ + c` and
/// `σ₁² = ½ tr(AR̂AR̂) + (d − μ̂)ᵀ A R̂ A (d − μ̂)`, with `Ad = −b` substituted.
pub fn target_stats(
    ops: &DerivedOperators,
    qf: &QuadraticForm,
    cond: &ConditionalTestDistribution,
) -> Result<(f64, f64)> {
    if qf.count != cond.count {
        return Err(Error::mismatch("enrollment size", qf.count, cond.count));
    }
    let level = conditional_operators(ops, cond.count)?;
    let p = ops.projection();
    let a_mu = p * (&qf.core * (p.transpose() * &cond.mu_hat));
    let ds = &qf.core * &level.projected_r_hat;
    let mean = 0.5 * ds.trace() + cond.mu_hat.dot(&qf.b) + 0.5 * cond.mu_hat.dot(&a_mu) + qf.c;
    let shift = &qf.b + &a_mu;
    let variance = 0.5 * linalg::trace_of_product(&ds, &ds) + shift.dot(&(&*cond.r_hat * &shift));
    Ok((mean, variance))
}

pub fn speaker_stats(ops: &DerivedOperators, enrollment: &Enrollment) -> Result<SpeakerScoreStats> {
    let qf = quadratic_form(ops, enrollment)?;
    let (mu2, var2) = nontarget_stats(ops, &qf);
    let cond = conditional_test_distribution(ops, enrollment)?;
    let (mu1, var1) = target_stats(ops, &qf, &cond)?;
    let moments = ScoreMoments { mu1, var1, mu2, var2 };
    if ![mu1, var1, mu2, var2].iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite(format!("score moments of {}", enrollment.speaker_id)));
    }
    Ok(SpeakerScoreStats {
        speaker_id: enrollment.speaker_id.clone(),
        count: enrollment.count,
        moments,
    })
}

//! PLDA log-likelihood-ratio scoring for sum-based multi-utterance enrollment.
//!
//! With `i` the sum of the `L` (mean-subtracted) enrollment i-vectors and `t`
//! the test i-vector,
//!
//! ```text
//! s = ½ [ (i+t)ᵀ K_{L+1} (i+t) − iᵀ K_L i − tᵀ K_1 t ] + α(L)
//! ```
//!
//! which, as a function of `t`, is the quadratic form `½ tᵀ A t + bᵀ t + c`
//! with `A = K_{L+1} − K_1`, `b = K_{L+1} i` and
//! `c = ½ iᵀ (K_{L+1} − K_L) i + α(L)`.

use std::collections::HashMap;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::io::Trial;
use crate::linalg;
use crate::model::DerivedOperators;

/// A speaker model: the sum of its mean-subtracted enrollment i-vectors and their count.
#[derive(Debug, Clone, PartialEq)]
pub struct Enrollment {
    pub speaker_id: String,
    pub i_sum: DVector<f64>,
    pub count: usize,
}

impl Enrollment {
    pub fn new(speaker_id: impl Into<String>, i_sum: DVector<f64>, count: usize) -> Result<Self> {
        if count == 0 {
            return Err(Error::InvalidConfig("enrollment needs at least one i-vector".into()));
        }
        if !linalg::all_finite(i_sum.iter()) {
            return Err(Error::NonFinite("enrollment sum".into()));
        }
        Ok(Self {
            speaker_id: speaker_id.into(),
            i_sum,
            count,
        })
    }

    /// Sums already mean-subtracted i-vectors.
    pub fn from_vectors(speaker_id: impl Into<String>, vectors: &[DVector<f64>]) -> Result<Self> {
        let first = vectors.first().ok_or(Error::Empty("enrollment vectors"))?;
        let mut sum = DVector::zeros(first.len());
        for v in vectors {
            linalg::check_len("enrollment i-vector", v, first.len())?;
            sum += v;
        }
        Self::new(speaker_id, sum, vectors.len())
    }

    pub fn dim(&self) -> usize {
        self.i_sum.len()
    }
}

/// Direct evaluation of the LLR score for one trial. `test` must be mean-subtracted.
pub fn score_trial(ops: &DerivedOperators, enrollment: &Enrollment, test: &DVector<f64>) -> Result<f64> {
    linalg::check_len("enrollment sum", &enrollment.i_sum, ops.dim())?;
    linalg::check_len("test i-vector", test, ops.dim())?;
    let l = enrollment.count;
    let (this, alpha) = ops.operators_for(l)?;
    let next = ops.level(l + 1)?;
    let one = ops.level(1)?;
    let i = &enrollment.i_sum;
    let joint = i + test;
    let s = 0.5 * (joint.dot(&(&next.k * &joint)) - i.dot(&(&this.k * i)) - test.dot(&(&one.k * test))) + alpha;
    Ok(s)
}

/// Per-`L` pieces of the quadratic form that do not depend on the enrollment sum.
#[derive(Debug)]
pub(crate) struct FormOperators {
    /// `A = K_{L+1} − K_1`
    pub a: Arc<DMatrix<f64>>,
    /// `D = M_{L+1}⁻¹ − M_1⁻¹`, so that `A = P D Pᵀ` with `P = Ū F`.
    pub core: DMatrix<f64>,
    /// `−P (PᵀP)⁻¹ D⁻¹`; maps `h = M_{L+1}⁻¹ Pᵀ i` to the center of the form.
    /// Absent when `F` is column-rank deficient.
    pub center_map: Option<DMatrix<f64>>,
}

pub(crate) fn form_operators(ops: &DerivedOperators, count: usize) -> Result<Arc<FormOperators>> {
    ops.forms.get_or_try_insert(count, || {
        let next = ops.level(count + 1)?;
        let one = ops.level(1)?;
        let a = linalg::symmetrize(&(&next.k - &one.k));
        let core = linalg::symmetrize(&(&next.m_inv - &one.m_inv));
        let p = ops.projection();
        let center_map = if p.ncols() == 0 {
            None
        } else {
            // D is negative definite whenever Fᵀ Ū F is positive definite.
            let gram = linalg::symmetrize(&(p.transpose() * p));
            match (
                nalgebra::Cholesky::new(gram),
                nalgebra::Cholesky::new(-core.clone()),
            ) {
                (Some(gram), Some(neg_core)) => {
                    let neg_core_inv = neg_core.inverse();
                    Some(p * gram.inverse() * neg_core_inv)
                }
                _ => None,
            }
        };
        Ok(FormOperators {
            a: Arc::new(a),
            core,
            center_map,
        })
    })
}

/// The score as a quadratic function of the test i-vector.
#[derive(Debug, Clone)]
pub struct QuadraticForm {
    pub count: usize,
    pub a: Arc<DMatrix<f64>>,
    pub b: DVector<f64>,
    pub c: f64,
    /// `d` with `A d = −b`, when it exists.
    pub center: Option<DVector<f64>>,
    pub(crate) core: DMatrix<f64>,
}

impl QuadraticForm {
    /// `½ tᵀ A t + bᵀ t + c`
    pub fn evaluate(&self, t: &DVector<f64>) -> f64 {
        0.5 * t.dot(&(&*self.a * t)) + self.b.dot(t) + self.c
    }

    /// `½ (t − d)ᵀ A (t − d) + c − ½ bᵀ A⁻¹ b`, using `bᵀ A⁻¹ b = −bᵀ d`.
    pub fn evaluate_centered(&self, t: &DVector<f64>) -> Option<f64> {
        let center = self.center.as_ref()?;
        let diff = t - center;
        Some(0.5 * diff.dot(&(&*self.a * &diff)) + self.c + 0.5 * self.b.dot(center))
    }
}

pub fn quadratic_form(ops: &DerivedOperators, enrollment: &Enrollment) -> Result<QuadraticForm> {
    linalg::check_len("enrollment sum", &enrollment.i_sum, ops.dim())?;
    let l = enrollment.count;
    let form = form_operators(ops, l)?;
    let (this, alpha) = ops.operators_for(l)?;
    let next = ops.level(l + 1)?;
    let p = ops.projection();
    let projected_sum = p.transpose() * &enrollment.i_sum;
    let h = &next.m_inv * &projected_sum;
    let b = p * &h;
    let c = 0.5 * (projected_sum.dot(&h) - projected_sum.dot(&(&this.m_inv * &projected_sum))) + alpha;
    let center = form.center_map.as_ref().map(|map| map * &h);
    Ok(QuadraticForm {
        count: l,
        a: Arc::clone(&form.a),
        b,
        c,
        center,
        core: form.core.clone(),
    })
}

/// Scores many trials against shared enrollments and tests.
///
/// Works in the `f`-dimensional projected space: with `p = Pᵀ v`, every
/// `vᵀ K_L w` equals `pᵀ M_L⁻¹ q`, so a trial costs one `f`-length dot product.
#[derive(Debug)]
pub struct BatchScorer {
    models: Vec<ModelTerms>,
    projected_tests: Vec<DVector<f64>>,
    /// `½ pᵀ D_L p` per test, one row per distinct enrollment size.
    test_terms: Vec<Vec<f64>>,
}

#[derive(Debug)]
struct ModelTerms {
    weights: DVector<f64>,
    offset: f64,
    slot: usize,
}

impl BatchScorer {
    /// `tests` must be mean-subtracted.
    pub fn new(ops: &DerivedOperators, enrollments: &[Enrollment], tests: &[DVector<f64>]) -> Result<Self> {
        let p = ops.projection();
        let mut slots: Vec<usize> = enrollments.iter().map(|e| e.count).collect();
        slots.sort_unstable();
        slots.dedup();
        let slot_of: HashMap<usize, usize> = slots.iter().enumerate().map(|(k, &l)| (l, k)).collect();

        let models = enrollments
            .par_iter()
            .map(|e| {
                linalg::check_len("enrollment sum", &e.i_sum, ops.dim())?;
                let (this, alpha) = ops.operators_for(e.count)?;
                let next = ops.level(e.count + 1)?;
                let pi = p.transpose() * &e.i_sum;
                let weights = &next.m_inv * &pi;
                let offset = 0.5 * (pi.dot(&weights) - pi.dot(&(&this.m_inv * &pi))) + alpha;
                Ok(ModelTerms {
                    weights,
                    offset,
                    slot: slot_of[&e.count],
                })
            })
            .collect::<Result<Vec<_>>>()?;

        let projected_tests = tests
            .par_iter()
            .map(|t| {
                linalg::check_len("test i-vector", t, ops.dim())?;
                Ok(p.transpose() * t)
            })
            .collect::<Result<Vec<_>>>()?;

        let test_terms = slots
            .iter()
            .map(|&l| {
                let form = form_operators(ops, l)?;
                Ok(projected_tests
                    .par_iter()
                    .map(|pt| 0.5 * pt.dot(&(&form.core * pt)))
                    .collect())
            })
            .collect::<Result<Vec<_>>>()?;

        Ok(Self {
            models,
            projected_tests,
            test_terms,
        })
    }

    pub fn n_models(&self) -> usize {
        self.models.len()
    }

    pub fn n_tests(&self) -> usize {
        self.projected_tests.len()
    }

    /// Panics if either index is out of range.
    pub fn score(&self, model: usize, test: usize) -> f64 {
        let m = &self.models[model];
        m.offset + m.weights.dot(&self.projected_tests[test]) + self.test_terms[m.slot][test]
    }

    /// Scores index pairs in parallel; output order matches input order.
    pub fn score_pairs(&self, pairs: &[(usize, usize)]) -> Vec<f64> {
        pairs.par_iter().map(|&(m, t)| self.score(m, t)).collect()
    }
}

/// Scores every trial, resolving `model_id` against enrollment speaker ids and
/// `test_id` against the test ids. Tests must be mean-subtracted.
pub fn batch_score(
    ops: &DerivedOperators,
    enrollments: &[Enrollment],
    tests: &[(String, DVector<f64>)],
    trials: &[Trial],
) -> Result<Vec<f64>> {
    let model_index: HashMap<&str, usize> = enrollments
        .iter()
        .enumerate()
        .map(|(k, e)| (e.speaker_id.as_str(), k))
        .collect();
    let test_index: HashMap<&str, usize> = tests.iter().enumerate().map(|(k, (id, _))| (id.as_str(), k)).collect();
    let pairs = trials
        .iter()
        .map(|t| {
            let m = *model_index
                .get(t.model_id.as_str())
                .ok_or_else(|| Error::UnknownId(t.model_id.clone()))?;
            let s = *test_index
                .get(t.test_id.as_str())
                .ok_or_else(|| Error::UnknownId(t.test_id.clone()))?;
            Ok((m, s))
        })
        .collect::<Result<Vec<_>>>()?;
    if pairs.is_empty() {
        return Ok(Vec::new());
    }
    let vectors: Vec<DVector<f64>> = tests.iter().map(|(_, v)| v.clone()).collect();
    let scorer = BatchScorer::new(ops, enrollments, &vectors)?;
    Ok(scorer.score_pairs(&pairs))
}

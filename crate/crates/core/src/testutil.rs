//! Random models and brute-force Gaussian oracles for unit tests.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::model::PldaParameters;

pub(crate) fn random_vector(rng: &mut impl Rng, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.sample(StandardNormal))
}

pub(crate) fn random_matrix(rng: &mut impl Rng, rows: usize, cols: usize, scale: f64) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| scale * rng.sample::<f64, _>(StandardNormal))
}

pub(crate) fn random_params(rng: &mut impl Rng, d: usize, f: usize, g: usize) -> PldaParameters {
    let sigma = DVector::from_fn(d, |_, _| rng.random_range(0.2..1.5));
    PldaParameters::new(
        random_vector(rng, d) * 0.1,
        random_matrix(rng, d, f, 0.8),
        random_matrix(rng, d, g, 0.5),
        sigma,
    )
    .unwrap()
}

/// Covariance of `n` stacked i-vectors from one speaker: `U` on the diagonal blocks, `V` everywhere.
pub(crate) fn same_speaker_covariance(u: &DMatrix<f64>, v: &DMatrix<f64>, n: usize) -> DMatrix<f64> {
    let d = u.nrows();
    let mut c = DMatrix::zeros(n * d, n * d);
    for a in 0..n {
        for b in 0..n {
            let block = if a == b { u + v } else { v.clone() };
            c.view_mut((a * d, b * d), (d, d)).copy_from(&block);
        }
    }
    c
}

/// Conditions the first block of `[t, i_1, ..., i_L]` on the remaining ones.
pub(crate) fn block_condition(
    u: &DMatrix<f64>,
    v: &DMatrix<f64>,
    enrollment: &[DVector<f64>],
) -> (DVector<f64>, DMatrix<f64>) {
    let d = u.nrows();
    let n = enrollment.len() + 1;
    let c = same_speaker_covariance(u, v, n);
    let rest = (n - 1) * d;
    let c_tt = c.view((0, 0), (d, d)).into_owned();
    let c_te = c.view((0, d), (d, rest)).into_owned();
    let c_ee = c.view((d, d), (rest, rest)).into_owned();
    let mut e = DVector::zeros(rest);
    for (k, v) in enrollment.iter().enumerate() {
        e.rows_mut(k * d, d).copy_from(v);
    }
    let chol = c_ee.cholesky().unwrap();
    let mean = &c_te * chol.solve(&e);
    let cov = &c_tt - &c_te * chol.solve(&c_te.transpose());
    (mean, cov)
}

//! Dense Gaussian oracles shared by the integration tests. Nothing here calls
//! into the scoring or statistics code under test.
#![allow(dead_code)]

use blind_plda::PldaParameters;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

pub fn normal_vector(rng: &mut impl Rng, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.sample(StandardNormal))
}

pub fn normal_matrix(rng: &mut impl Rng, rows: usize, cols: usize, scale: f64) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| scale * rng.sample::<f64, _>(StandardNormal))
}

/// A random model with `d ≤ 8`, `1 ≤ f ≤ 4`, `g ≤ 3`.
pub fn small_model(rng: &mut impl Rng) -> PldaParameters {
    let d = rng.random_range(2..=8);
    let f = rng.random_range(1..=4.min(d));
    let g = rng.random_range(0..=3.min(d));
    let noise = DVector::from_fn(d, |_, _| rng.random_range(0.2..1.5));
    PldaParameters::new(
        normal_vector(rng, d) * 0.3,
        normal_matrix(rng, d, f, 0.9),
        normal_matrix(rng, d, g, 0.5),
        noise,
    )
    .unwrap()
}

/// `(U, V)` built straight from the loadings.
pub fn covariances(p: &PldaParameters) -> (DMatrix<f64>, DMatrix<f64>) {
    let g = p.channel_loading();
    let f = p.speaker_loading();
    let u = g * g.transpose() + DMatrix::from_diagonal(p.noise_variance());
    (u, f * f.transpose())
}

/// Covariance of `n` stacked same-speaker vectors.
pub fn stacked_covariance(u: &DMatrix<f64>, v: &DMatrix<f64>, n: usize) -> DMatrix<f64> {
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

pub fn stack(vectors: &[DVector<f64>]) -> DVector<f64> {
    let d = vectors[0].len();
    let mut out = DVector::zeros(d * vectors.len());
    for (k, v) in vectors.iter().enumerate() {
        out.rows_mut(k * d, d).copy_from(v);
    }
    out
}

/// Zero-mean Gaussian log-density.
pub fn log_density(x: &DVector<f64>, cov: &DMatrix<f64>) -> f64 {
    let chol = cov.clone().cholesky().expect("covariance must be positive definite");
    let log_det: f64 = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    -0.5 * (x.len() as f64 * LN_2PI + log_det + x.dot(&chol.solve(x)))
}

/// Same-speaker versus different-speaker log-likelihood ratio from explicit
/// block covariances. Inputs are mean-subtracted.
pub fn joint_llr(p: &PldaParameters, enrollment: &[DVector<f64>], test: &DVector<f64>) -> f64 {
    let (u, v) = covariances(p);
    let n = enrollment.len();
    let mut all = enrollment.to_vec();
    all.push(test.clone());
    log_density(&stack(&all), &stacked_covariance(&u, &v, n + 1))
        - log_density(&stack(enrollment), &stacked_covariance(&u, &v, n))
        - log_density(test, &(&u + &v))
}

/// Mean and covariance of a test vector given same-speaker enrollment, by
/// conditioning the stacked Gaussian.
pub fn condition_on_enrollment(p: &PldaParameters, enrollment: &[DVector<f64>]) -> (DVector<f64>, DMatrix<f64>) {
    let (u, v) = covariances(p);
    let d = u.nrows();
    let n = enrollment.len();
    let c_ee = stacked_covariance(&u, &v, n);
    let mut c_te = DMatrix::zeros(d, n * d);
    for k in 0..n {
        c_te.view_mut((0, k * d), (d, d)).copy_from(&v);
    }
    let chol = c_ee.cholesky().unwrap();
    let mean = &c_te * chol.solve(&stack(enrollment));
    let cov = &u + &v - &c_te * chol.solve(&c_te.transpose());
    (mean, cov)
}

/// Draws one vector per speaker factor from the generative model, mean included.
pub fn draw(rng: &mut impl Rng, p: &PldaParameters, x: &DVector<f64>) -> DVector<f64> {
    let y = normal_vector(rng, p.channel_dim());
    let e = normal_vector(rng, p.dim()).component_mul(&p.noise_variance().map(f64::sqrt));
    p.mean() + p.speaker_loading() * x + p.channel_loading() * y + e
}

/// `‖A − B‖_F / ‖B‖_F`
pub fn relative_frobenius(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm()
}

pub fn mean_and_variance(xs: &[f64]) -> (f64, f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let m4 = xs.iter().map(|x| (x - mean).powi(4)).sum::<f64>() / n;
    (mean, var, m4)
}

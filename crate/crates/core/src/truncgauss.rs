//! Truncated Gaussian samplers: the half-normal abundance prior, univariate
//! normals on a half-line, and multivariate normals on the positive orthant.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};

use crate::error::{CsuError, Result};

/// Default number of coordinate passes per orthant draw.
pub const DEFAULT_TMG_SWEEPS: usize = 2;

/// Standardised lower bound above which the exponential-proposal sampler is used.
const TAIL_SWITCH: f64 = 0.5;

/// Draw from `N(0, scale^2)` restricted to `(0, inf)`.
pub fn sample_halfnormal<R: Rng + ?Sized>(rng: &mut R, scale: f64) -> Result<f64> {
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(CsuError::arg(format!("half-normal scale must be positive, got {scale}")));
    }
    loop {
        let z: f64 = rng.sample(StandardNormal);
        if z != 0.0 {
            return Ok(scale * z.abs());
        }
    }
}

/// Draw from `N(mean, sd^2)` restricted to `[lower, inf)`.
pub fn sample_univariate_truncnorm<R: Rng + ?Sized>(
    rng: &mut R,
    mean: f64,
    sd: f64,
    lower: f64,
) -> Result<f64> {
    if !(sd > 0.0 && sd.is_finite() && mean.is_finite() && lower.is_finite()) {
        return Err(CsuError::arg(format!(
            "truncated normal needs finite mean/lower and sd > 0 (mean={mean}, sd={sd}, lower={lower})"
        )));
    }
    let alpha = (lower - mean) / sd;
    let (z, _) = standard_tail(rng, alpha);
    let x = mean + sd * z;
    Ok(if x > lower { x } else { lower.next_up() })
}

/// Standard normal restricted to `[alpha, inf)`; also returns the number of
/// proposals used.
pub(crate) fn standard_tail<R: Rng + ?Sized>(rng: &mut R, alpha: f64) -> (f64, usize) {
    let mut tries = 0;
    if alpha <= TAIL_SWITCH {
        loop {
            tries += 1;
            let z: f64 = rng.sample(StandardNormal);
            if z >= alpha {
                return (z, tries);
            }
        }
    }
    // Exponential proposal with the rate that maximises acceptance.
    let rate = 0.5 * (alpha + (alpha * alpha + 4.0).sqrt());
    loop {
        tries += 1;
        let e: f64 = Exp1.sample(rng);
        let z = alpha + e / rate;
        let u: f64 = rng.random();
        if u <= (-0.5 * (z - rate) * (z - rate)).exp() {
            return (z, tries);
        }
    }
}

/// Multivariate normal `N(mean, covariance)` restricted to the positive orthant.
///
/// Stored through its precision matrix, which gives the coordinate
/// conditionals directly.
#[derive(Debug, Clone)]
pub struct OrthantGaussian {
    mean: DVector<f64>,
    precision: DMatrix<f64>,
}

impl OrthantGaussian {
    pub fn new(mean: DVector<f64>, covariance: DMatrix<f64>) -> Result<Self> {
        let k = mean.len();
        if covariance.nrows() != k || covariance.ncols() != k || k == 0 {
            return Err(CsuError::arg("mean and covariance dimensions differ"));
        }
        if mean.iter().chain(covariance.iter()).any(|v| !v.is_finite()) {
            return Err(CsuError::arg("non-finite mean or covariance"));
        }
        let scale = covariance.amax().max(f64::MIN_POSITIVE);
        for i in 0..k {
            for j in i + 1..k {
                if (covariance[(i, j)] - covariance[(j, i)]).abs() > 1e-10 * scale {
                    return Err(CsuError::arg("covariance is not symmetric"));
                }
            }
        }
        let chol = covariance
            .cholesky()
            .ok_or_else(|| CsuError::numeric("covariance is not positive-definite"))?;
        Ok(Self { mean, precision: chol.inverse() })
    }

    /// From precision `Q` and linear term `h`, so that the mean is `Q^{-1} h`.
    pub fn from_precision(precision: DMatrix<f64>, h: &DVector<f64>) -> Result<Self> {
        let k = h.len();
        if precision.nrows() != k || precision.ncols() != k || k == 0 {
            return Err(CsuError::arg("precision and linear term dimensions differ"));
        }
        let chol = precision
            .clone()
            .cholesky()
            .ok_or_else(|| CsuError::numeric("precision is not positive-definite"))?;
        let mean = chol.solve(h);
        if mean.iter().any(|v| !v.is_finite()) {
            return Err(CsuError::numeric("non-finite mean"));
        }
        Ok(Self { mean, precision })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn precision(&self) -> &DMatrix<f64> {
        &self.precision
    }

    pub fn covariance(&self) -> Result<DMatrix<f64>> {
        self.precision
            .clone()
            .cholesky()
            .map(|c| c.inverse())
            .ok_or_else(|| CsuError::numeric("precision is not positive-definite"))
    }
}

/// Coordinate-wise Gibbs move targeting `g` on the positive orthant.
///
/// Each of the `sweeps` passes redraws every coordinate from its exact
/// univariate conditional. The kernel leaves the truncated target invariant.
pub fn sample_orthant_gaussian<R: Rng + ?Sized>(
    rng: &mut R,
    g: &OrthantGaussian,
    current: &[f64],
    sweeps: usize,
) -> Result<Vec<f64>> {
    let k = g.dim();
    if current.len() != k {
        return Err(CsuError::arg("current state has the wrong dimension"));
    }
    if current.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
        return Err(CsuError::arg("current state must be strictly positive"));
    }
    let q = &g.precision;
    let mu = &g.mean;
    let mut x = current.to_vec();
    for _ in 0..sweeps {
        for j in 0..k {
            let qjj = q[(j, j)];
            let mut shift = 0.0;
            for i in 0..k {
                if i != j {
                    shift += q[(j, i)] * (x[i] - mu[i]);
                }
            }
            let m = mu[j] - shift / qjj;
            x[j] = sample_univariate_truncnorm(rng, m, qjj.sqrt().recip(), 0.0)?;
        }
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use std::f64::consts::PI;

    fn moments(v: &[f64]) -> (f64, f64) {
        let n = v.len() as f64;
        let m = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
        (m, var)
    }

    #[test]
    fn halfnormal_moments() {
        let mut rng = seeded(1);
        let d: Vec<f64> = (0..1_000_000).map(|_| sample_halfnormal(&mut rng, 1.0).unwrap()).collect();
        let (m, v) = moments(&d);
        assert!((m - (2.0 / PI).sqrt()).abs() < 0.003, "{m}");
        assert!((v - (1.0 - 2.0 / PI)).abs() < 0.003, "{v}");
        let d: Vec<f64> = (0..1_000_000).map(|_| sample_halfnormal(&mut rng, 0.3).unwrap()).collect();
        let (m, _) = moments(&d);
        assert!((m - 0.3 * (2.0 / PI).sqrt()).abs() < 0.001, "{m}");
        assert!(d.iter().all(|&x| x > 0.0));
    }

    #[test]
    fn halfnormal_rejects_bad_scale() {
        let mut rng = seeded(1);
        assert!(sample_halfnormal(&mut rng, 0.0).is_err());
        assert!(sample_halfnormal(&mut rng, -1.0).is_err());
    }

    #[test]
    fn truncnorm_far_below_is_untruncated() {
        let mut rng = seeded(2);
        let d: Vec<f64> =
            (0..400_000).map(|_| sample_univariate_truncnorm(&mut rng, 0.0, 1.0, -37.0).unwrap()).collect();
        let (m, v) = moments(&d);
        assert!(m.abs() < 0.005, "{m}");
        assert!((v - 1.0).abs() < 0.01, "{v}");
    }

    #[test]
    fn truncnorm_tail_mean() {
        // E[Z | Z >= 5] = phi(5) / (1 - Phi(5))
        let phi5 = (-12.5f64).exp() / (2.0 * PI).sqrt();
        let tail = 2.866_515_718_791_939e-7;
        let expected = phi5 / tail;
        assert!((expected - 5.187).abs() < 0.001);
        let mut rng = seeded(3);
        let d: Vec<f64> =
            (0..200_000).map(|_| sample_univariate_truncnorm(&mut rng, 0.0, 1.0, 5.0).unwrap()).collect();
        let (m, _) = moments(&d);
        assert!((m - expected).abs() < 0.01, "{m}");
        assert!(d.iter().all(|&x| x >= 5.0));
    }

    #[test]
    fn truncnorm_inactive_bound() {
        let mut rng = seeded(4);
        let x = sample_univariate_truncnorm(&mut rng, 3.0, 1e-6, 0.0).unwrap();
        assert!((x - 3.0).abs() < 1e-4);
    }

    #[test]
    fn tail_sampler_iteration_bound() {
        let mut rng = seeded(5);
        for a in 0..=400 {
            let alpha = -5.0 + 45.0 * a as f64 / 400.0;
            for _ in 0..200 {
                let (z, tries) = standard_tail(&mut rng, alpha);
                assert!(z >= alpha);
                assert!(tries <= 10_000, "alpha={alpha} tries={tries}");
            }
        }
    }

    #[test]
    fn orthant_diagonal_is_product_of_halflines() {
        let mut rng = seeded(6);
        let mean = DVector::from_vec(vec![0.0, 0.5]);
        let cov = DMatrix::from_diagonal(&DVector::from_vec(vec![0.25, 1.0]));
        let g = OrthantGaussian::new(mean, cov).unwrap();
        let mut x = vec![0.1, 0.1];
        let mut s0 = Vec::new();
        let mut s1 = Vec::new();
        for _ in 0..200_000 {
            x = sample_orthant_gaussian(&mut rng, &g, &x, 1).unwrap();
            s0.push(x[0]);
            s1.push(x[1]);
        }
        let (m0, _) = moments(&s0);
        assert!((m0 - 0.5 * (2.0 / PI).sqrt()).abs() < 0.01 * 0.4, "{m0}");
        // N(0.5, 1) on (0, inf): mean = 0.5 + phi(0.5)/Phi(0.5)
        let phi = (-0.125f64).exp() / (2.0 * PI).sqrt();
        let cdf = 0.691_462_461_274_013;
        let (m1, _) = moments(&s1);
        assert!((m1 - (0.5 + phi / cdf)).abs() < 0.01 * 1.01, "{m1}");
    }

    #[test]
    fn orthant_one_dimensional_is_halfnormal() {
        let mut rng = seeded(7);
        let g = OrthantGaussian::new(DVector::from_vec(vec![0.0]), DMatrix::from_element(1, 1, 0.09)).unwrap();
        let mut x = vec![1.0];
        let mut s = Vec::new();
        for _ in 0..300_000 {
            x = sample_orthant_gaussian(&mut rng, &g, &x, 1).unwrap();
            s.push(x[0]);
        }
        let (m, v) = moments(&s);
        assert!((m - 0.3 * (2.0 / PI).sqrt()).abs() < 0.002, "{m}");
        assert!((v - 0.09 * (1.0 - 2.0 / PI)).abs() < 0.002, "{v}");
    }

    #[test]
    fn orthant_rejects_non_pd_and_bad_state() {
        let mean = DVector::from_vec(vec![0.0, 0.0]);
        let cov = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(OrthantGaussian::new(mean.clone(), cov), Err(CsuError::Numeric(_))));
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.4, 1.0]);
        assert!(OrthantGaussian::new(mean.clone(), asym).is_err());
        let g = OrthantGaussian::new(mean, DMatrix::identity(2, 2)).unwrap();
        let mut rng = seeded(1);
        assert!(sample_orthant_gaussian(&mut rng, &g, &[0.0, 1.0], 1).is_err());
        assert!(sample_orthant_gaussian(&mut rng, &g, &[1.0], 1).is_err());
    }

    #[test]
    fn from_precision_matches_covariance_form() {
        let q = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let h = DVector::from_vec(vec![1.0, -0.5]);
        let g = OrthantGaussian::from_precision(q.clone(), &h).unwrap();
        let expected = q.clone().try_inverse().unwrap() * &h;
        assert!((g.mean() - expected).norm() < 1e-12);
        let cov = g.covariance().unwrap();
        assert!((cov * q - DMatrix::identity(2, 2)).norm() < 1e-12);
    }
}

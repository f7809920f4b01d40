//! Closed-form conditional draws used by the Gibbs sampler.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Gamma};

use crate::error::{CsuError, Result};
use crate::truncgauss::OrthantGaussian;

/// Draw from the inverse gamma `IG(shape, scale)` (density ∝ x^{-shape-1} e^{-scale/x}).
pub fn sample_inverse_gamma<R: Rng + ?Sized>(rng: &mut R, shape: f64, scale: f64) -> Result<f64> {
    if !(shape > 0.0 && scale > 0.0 && shape.is_finite() && scale.is_finite()) {
        return Err(CsuError::numeric(format!(
            "inverse gamma needs positive shape and scale (shape={shape}, scale={scale})"
        )));
    }
    let g = Gamma::new(shape, 1.0).map_err(|e| CsuError::numeric(e.to_string()))?;
    loop {
        let v: f64 = g.sample(rng);
        if v > 0.0 {
            let x = scale / v;
            if x.is_finite() {
                return Ok(x);
            }
        }
    }
}

/// Prior on each noise variance.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum NoisePrior {
    /// `f(sigma2) ∝ 1/sigma2`.
    #[default]
    Jeffreys,
    /// Conjugate `IG(shape, scale)`.
    InverseGamma { shape: f64, scale: f64 },
}

impl NoisePrior {
    /// Posterior `(shape, scale)` for one band given `N` pixels and the
    /// squared residual norm of that band.
    pub fn posterior(&self, n_pixels: usize, residual_sq: f64) -> (f64, f64) {
        let (a0, b0) = match *self {
            NoisePrior::Jeffreys => (0.0, 0.0),
            NoisePrior::InverseGamma { shape, scale } => (shape, scale),
        };
        (n_pixels as f64 / 2.0 + a0, residual_sq / 2.0 + b0)
    }
}

/// Noise variance for one band: `IG(N/2, ||res_l||^2 / 2)` under the Jeffreys prior.
pub fn draw_noise_variance<R: Rng + ?Sized>(
    rng: &mut R,
    n_pixels: usize,
    residual_sq: f64,
    prior: NoisePrior,
) -> Result<f64> {
    let (shape, scale) = prior.posterior(n_pixels, residual_sq);
    if !(scale > 0.0) {
        return Err(CsuError::numeric(
            "zero residual in a band: the noise variance posterior is degenerate",
        ));
    }
    sample_inverse_gamma(rng, shape, scale)
}

/// Abundance scale for one endmember: `IG(N/2 + gamma, sum_n x^2 / 2 + nu)`.
pub fn draw_scale<R: Rng + ?Sized>(
    rng: &mut R,
    n_pixels: usize,
    sum_sq: f64,
    gamma: f64,
    nu: f64,
) -> Result<f64> {
    sample_inverse_gamma(rng, n_pixels as f64 / 2.0 + gamma, sum_sq / 2.0 + nu)
}

/// Conditional of `x_n` given the labels, built from the weighted Gram matrix
/// `G = M'WM` (row-major), the projection `b = M'W y_n` and the scales:
///
/// precision `D G D + S^{-1}`, mean `(D G D + S^{-1})^{-1} D b`, with
/// `D = diag(z_n)` and `S = diag(s2)`.
pub fn abundance_conditional(gram: &[f64], proj: &[f64], mask: u64, s2: &[f64]) -> Result<OrthantGaussian> {
    let r = s2.len();
    if gram.len() != r * r || proj.len() != r {
        return Err(CsuError::arg("abundance conditional dimension mismatch"));
    }
    let active = |k: usize| mask >> k & 1 == 1;
    let precision = DMatrix::from_fn(r, r, |i, j| {
        let data = if active(i) && active(j) { gram[i * r + j] } else { 0.0 };
        if i == j {
            data + 1.0 / s2[i]
        } else {
            data
        }
    });
    let h = DVector::from_fn(r, |i, _| if active(i) { proj[i] } else { 0.0 });
    OrthantGaussian::from_precision(precision, &h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn mc_mean(f: impl FnMut() -> f64, n: usize) -> f64 {
        let mut f = f;
        (0..n).map(|_| f()).sum::<f64>() / n as f64
    }

    #[test]
    fn ig_two_one_mean() {
        // N = 4, ||res||^2 = 2 -> IG(2, 1), mean 1
        let mut rng = seeded(1);
        let m = mc_mean(|| draw_noise_variance(&mut rng, 4, 2.0, NoisePrior::Jeffreys).unwrap(), 1_000_000);
        assert!((m - 1.0).abs() < 0.005, "{m}");
    }

    #[test]
    fn scale_posterior_mean() {
        let mut rng = seeded(2);
        let m = mc_mean(|| draw_scale(&mut rng, 4, 0.0, 2.1, 1.1).unwrap(), 1_000_000);
        let expected = 1.1 / 3.1;
        assert!((m - expected).abs() < 0.005 * expected, "{m}");
    }

    #[test]
    fn scale_concentrates_for_large_sums() {
        let mut rng = seeded(3);
        let n = 10_000;
        let sum_sq = 0.09 * n as f64;
        for _ in 0..100 {
            let s = draw_scale(&mut rng, n, sum_sq, 2.1, 1.1).unwrap();
            assert!((s - 0.09).abs() < 0.01, "{s}");
        }
    }

    #[test]
    fn residual_scaling_scales_draws() {
        // same stream, scale c^2 → draws scaled by c^2 exactly
        let a = draw_noise_variance(&mut seeded(4), 10, 3.0, NoisePrior::Jeffreys).unwrap();
        let b = draw_noise_variance(&mut seeded(4), 10, 3.0 * 9.0, NoisePrior::Jeffreys).unwrap();
        assert!((b - 9.0 * a).abs() < 1e-12 * b);
    }

    #[test]
    fn zero_residual_is_an_error() {
        let err = draw_noise_variance(&mut seeded(1), 4, 0.0, NoisePrior::Jeffreys);
        assert!(matches!(err, Err(CsuError::Numeric(_))));
        let ok = draw_noise_variance(&mut seeded(1), 4, 0.0, NoisePrior::InverseGamma { shape: 1.0, scale: 1.0 });
        assert!(ok.is_ok());
    }

    #[test]
    fn single_active_conditional_by_hand() {
        // L = 2, unit noise weights folded into the Gram matrix
        let m = [[0.6, 0.2], [0.3, 0.9]]; // rows = bands, cols = endmembers
        let w = [1.0 / 0.1, 1.0 / 0.2];
        let y = [0.5, 0.4];
        let mut gram = [0.0; 4];
        let mut proj = [0.0; 2];
        for i in 0..2 {
            for j in 0..2 {
                gram[i * 2 + j] = (0..2).map(|l| m[l][i] * m[l][j] * w[l]).sum();
            }
            proj[i] = (0..2).map(|l| m[l][i] * y[l] * w[l]).sum();
        }
        let s2 = [0.5, 0.25];
        let g = abundance_conditional(&gram, &proj, 0b01, &s2).unwrap();
        let prec = 0.6 * 0.6 * 10.0 + 0.3 * 0.3 * 5.0 + 1.0 / 0.5;
        let mean = (0.6 * 0.5 * 10.0 + 0.3 * 0.4 * 5.0) / prec;
        let cov = g.covariance().unwrap();
        assert!((cov[(0, 0)] - 1.0 / prec).abs() < 1e-12);
        assert!((g.mean()[0] - mean).abs() < 1e-12);
        // inactive coordinate reverts to its prior
        assert!((cov[(1, 1)] - 0.25).abs() < 1e-12);
        assert!(cov[(0, 1)].abs() < 1e-15);
        assert_eq!(g.mean()[1], 0.0);
    }
}

//! Truncated multivariate Ising field over the label matrix.
//!
//! The prior is `f(Z|beta) ∝ psi(Z) exp(sum_r beta_r phi_r(Z))`, where `phi_r`
//! counts ordered neighbour pairs with equal labels in row `r` and `psi`
//! forbids empty pixels. The normalising constant is never needed: it cancels
//! from every conditional used here.
//!
//! Per-pixel conditionals enumerate the `2^R - 1` admissible label vectors.
//! Configurations are encoded as bit masks (bit `r` = endmember `r`), and the
//! returned weight vectors are indexed by `mask - 1`.

use rand::Rng;
use rayon::prelude::*;

use crate::error::{CsuError, Result};
use crate::rng::{substream, CsuRng, Phase};
use crate::types::{full_mask, BinaryMap, GridGeometry, Library, NoiseModel, SupportField};

/// Largest library for which per-pixel enumeration is allowed.
pub const R_ENUM_MAX: usize = 16;

/// Values of `phi_r(Z)` for every row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IsingEnergy {
    pub phi: Vec<u64>,
}

/// `phi_r(Z)`: ordered neighbour pairs with equal labels in row `r`.
pub fn phi(z: &BinaryMap, r: usize, geom: GridGeometry) -> Result<u64> {
    check_grid(z, geom)?;
    if r >= z.n_endmembers() {
        return Err(CsuError::arg(format!("row {r} out of range")));
    }
    Ok(phi_masks(z.masks(), 1 << r, geom))
}

/// `phi_r` for every row at once.
pub fn energy(z: &BinaryMap, geom: GridGeometry) -> Result<IsingEnergy> {
    check_grid(z, geom)?;
    let phi = (0..z.n_endmembers()).map(|r| phi_masks(z.masks(), 1 << r, geom)).collect();
    Ok(IsingEnergy { phi })
}

pub(crate) fn phi_masks(masks: &[u64], bit: u64, geom: GridGeometry) -> u64 {
    let mut count = 0u64;
    for (n, &m) in masks.iter().enumerate() {
        let own = m & bit;
        geom.for_each_neighbor(n, |k| {
            if masks[k] & bit == own {
                count += 1;
            }
        });
    }
    count
}

/// `psi(Z)`: true iff no pixel is empty.
pub fn psi(z: &BinaryMap) -> bool {
    !z.has_empty_pixel()
}

fn check_grid(z: &BinaryMap, geom: GridGeometry) -> Result<()> {
    if z.n_pixels() != geom.n_pixels() {
        return Err(CsuError::arg(format!(
            "label map has {} pixels, grid has {}",
            z.n_pixels(),
            geom.n_pixels()
        )));
    }
    Ok(())
}

fn check_enumerable(r: usize) -> Result<()> {
    if r == 0 {
        return Err(CsuError::arg("need at least one endmember"));
    }
    if r > R_ENUM_MAX {
        return Err(CsuError::Capability(format!(
            "per-pixel label enumeration supports at most {R_ENUM_MAX} endmembers, got {r}"
        )));
    }
    Ok(())
}

/// Gaussian likelihood of one pixel in the quadratic form
/// `-1/2 (y'Wy - 2 a'b + a'Ga)` with `W = diag(1/sigma2)`, `G = M'WM`, `b = M'Wy`.
#[derive(Debug, Clone)]
pub struct PixelLikelihood<'a> {
    /// `M'WM`, row-major `R x R`.
    pub gram: &'a [f64],
    /// `M'W y_n`.
    pub proj: &'a [f64],
    /// `y_n' W y_n`.
    pub yy: f64,
    /// Current abundance values `x_n`.
    pub x: &'a [f64],
}

/// Weighted Gram matrix `M' diag(1/sigma2) M`, row-major.
pub fn weighted_gram(lib: &Library, inv_var: &[f64]) -> Vec<f64> {
    let m = lib.data();
    let r = m.ncols();
    let mut g = vec![0.0; r * r];
    for i in 0..r {
        let ci = m.column(i);
        for j in i..r {
            let cj = m.column(j);
            let v: f64 = ci.iter().zip(cj.iter()).zip(inv_var).map(|((a, b), w)| a * b * w).sum();
            g[i * r + j] = v;
            g[j * r + i] = v;
        }
    }
    g
}

/// `(M' W y, y' W y)` for one pixel.
pub fn weighted_projection(lib: &Library, inv_var: &[f64], y: &[f64]) -> (Vec<f64>, f64) {
    let m = lib.data();
    let proj = (0..m.ncols())
        .map(|r| m.column(r).iter().zip(y).zip(inv_var).map(|((a, b), w)| a * b * w).sum())
        .collect();
    let yy = y.iter().zip(inv_var).map(|(v, w)| v * v * w).sum();
    (proj, yy)
}

/// Neighbour statistics for one pixel: per-row count of active neighbours.
#[inline]
fn neighbour_counts(masks: &[u64], n: usize, geom: GridGeometry, r: usize, counts: &mut [u32]) -> u32 {
    counts[..r].fill(0);
    let mut v = 0u32;
    geom.for_each_neighbor(n, |k| {
        v += 1;
        let mut m = masks[k];
        while m != 0 {
            let b = m.trailing_zeros() as usize;
            counts[b] += 1;
            m &= m - 1;
        }
    });
    v
}

/// Fills `out` (length `2^R - 1`, indexed by `mask - 1`) with the log-weights
/// of every admissible label vector at pixel `n`. With `lik = None` only the
/// prior interaction term is used.
pub(crate) fn pixel_logweights(
    n: usize,
    masks: &[u64],
    geom: GridGeometry,
    beta: &[f64],
    lik: Option<&PixelLikelihood<'_>>,
    out: &mut Vec<f64>,
) {
    let r = beta.len();
    let total = (1usize << r) - 1;
    out.clear();
    out.resize(total, 0.0);

    let mut counts = [0u32; R_ENUM_MAX];
    let v = neighbour_counts(masks, n, geom, r, &mut counts);

    // Prior: 2 sum_r beta_r #{n' in V(n): z_{r,n'} = c_r}.
    // Gray-code walk keeps every quantity incremental in O(R) per step.
    let mut prior: f64 = (0..r).map(|k| 2.0 * beta[k] * f64::from(v - counts[k])).sum();
    let flip_gain: Vec<f64> =
        (0..r).map(|k| 2.0 * beta[k] * (f64::from(counts[k]) - f64::from(v - counts[k]))).collect();

    let mut lin = 0.0;
    let mut quad = 0.0;
    let mut ga = [0.0f64; R_ENUM_MAX];
    let mut gray = 0usize;
    for i in 1..=total {
        let k = i.trailing_zeros() as usize;
        let on = gray >> k & 1 == 0;
        gray ^= 1 << k;
        if on {
            prior += flip_gain[k];
        } else {
            prior -= flip_gain[k];
        }
        let mut ll = 0.0;
        if let Some(p) = lik {
            let xk = p.x[k];
            let row = &p.gram[k * r..(k + 1) * r];
            if on {
                quad += 2.0 * xk * ga[k] + row[k] * xk * xk;
                for (g, gk) in ga[..r].iter_mut().zip(row) {
                    *g += gk * xk;
                }
                lin += xk * p.proj[k];
            } else {
                for (g, gk) in ga[..r].iter_mut().zip(row) {
                    *g -= gk * xk;
                }
                quad -= 2.0 * xk * ga[k] + row[k] * xk * xk;
                lin -= xk * p.proj[k];
            }
            ll = -0.5 * (p.yy - 2.0 * lin + quad);
        }
        out[gray - 1] = prior + ll;
    }
}

/// Log-weights of the `2^R - 1` admissible label vectors of pixel `n` given
/// the rest of the field, the pixel's abundance values and the noise model.
///
/// Index `c - 1` holds the weight of label mask `c`; the empty vector has
/// probability zero and is not listed.
pub fn conditional_label_logweights(
    n: usize,
    z_rest: &BinaryMap,
    geom: GridGeometry,
    x_n: &[f64],
    y_n: &[f64],
    lib: &Library,
    noise: &NoiseModel,
    beta: &[f64],
) -> Result<Vec<f64>> {
    let r = lib.endmember_count();
    check_enumerable(r)?;
    check_grid(z_rest, geom)?;
    if n >= geom.n_pixels() {
        return Err(CsuError::arg(format!("pixel {n} out of range")));
    }
    if z_rest.n_endmembers() != r || x_n.len() != r || beta.len() != r {
        return Err(CsuError::arg("endmember count mismatch"));
    }
    if y_n.len() != lib.band_count() || noise.variances().len() != lib.band_count() {
        return Err(CsuError::arg("band count mismatch"));
    }
    if x_n.iter().chain(y_n).chain(beta).any(|v| !v.is_finite()) {
        return Err(CsuError::arg("non-finite input to label conditional"));
    }
    let inv_var: Vec<f64> = noise.variances().iter().map(|s| 1.0 / s).collect();
    let gram = weighted_gram(lib, &inv_var);
    let (proj, yy) = weighted_projection(lib, &inv_var, y_n);
    let lik = PixelLikelihood { gram: &gram, proj: &proj, yy, x: x_n };
    let mut out = Vec::new();
    pixel_logweights(n, z_rest.masks(), geom, beta, Some(&lik), &mut out);
    Ok(out)
}

/// Draws a label mask with probability `softmax(logweights)[mask - 1]`.
pub fn sample_pixel_label<R: Rng + ?Sized>(rng: &mut R, logweights: &[f64]) -> Result<u64> {
    let max = logweights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(CsuError::numeric("label log-weights are all -inf or not finite"));
    }
    let total: f64 = logweights.iter().map(|w| (w - max).exp()).sum();
    let u = rng.random::<f64>() * total;
    let mut acc = 0.0;
    let mut last = 0;
    for (i, w) in logweights.iter().enumerate() {
        let p = (w - max).exp();
        if p > 0.0 {
            last = i;
        }
        acc += p;
        if u < acc {
            return Ok(i as u64 + 1);
        }
    }
    // u landed on the rounding gap at the top of the cumulative sum
    Ok(last as u64 + 1)
}

/// Order in which pixels are visited during a Gibbs sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SweepSchedule {
    /// Pixel 0, 1, ..., N-1 with a single random stream.
    #[default]
    Raster,
    /// Four colour classes of a 2x2 block colouring, each class updated in
    /// parallel with one random stream per pixel.
    Chromatic,
}

/// Random source for a sweep.
pub(crate) enum SweepRng<'a> {
    Raster(&'a mut CsuRng),
    Chromatic { seed: u64, phase: Phase, iteration: u64 },
}

/// One Gibbs sweep over the label field, each pixel drawn from the
/// conditional given by `weights(n, masks, out)`.
pub(crate) fn gibbs_sweep<F>(
    masks: &mut [u64],
    geom: GridGeometry,
    rng: SweepRng<'_>,
    weights: F,
) -> Result<()>
where
    F: Fn(usize, &[u64], &mut Vec<f64>) + Sync,
{
    match rng {
        SweepRng::Raster(rng) => {
            let mut buf = Vec::new();
            for n in 0..masks.len() {
                weights(n, masks, &mut buf);
                masks[n] = sample_pixel_label(rng, &buf)?;
            }
        }
        SweepRng::Chromatic { seed, phase, iteration } => {
            for color in 0..4 {
                let pixels: Vec<usize> =
                    (0..masks.len()).filter(|&n| geom.color(n) == color).collect();
                let snapshot: &[u64] = masks;
                let updates: Result<Vec<u64>> = pixels
                    .par_iter()
                    .map_init(Vec::new, |buf, &n| {
                        weights(n, snapshot, buf);
                        let mut prng = substream(seed, phase, iteration, n as u64);
                        sample_pixel_label(&mut prng, buf)
                    })
                    .collect();
                for (n, m) in pixels.into_iter().zip(updates?) {
                    masks[n] = m;
                }
            }
        }
    }
    Ok(())
}

/// One prior-only sweep (likelihood removed, `psi` enforced).
pub(crate) fn prior_sweep(
    masks: &mut [u64],
    geom: GridGeometry,
    beta: &[f64],
    rng: SweepRng<'_>,
) -> Result<()> {
    gibbs_sweep(masks, geom, rng, |n, m, out| pixel_logweights(n, m, geom, beta, None, out))
}

/// Independent uniform draw over admissible label vectors at every pixel
/// (the exact prior at `beta = 0`).
pub fn uniform_admissible_field<R: Rng + ?Sized>(
    rng: &mut R,
    n_endmembers: usize,
    n_pixels: usize,
) -> Result<SupportField> {
    check_enumerable(n_endmembers)?;
    let top = full_mask(n_endmembers);
    let masks = (0..n_pixels).map(|_| rng.random_range(1..=top)).collect();
    SupportField::from_masks(n_endmembers, masks)
}

/// Simulates the truncated Ising prior: a uniform admissible start followed
/// by `sweeps` raster Gibbs sweeps.
pub fn sample_prior_field(
    rng: &mut CsuRng,
    beta: &[f64],
    geom: GridGeometry,
    sweeps: usize,
) -> Result<SupportField> {
    sample_prior_field_with(rng, beta, geom, sweeps, SweepSchedule::Raster)
}

/// [`sample_prior_field`] with an explicit sweep schedule. The chromatic
/// schedule derives per-pixel streams from a seed drawn from `rng`.
pub fn sample_prior_field_with(
    rng: &mut CsuRng,
    beta: &[f64],
    geom: GridGeometry,
    sweeps: usize,
    schedule: SweepSchedule,
) -> Result<SupportField> {
    if sweeps == 0 {
        return Err(CsuError::arg("prior simulation needs at least one sweep"));
    }
    if beta.iter().any(|b| !b.is_finite()) {
        return Err(CsuError::arg("non-finite beta"));
    }
    let field = uniform_admissible_field(rng, beta.len(), geom.n_pixels())?;
    let mut masks = field.masks().to_vec();
    let chroma_seed: u64 = rng.random();
    for s in 0..sweeps {
        let src = match schedule {
            SweepSchedule::Raster => SweepRng::Raster(rng),
            SweepSchedule::Chromatic => {
                SweepRng::Chromatic { seed: chroma_seed, phase: Phase::Prior, iteration: s as u64 }
            }
        };
        prior_sweep(&mut masks, geom, beta, src)?;
    }
    SupportField::from_masks(beta.len(), masks)
}

/// Persistent prior chain, advanced one sweep at a time.
#[derive(Debug, Clone)]
pub struct PriorChain {
    masks: Vec<u64>,
    n_endmembers: usize,
    geom: GridGeometry,
}

impl PriorChain {
    pub fn new(start: &SupportField, geom: GridGeometry) -> Result<Self> {
        check_grid(start, geom)?;
        check_enumerable(start.n_endmembers())?;
        Ok(Self { masks: start.masks().to_vec(), n_endmembers: start.n_endmembers(), geom })
    }

    pub fn sweep(&mut self, rng: &mut CsuRng, beta: &[f64]) -> Result<()> {
        if beta.len() != self.n_endmembers {
            return Err(CsuError::arg("beta length mismatch"));
        }
        prior_sweep(&mut self.masks, self.geom, beta, SweepRng::Raster(rng))
    }

    pub fn masks(&self) -> &[u64] {
        &self.masks
    }

    pub fn phi(&self) -> Vec<u64> {
        (0..self.n_endmembers).map(|r| phi_masks(&self.masks, 1 << r, self.geom)).collect()
    }

    pub fn field(&self) -> SupportField {
        SupportField::from_masks(self.n_endmembers, self.masks.clone())
            .expect("prior chain never produces empty pixels")
    }
}

//! Synthetic scenes: prior-sampled supports, half-normal abundances and
//! Gaussian noise, plus libraries with controlled mutual coherence.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{CsuError, Result};
use crate::mrf::{sample_prior_field_with, SweepSchedule};
use crate::rng::{substream, CsuRng, Phase};
use crate::truncgauss::sample_halfnormal;
use crate::types::{compose_abundances, mutual_coherence, AbundanceField, GridGeometry, HyperCube, Library, SupportField};

/// Prior sweeps run before the label field is taken. Supercritical couplings
/// coarsen slowly; fewer sweeps leave a field with too few equal-label pairs.
pub const DEFAULT_PRIOR_SWEEPS: usize = 1000;

/// Scene parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub geom: GridGeometry,
    pub lib: Library,
    pub beta: Vec<f64>,
    /// Half-normal scale `s_r` of each endmember's abundance values.
    pub s: Vec<f64>,
    /// Noise variance per band.
    pub sigma2: Vec<f64>,
    pub prior_sweeps: usize,
    pub seed: u64,
}

impl SceneSpec {
    /// Spec with a common scale and a common noise variance.
    pub fn uniform(geom: GridGeometry, lib: Library, beta: Vec<f64>, s: f64, sigma2: f64, seed: u64) -> Self {
        let (r, l) = (lib.endmember_count(), lib.band_count());
        Self { geom, lib, beta, s: vec![s; r], sigma2: vec![sigma2; l], prior_sweeps: DEFAULT_PRIOR_SWEEPS, seed }
    }

    pub fn validate(&self) -> Result<()> {
        let r = self.lib.endmember_count();
        if self.beta.len() != r || self.s.len() != r {
            return Err(CsuError::arg("beta and s need one value per endmember"));
        }
        if self.sigma2.len() != self.lib.band_count() {
            return Err(CsuError::arg("sigma2 needs one value per band"));
        }
        if self.s.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(CsuError::arg("abundance scales must be positive"));
        }
        if self.sigma2.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(CsuError::arg("noise variances must be non-negative"));
        }
        if self.beta.iter().any(|b| !(*b >= 0.0 && b.is_finite())) {
            return Err(CsuError::arg("beta must be non-negative"));
        }
        if self.prior_sweeps == 0 {
            return Err(CsuError::arg("prior_sweeps must be at least 1"));
        }
        Ok(())
    }
}

/// A generated scene and its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub cube: HyperCube,
    pub z_true: SupportField,
    pub x_true: AbundanceField,
    /// `Z ⊙ X`.
    pub a_true: AbundanceField,
}

/// Draws a scene. A zero noise variance gives `Y = M A` exactly.
pub fn generate_scene(spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    let (r, n, l) = (spec.lib.endmember_count(), spec.geom.n_pixels(), spec.lib.band_count());
    let mut zrng = substream(spec.seed, Phase::Scene, 0, 0);
    let z = sample_prior_field_with(&mut zrng, &spec.beta, spec.geom, spec.prior_sweeps, SweepSchedule::Raster)?;

    let mut xrng = substream(spec.seed, Phase::Scene, 1, 0);
    let mut x = DMatrix::zeros(r, n);
    for p in 0..n {
        for k in 0..r {
            x[(k, p)] = sample_halfnormal(&mut xrng, spec.s[k])?;
        }
    }
    let x = AbundanceField::new(x)?;
    let a = compose_abundances(&z, &x)?;

    let mut nrng = substream(spec.seed, Phase::Scene, 2, 0);
    let mut y = spec.lib.data() * a.values();
    let sd: Vec<f64> = spec.sigma2.iter().map(|v| v.sqrt()).collect();
    for p in 0..n {
        for b in 0..l {
            let e: f64 = nrng.sample(StandardNormal);
            y[(b, p)] += sd[b] * e;
        }
    }
    Ok(Scene { cube: HyperCube::new(y, spec.geom)?, z_true: z, x_true: x, a_true: a })
}

/// Mean signal power per band, `mean_n ||M a_n||^2 / L`.
pub fn signal_power(lib: &Library, a_true: &AbundanceField) -> Result<f64> {
    if lib.endmember_count() != a_true.n_endmembers() {
        return Err(CsuError::arg("library and abundances disagree on R"));
    }
    let s = lib.data() * a_true.values();
    Ok(s.norm_squared() / (s.ncols() * s.nrows()) as f64)
}

/// Average SNR in dB: `10 log10(mean_n ||M a_n||^2 / (L mean_l sigma2_l))`.
///
/// With `sigma2 = None` the noise power is measured from `Y - M A`.
pub fn measure_snr(cube: &HyperCube, lib: &Library, a_true: &AbundanceField, sigma2: Option<&[f64]>) -> Result<f64> {
    if cube.band_count() != lib.band_count() || cube.n_pixels() != a_true.n_pixels() {
        return Err(CsuError::arg("cube, library and abundances disagree in shape"));
    }
    let signal = signal_power(lib, a_true)?;
    let noise = match sigma2 {
        Some(v) => {
            if v.len() != cube.band_count() {
                return Err(CsuError::arg("sigma2 needs one value per band"));
            }
            v.iter().sum::<f64>() / v.len() as f64
        }
        None => {
            let resid = cube.data() - lib.data() * a_true.values();
            resid.norm_squared() / (resid.nrows() * resid.ncols()) as f64
        }
    };
    if !(signal > 0.0) {
        return Err(CsuError::numeric("zero signal power"));
    }
    if !(noise > 0.0) {
        return Err(CsuError::numeric("zero noise power: SNR is infinite"));
    }
    Ok(10.0 * (signal / noise).log10())
}

/// Noise variance giving the requested SNR for a given signal power.
pub fn sigma2_for_snr(signal_power: f64, snr_db: f64) -> f64 {
    signal_power / 10f64.powf(snr_db / 10.0)
}

const COHERENCE_TOL: f64 = 0.005;
const MAX_ATTEMPTS: usize = 10_000;

/// Smooth strictly positive spectrum built from a few Gaussian bumps over a
/// floor, peak-normalised to 1.
fn smooth_spectrum(rng: &mut CsuRng, l: usize, floor: f64, bumps: usize, width: f64) -> Vec<f64> {
    let mut v = vec![floor; l];
    for _ in 0..bumps {
        let c: f64 = rng.random::<f64>() * l as f64;
        let w = width * rng.random_range(0.6..1.4);
        let h: f64 = rng.random_range(0.3..1.0);
        for (i, e) in v.iter_mut().enumerate() {
            *e += h * (-0.5 * ((i as f64 - c) / w).powi(2)).exp();
        }
    }
    let top = v.iter().cloned().fold(0.0, f64::max);
    v.iter_mut().for_each(|e| *e /= top);
    v
}

/// Nearly orthogonal base: endmember `r` has one bump centred in its own
/// slice of the band range.
fn spread_base(rng: &mut CsuRng, l: usize, r: usize, sharpness: f64) -> DMatrix<f64> {
    let slice = l as f64 / r as f64;
    let width = (slice / (4.0 * sharpness)).max(0.25);
    let floor = 1e-3 / sharpness;
    let mut m = DMatrix::zeros(l, r);
    for k in 0..r {
        let c = (k as f64 + 0.5) * slice - 0.5 + rng.random_range(-0.15..0.15) * slice;
        for i in 0..l {
            m[(i, k)] = floor + (-0.5 * ((i as f64 - c) / width).powi(2)).exp();
        }
    }
    m
}

fn blend(base: &DMatrix<f64>, common: &[f64], t: f64) -> DMatrix<f64> {
    let mut m = DMatrix::from_fn(base.nrows(), base.ncols(), |i, k| (1.0 - t) * base[(i, k)] + t * common[i]);
    for mut col in m.column_iter_mut() {
        let top = col.max();
        col /= top;
    }
    m
}

/// Random library whose mutual coherence is within 0.005 of `target`.
///
/// Columns are blends `(1 - t) b_r + t c` of nearly orthogonal bumps `b_r`
/// and one shared smooth spectrum `c`, peak-normalised to 1; `t` is found by
/// bisection.
pub fn make_correlated_library(rng: &mut CsuRng, l: usize, r: usize, target: f64) -> Result<Library> {
    if !(0.0..1.0).contains(&target) {
        return Err(CsuError::arg(format!("target coherence must lie in [0, 1), got {target}")));
    }
    if l < r || r < 2 {
        return Err(CsuError::arg("need at least two endmembers and no more endmembers than bands"));
    }
    let coh = |m: &DMatrix<f64>| mutual_coherence(&Library::unnamed(m.clone()).expect("blend is positive"));
    for attempt in 0..MAX_ATTEMPTS {
        let sharpness = 1.0 + attempt as f64 / 10.0;
        let base = spread_base(rng, l, r, sharpness);
        let common = smooth_spectrum(rng, l, 0.8, 3, l as f64 / 3.0);
        let lo_c = coh(&blend(&base, &common, 0.0))?;
        if lo_c > target + COHERENCE_TOL {
            continue;
        }
        let (mut lo, mut hi) = (0.0, 1.0);
        let mut m = blend(&base, &common, 0.0);
        let mut c = lo_c;
        for _ in 0..200 {
            if (c - target).abs() <= 1e-4 {
                break;
            }
            let mid = 0.5 * (lo + hi);
            m = blend(&base, &common, mid);
            c = coh(&m)?;
            if c < target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        if (c - target).abs() <= COHERENCE_TOL && m.iter().all(|v| *v > 0.0) {
            let names = (0..r).map(|k| format!("em{k}")).collect();
            return Library::new(m, names);
        }
    }
    Err(CsuError::Capability(format!(
        "no {l}x{r} library with coherence {target} found in {MAX_ATTEMPTS} attempts"
    )))
}

//! Gibbs sampler for collaborative sparse unmixing.
//!
//! One iteration updates, in order: the label field (pixel-wise sweep), the
//! abundance values (pixel-wise orthant-truncated Gaussians), the noise
//! variances, the abundance scales, and finally the Ising couplings when they
//! are self-tuned. Couplings are tuned by stochastic-gradient ascent on the
//! marginal likelihood of the labels, using a persistent auxiliary chain that
//! targets the prior, and are frozen once burn-in ends.

pub mod conditionals;
pub mod trace;

use std::time::{Duration, Instant};

use nalgebra::DMatrix;
use rayon::prelude::*;

pub use conditionals::{
    abundance_conditional, draw_noise_variance, draw_scale, sample_inverse_gamma, NoisePrior,
};
pub use trace::ChainTrace;

use crate::baselines::{Ncls, DEFAULT_RHO};
use crate::error::{CsuError, Result};
use crate::mrf::{self, gibbs_sweep, pixel_logweights, PixelLikelihood, PriorChain, SweepRng, SweepSchedule};
use crate::rng::{substream, Phase};
use crate::truncgauss::{sample_orthant_gaussian, DEFAULT_TMG_SWEEPS};
use crate::types::{
    AbundanceField, BinaryMap, GridGeometry, HyperCube, Library, SupportField, BETA_MAX,
};

/// Lower clamp for initial abundance values.
const INIT_X_FLOOR: f64 = 1e-3;
/// Lower clamp for initial noise variances.
const INIT_SIGMA2_FLOOR: f64 = 1e-12;

/// How the Ising couplings are handled.
#[derive(Debug, Clone, PartialEq)]
pub enum BetaMode {
    Fixed(Vec<f64>),
    /// Stochastic-approximation tuning with step `step0 * t^-decay`.
    SelfTuned { initial: f64, step0: f64, decay: f64 },
}

impl BetaMode {
    pub fn self_tuned() -> Self {
        BetaMode::SelfTuned { initial: 0.3, step0: 1.0, decay: 0.8 }
    }

    pub fn is_self_tuned(&self) -> bool {
        matches!(self, BetaMode::SelfTuned { .. })
    }
}

/// Sampler configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub n_mc: usize,
    pub n_bi: usize,
    pub gamma: f64,
    pub nu: f64,
    pub beta_mode: BetaMode,
    pub seed: u64,
    /// Keep every `thin`-th post-burn-in abundance matrix.
    pub thin: usize,
    /// Coordinate passes per orthant-Gaussian draw.
    pub tmg_sweeps: usize,
    pub schedule: SweepSchedule,
    pub noise_prior: NoisePrior,
    /// Hold the noise variances at these values instead of sampling them.
    pub fixed_noise: Option<Vec<f64>>,
    /// Hold the abundance scales at these values instead of sampling them.
    pub fixed_scales: Option<Vec<f64>>,
    /// Support threshold applied to the NNLS warm start.
    pub init_threshold: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            n_mc: 3000,
            n_bi: 1000,
            gamma: 2.1,
            nu: 1.1,
            beta_mode: BetaMode::self_tuned(),
            seed: 0,
            thin: 1,
            tmg_sweeps: DEFAULT_TMG_SWEEPS,
            schedule: SweepSchedule::Raster,
            noise_prior: NoisePrior::Jeffreys,
            fixed_noise: None,
            fixed_scales: None,
            init_threshold: DEFAULT_RHO,
        }
    }
}

impl RunConfig {
    pub fn validate(&self, n_endmembers: usize, n_bands: usize) -> Result<()> {
        if self.n_bi >= self.n_mc {
            return Err(CsuError::arg(format!(
                "need n_mc > n_bi, got n_mc={} n_bi={}",
                self.n_mc, self.n_bi
            )));
        }
        if self.thin == 0 || self.tmg_sweeps == 0 {
            return Err(CsuError::arg("thin and tmg_sweeps must be at least 1"));
        }
        if !(self.gamma > 0.0 && self.nu > 0.0) {
            return Err(CsuError::arg("gamma and nu must be positive"));
        }
        if self.fixed_scales.is_none() && self.gamma <= 1.0 {
            return Err(CsuError::arg("gamma must exceed 1 to initialise s2 at its prior mean"));
        }
        if n_endmembers > mrf::R_ENUM_MAX {
            return Err(CsuError::Capability(format!(
                "the sampler supports at most {} endmembers, got {n_endmembers}",
                mrf::R_ENUM_MAX
            )));
        }
        match &self.beta_mode {
            BetaMode::Fixed(b) => {
                if b.len() != n_endmembers {
                    return Err(CsuError::arg("fixed beta needs one value per endmember"));
                }
                if b.iter().any(|v| !(0.0..=BETA_MAX).contains(v)) {
                    return Err(CsuError::arg(format!("beta must lie in [0, {BETA_MAX}]")));
                }
            }
            BetaMode::SelfTuned { initial, step0, decay } => {
                if !(0.0..=BETA_MAX).contains(initial) || *step0 < 0.0 || *decay < 0.0 {
                    return Err(CsuError::arg("invalid beta tuning parameters"));
                }
            }
        }
        if let NoisePrior::InverseGamma { shape, scale } = self.noise_prior {
            if !(shape > 0.0 && scale > 0.0) {
                return Err(CsuError::arg("noise prior needs positive shape and scale"));
            }
        }
        if let Some(v) = &self.fixed_noise {
            if v.len() != n_bands || v.iter().any(|s| !(*s > 0.0)) {
                return Err(CsuError::arg("fixed noise needs one positive variance per band"));
            }
        }
        if let Some(v) = &self.fixed_scales {
            if v.len() != n_endmembers || v.iter().any(|s| !(*s > 0.0)) {
                return Err(CsuError::arg("fixed scales need one positive value per endmember"));
            }
        }
        if !(self.init_threshold > 0.0) {
            return Err(CsuError::arg("init threshold must be positive"));
        }
        Ok(())
    }
}

/// Full state of the chain after an iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainState {
    pub z: SupportField,
    pub x: AbundanceField,
    pub sigma2: Vec<f64>,
    pub s2: Vec<f64>,
    pub beta: Vec<f64>,
    pub iteration: usize,
}

/// Sampler phases reported through progress callbacks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepPhase {
    Labels,
    Abundances,
    Noise,
    Scales,
    Beta,
}

impl StepPhase {
    pub fn name(self) -> &'static str {
        match self {
            StepPhase::Labels => "labels",
            StepPhase::Abundances => "abundances",
            StepPhase::Noise => "noise",
            StepPhase::Scales => "scales",
            StepPhase::Beta => "beta",
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Progress {
    pub iteration: usize,
    pub phase: StepPhase,
    pub elapsed: Duration,
}

/// Warm start from per-pixel NNLS.
///
/// Labels are the NNLS support thresholded at `cfg.init_threshold`, with empty
/// pixels given their largest-abundance endmember. Values are the NNLS
/// abundances clamped below at `1e-3`, noise variances the per-band mean
/// squared NNLS residual, scales the prior mean `nu / (gamma - 1)`.
pub fn init_state(cube: &HyperCube, lib: &Library, cfg: &RunConfig) -> Result<ChainState> {
    check_inputs(cube, lib)?;
    let r = lib.endmember_count();
    cfg.validate(r, cube.band_count())?;
    let n = cube.n_pixels();
    let solver = Ncls::new(lib);
    let sols: Result<Vec<_>> = (0..n).into_par_iter().map(|p| solver.solve(cube.pixel(p)).map(|s| s.a)).collect();
    let sols = sols?;

    let m = lib.data();
    let mut masks = Vec::with_capacity(n);
    let mut x = DMatrix::zeros(r, n);
    let mut resid_sq = vec![0.0; cube.band_count()];
    for (p, a) in sols.iter().enumerate() {
        let mut mask = 0u64;
        for (k, &v) in a.iter().enumerate() {
            if v > cfg.init_threshold {
                mask |= 1 << k;
            }
            x[(k, p)] = v.max(INIT_X_FLOOR);
        }
        if mask == 0 {
            mask = 1 << strongest_endmember(a, cube.pixel(p), lib);
        }
        masks.push(mask);
        let y = cube.pixel(p);
        for (l, rs) in resid_sq.iter_mut().enumerate() {
            let pred: f64 = (0..r).map(|k| m[(l, k)] * a[k]).sum();
            *rs += (y[l] - pred).powi(2);
        }
    }
    let sigma2 = match &cfg.fixed_noise {
        Some(v) => v.clone(),
        None => resid_sq.iter().map(|s| (s / n as f64).max(INIT_SIGMA2_FLOOR)).collect(),
    };
    let s2 = match &cfg.fixed_scales {
        Some(v) => v.clone(),
        None => vec![cfg.nu / (cfg.gamma - 1.0); r],
    };
    let beta = match &cfg.beta_mode {
        BetaMode::Fixed(b) => b.clone(),
        BetaMode::SelfTuned { initial, .. } => vec![*initial; r],
    };
    Ok(ChainState {
        z: SupportField::from_masks(r, masks)?,
        x: AbundanceField::new(x)?,
        sigma2,
        s2,
        beta,
        iteration: 0,
    })
}

fn strongest_endmember(a: &[f64], y: &[f64], lib: &Library) -> usize {
    let best = a.iter().enumerate().max_by(|p, q| p.1.total_cmp(q.1)).map(|(k, _)| k).unwrap_or(0);
    if a[best] > 0.0 {
        return best;
    }
    // all-zero NNLS fit: fall back to the best-correlated signature
    let m = lib.data();
    (0..a.len())
        .map(|k| {
            let col = m.column(k);
            (k, col.iter().zip(y).map(|(u, v)| u * v).sum::<f64>() / col.norm())
        })
        .max_by(|p, q| p.1.total_cmp(&q.1))
        .map(|(k, _)| k)
        .unwrap_or(0)
}

fn check_inputs(cube: &HyperCube, lib: &Library) -> Result<()> {
    if cube.band_count() != lib.band_count() {
        return Err(CsuError::arg(format!(
            "cube has {} bands, library has {}",
            cube.band_count(),
            lib.band_count()
        )));
    }
    Ok(())
}

/// The Gibbs sampler with its mutable state.
#[derive(Debug, Clone)]
pub struct CsuSampler {
    cube: HyperCube,
    lib: Library,
    cfg: RunConfig,
    geom: GridGeometry,
    masks: Vec<u64>,
    x: DMatrix<f64>,
    sigma2: Vec<f64>,
    s2: Vec<f64>,
    beta: Vec<f64>,
    iteration: usize,
    aux: Option<PriorChain>,
    pair_count: f64,
    // Likelihood caches for the current sigma2.
    cache_valid: bool,
    gram: Vec<f64>,
    proj: DMatrix<f64>,
    yy: Vec<f64>,
}

impl CsuSampler {
    /// Sampler started from [`init_state`].
    pub fn new(cube: &HyperCube, lib: &Library, cfg: &RunConfig) -> Result<Self> {
        let state = init_state(cube, lib, cfg)?;
        Self::from_state(cube, lib, cfg, state)
    }

    /// Sampler started from an explicit state.
    pub fn from_state(cube: &HyperCube, lib: &Library, cfg: &RunConfig, state: ChainState) -> Result<Self> {
        check_inputs(cube, lib)?;
        let r = lib.endmember_count();
        cfg.validate(r, cube.band_count())?;
        let n = cube.n_pixels();
        if state.z.n_endmembers() != r
            || state.z.n_pixels() != n
            || state.x.n_endmembers() != r
            || state.x.n_pixels() != n
            || state.sigma2.len() != cube.band_count()
            || state.s2.len() != r
            || state.beta.len() != r
        {
            return Err(CsuError::arg("chain state does not match cube and library"));
        }
        if state.x.values().iter().any(|v| !(*v > 0.0)) {
            return Err(CsuError::arg("abundance values must be strictly positive"));
        }
        let geom = cube.geometry();
        let aux = if cfg.beta_mode.is_self_tuned() { Some(PriorChain::new(&state.z, geom)?) } else { None };
        Ok(Self {
            cube: cube.clone(),
            lib: lib.clone(),
            cfg: cfg.clone(),
            geom,
            masks: state.z.masks().to_vec(),
            x: state.x.into_values(),
            sigma2: state.sigma2,
            s2: state.s2,
            beta: state.beta,
            iteration: state.iteration,
            aux,
            pair_count: geom.ordered_pair_count() as f64,
            cache_valid: false,
            gram: Vec::new(),
            proj: DMatrix::zeros(r, n),
            yy: vec![0.0; n],
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn state(&self) -> ChainState {
        let r = self.lib.endmember_count();
        ChainState {
            z: SupportField::from_masks(r, self.masks.clone()).expect("labels never leave the admissible set"),
            x: AbundanceField::new(self.x.clone()).expect("abundance draws are positive"),
            sigma2: self.sigma2.clone(),
            s2: self.s2.clone(),
            beta: self.beta.clone(),
            iteration: self.iteration,
        }
    }

    pub fn masks(&self) -> &[u64] {
        &self.masks
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn sigma2(&self) -> &[f64] {
        &self.sigma2
    }

    pub fn s2(&self) -> &[f64] {
        &self.s2
    }

    pub fn beta(&self) -> &[f64] {
        &self.beta
    }

    /// Replaces the observed image, keeping the chain state.
    pub fn replace_observations(&mut self, data: DMatrix<f64>) -> Result<()> {
        self.cube = HyperCube::new(data, self.geom)?;
        self.cache_valid = false;
        Ok(())
    }

    fn refresh_cache(&mut self) {
        if self.cache_valid {
            return;
        }
        let inv_var: Vec<f64> = self.sigma2.iter().map(|s| 1.0 / s).collect();
        self.gram = mrf::weighted_gram(&self.lib, &inv_var);
        let m = self.lib.data();
        let weighted = DMatrix::from_fn(m.nrows(), m.ncols(), |l, k| m[(l, k)] * inv_var[l]);
        let y = self.cube.data();
        self.proj = weighted.tr_mul(y);
        self.yy = (0..y.ncols())
            .map(|n| y.column(n).iter().zip(&inv_var).map(|(v, w)| v * v * w).sum())
            .collect();
        self.cache_valid = true;
    }

    /// One sweep over the label field at iteration `t`.
    pub fn step_labels(&mut self, t: usize) -> Result<()> {
        self.refresh_cache();
        let r = self.lib.endmember_count();
        let geom = self.geom;
        let (gram, yy, beta, cfg) = (&self.gram, &self.yy, &self.beta, &self.cfg);
        let (masks, proj, x) = (&mut self.masks, &self.proj, &self.x);
        let xs = x.as_slice();
        let ps = proj.as_slice();
        let weights = |n: usize, m: &[u64], out: &mut Vec<f64>| {
            let lik = PixelLikelihood {
                gram,
                proj: &ps[n * r..(n + 1) * r],
                yy: yy[n],
                x: &xs[n * r..(n + 1) * r],
            };
            pixel_logweights(n, m, geom, beta, Some(&lik), out);
        };
        match cfg.schedule {
            SweepSchedule::Raster => {
                let mut rng = substream(cfg.seed, Phase::Labels, t as u64, 0);
                gibbs_sweep(masks, geom, SweepRng::Raster(&mut rng), weights)
            }
            SweepSchedule::Chromatic => gibbs_sweep(
                masks,
                geom,
                SweepRng::Chromatic { seed: cfg.seed, phase: Phase::Labels, iteration: t as u64 },
                weights,
            ),
        }
    }

    /// Redraws every pixel's abundance vector from its orthant-truncated Gaussian.
    pub fn step_abundances(&mut self, t: usize) -> Result<()> {
        self.refresh_cache();
        let r = self.lib.endmember_count();
        let n = self.cube.n_pixels();
        let seed = self.cfg.seed;
        let sweeps = self.cfg.tmg_sweeps;
        let (gram, s2, masks, x, ps) = (&self.gram, &self.s2, &self.masks, &self.x, self.proj.as_slice());
        let xs = x.as_slice();
        let draws: Result<Vec<Vec<f64>>> = (0..n)
            .into_par_iter()
            .map(|p| {
                let g = abundance_conditional(gram, &ps[p * r..(p + 1) * r], masks[p], s2)
                    .map_err(|e| CsuError::numeric(format!("pixel {p}: {e}")))?;
                let mut rng = substream(seed, Phase::Abundances, t as u64, p as u64);
                sample_orthant_gaussian(&mut rng, &g, &xs[p * r..(p + 1) * r], sweeps)
                    .map_err(|e| CsuError::numeric(format!("pixel {p}: {e}")))
            })
            .collect();
        for (p, v) in draws?.into_iter().enumerate() {
            self.x.column_mut(p).copy_from_slice(&v);
        }
        Ok(())
    }

    /// Squared norm of every band's residual `Y - M(Z ⊙ X)`.
    pub fn residual_band_energy(&self) -> Vec<f64> {
        let r = self.lib.endmember_count();
        let a = DMatrix::from_fn(r, self.cube.n_pixels(), |k, p| {
            if self.masks[p] >> k & 1 == 1 {
                self.x[(k, p)]
            } else {
                0.0
            }
        });
        let resid = self.cube.data() - self.lib.data() * a;
        resid.row_iter().map(|row| row.norm_squared()).collect()
    }

    /// Redraws the per-band noise variances.
    pub fn step_noise(&mut self, t: usize) -> Result<()> {
        if self.cfg.fixed_noise.is_some() {
            return Ok(());
        }
        let energy = self.residual_band_energy();
        let n = self.cube.n_pixels();
        let mut next = Vec::with_capacity(energy.len());
        for (l, e) in energy.iter().enumerate() {
            let mut rng = substream(self.cfg.seed, Phase::Noise, t as u64, l as u64);
            next.push(
                draw_noise_variance(&mut rng, n, *e, self.cfg.noise_prior)
                    .map_err(|err| CsuError::numeric(format!("band {l}: {err}")))?,
            );
        }
        self.sigma2 = next;
        self.cache_valid = false;
        Ok(())
    }

    /// Redraws the per-endmember abundance scales.
    pub fn step_scales(&mut self, t: usize) -> Result<()> {
        if self.cfg.fixed_scales.is_some() {
            return Ok(());
        }
        let n = self.cube.n_pixels();
        for k in 0..self.s2.len() {
            let sum_sq: f64 = self.x.row(k).iter().map(|v| v * v).sum();
            let mut rng = substream(self.cfg.seed, Phase::Scales, t as u64, k as u64);
            self.s2[k] = draw_scale(&mut rng, n, sum_sq, self.cfg.gamma, self.cfg.nu)?;
        }
        Ok(())
    }

    /// Stochastic-gradient update of the couplings (burn-in only).
    pub fn step_beta(&mut self, t: usize) -> Result<()> {
        let BetaMode::SelfTuned { step0, decay, .. } = self.cfg.beta_mode else {
            return Ok(());
        };
        if t > self.cfg.n_bi || self.pair_count == 0.0 {
            return Ok(());
        }
        let aux = self.aux.as_mut().expect("self-tuned mode keeps an auxiliary chain");
        let mut rng = substream(self.cfg.seed, Phase::Beta, t as u64, 0);
        aux.sweep(&mut rng, &self.beta)?;
        let aux_phi = aux.phi();
        let step = step0 * (t as f64).powf(-decay);
        for (k, b) in self.beta.iter_mut().enumerate() {
            let data_phi = mrf::phi_masks(&self.masks, 1 << k, self.geom) as f64;
            let grad = (data_phi - aux_phi[k] as f64) / self.pair_count;
            *b = (*b + step * grad).clamp(0.0, BETA_MAX);
        }
        Ok(())
    }

    /// Runs one full iteration.
    pub fn iterate(&mut self) -> Result<()> {
        self.iterate_with(&mut |_| {}, Instant::now())
    }

    fn iterate_with(&mut self, progress: &mut dyn FnMut(&Progress), start: Instant) -> Result<()> {
        let t = self.iteration + 1;
        let at = |e: CsuError| CsuError::AtIteration { iteration: t, source: Box::new(e) };
        let mut report = |phase| progress(&Progress { iteration: t, phase, elapsed: start.elapsed() });
        self.step_labels(t).map_err(at)?;
        report(StepPhase::Labels);
        self.step_abundances(t).map_err(at)?;
        report(StepPhase::Abundances);
        self.step_noise(t).map_err(at)?;
        report(StepPhase::Noise);
        self.step_scales(t).map_err(at)?;
        report(StepPhase::Scales);
        self.step_beta(t).map_err(at)?;
        report(StepPhase::Beta);
        self.iteration = t;
        debug_assert!(!self.masks.contains(&0), "empty pixel after iteration {t}");
        debug_assert!(self.x.iter().all(|v| *v > 0.0));
        debug_assert!(self.sigma2.iter().chain(&self.s2).all(|v| *v > 0.0));
        Ok(())
    }

    fn record(&self, trace: &mut ChainTrace) -> Result<()> {
        let r = self.lib.endmember_count();
        let z = BinaryMap::from_masks(r, self.masks.clone())?;
        // the trace only clones X for iterations it keeps
        let x = AbundanceField::new(self.x.clone())?;
        trace.push(&z, &x, &self.sigma2, &self.s2, &self.beta)
    }
}

/// Runs the full chain and records every iteration.
pub fn run_chain(cube: &HyperCube, lib: &Library, cfg: &RunConfig) -> Result<ChainTrace> {
    run_chain_with_progress(cube, lib, cfg, |_| {})
}

/// [`run_chain`] with a callback after each phase of each iteration.
pub fn run_chain_with_progress(
    cube: &HyperCube,
    lib: &Library,
    cfg: &RunConfig,
    mut progress: impl FnMut(&Progress),
) -> Result<ChainTrace> {
    let mut sampler = CsuSampler::new(cube, lib, cfg)?;
    let mut trace = ChainTrace::new(cfg.n_mc, cfg.n_bi, lib.endmember_count(), cube.geometry(), cfg.thin)?;
    let start = Instant::now();
    for _ in 0..cfg.n_mc {
        sampler.iterate_with(&mut progress, start)?;
        sampler.record(&mut trace)?;
    }
    Ok(trace)
}

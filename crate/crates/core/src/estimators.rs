//! Point estimates from a recorded chain.

use nalgebra::DMatrix;

use crate::error::{CsuError, Result};
use crate::sampler::ChainTrace;
use crate::types::{AbundanceField, BinaryMap, SupportField};

/// Summary of a chain.
#[derive(Debug, Clone, PartialEq)]
pub struct UnmixResult {
    /// Marginal-MAP labels.
    pub z_mmap: SupportField,
    /// Conditional-mean abundances, exactly zero where `z_mmap` is zero.
    pub a_mmse: AbundanceField,
    /// Post-burn-in frequency of each label, `R x N`.
    pub presence_prob: DMatrix<f64>,
    /// Active endmembers per pixel under `z_mmap`.
    pub active_count: Vec<usize>,
    pub beta_hat: Vec<f64>,
    pub sigma2_hat: Vec<f64>,
    pub s2_hat: Vec<f64>,
    /// Entries whose conditional average had no matching sample.
    pub fallback_count: usize,
}

/// Per-entry majority vote over post-burn-in labels; a tie counts as present.
///
/// A pixel whose vote is empty keeps its most frequent label, so the result
/// is always admissible.
pub fn mmap_support(trace: &ChainTrace) -> Result<(SupportField, DMatrix<f64>)> {
    let window = trace.post_burn_in();
    if window.is_empty() {
        return Err(CsuError::arg("trace has no post-burn-in samples"));
    }
    let (r, n) = (trace.n_endmembers(), trace.n_pixels());
    let mut counts = DMatrix::<f64>::zeros(r, n);
    for i in window.clone() {
        for p in 0..n {
            for k in 0..r {
                if trace.z(i, k, p) {
                    counts[(k, p)] += 1.0;
                }
            }
        }
    }
    let prob = counts / window.len() as f64;
    let mut map = BinaryMap::from_fn(r, n, |k, p| prob[(k, p)] >= 0.5)?;
    for p in 0..n {
        if map.pixel_mask(p) == 0 {
            let col = prob.column(p);
            let best = (0..r).max_by(|&a, &b| col[a].total_cmp(&col[b]).then(b.cmp(&a))).unwrap_or(0);
            map.set(best, p, true);
        }
    }
    Ok((SupportField::new(map)?, prob))
}

/// Conditional posterior mean of the abundances given `z_mmap`.
///
/// Entry `(r, n)` averages the stored `x_{r,n}` over iterations whose label
/// equals the MMAP label. Entries with MMAP label 0 are exactly 0. An active
/// entry with no matching stored iteration falls back to the unconditional
/// mean; the number of such entries is returned alongside.
pub fn mmse_abundances(trace: &ChainTrace, z_mmap: &BinaryMap) -> Result<(AbundanceField, usize)> {
    let (r, n) = (trace.n_endmembers(), trace.n_pixels());
    if z_mmap.n_endmembers() != r || z_mmap.n_pixels() != n {
        return Err(CsuError::arg("MMAP map shape does not match the trace"));
    }
    let samples = trace.x_samples();
    if samples.is_empty() {
        return Err(CsuError::arg("trace holds no abundance samples"));
    }
    let mut sum = DMatrix::<f64>::zeros(r, n);
    let mut hits = DMatrix::<f64>::zeros(r, n);
    let mut total = DMatrix::<f64>::zeros(r, n);
    for (i, x) in samples {
        for p in 0..n {
            for k in 0..r {
                if !z_mmap.get(k, p) {
                    continue;
                }
                total[(k, p)] += x[(k, p)];
                if trace.z(*i, k, p) {
                    sum[(k, p)] += x[(k, p)];
                    hits[(k, p)] += 1.0;
                }
            }
        }
    }
    let mut fallback = 0;
    let out = DMatrix::from_fn(r, n, |k, p| {
        if !z_mmap.get(k, p) {
            0.0
        } else if hits[(k, p)] > 0.0 {
            sum[(k, p)] / hits[(k, p)]
        } else {
            fallback += 1;
            total[(k, p)] / samples.len() as f64
        }
    });
    Ok((AbundanceField::new(out)?, fallback))
}

fn post_mean(rows: &[Vec<f64>], window: std::ops::Range<usize>) -> Vec<f64> {
    let len = window.len() as f64;
    let dim = rows.first().map_or(0, Vec::len);
    let mut m = vec![0.0; dim];
    for row in &rows[window] {
        for (acc, v) in m.iter_mut().zip(row) {
            *acc += v;
        }
    }
    m.iter_mut().for_each(|v| *v /= len);
    m
}

/// All point estimates of a finished chain.
pub fn summarize(trace: &ChainTrace) -> Result<UnmixResult> {
    let (z_mmap, presence_prob) = mmap_support(trace)?;
    let (a_mmse, fallback_count) = mmse_abundances(trace, &z_mmap)?;
    let window = trace.post_burn_in();
    let active_count = (0..trace.n_pixels()).map(|p| z_mmap.active_count(p)).collect();
    let beta_hat = trace.beta().last().cloned().unwrap_or_default();
    Ok(UnmixResult {
        sigma2_hat: post_mean(trace.sigma2(), window.clone()),
        s2_hat: post_mean(trace.s2(), window),
        z_mmap,
        a_mmse,
        presence_prob,
        active_count,
        beta_hat,
        fallback_count,
    })
}

//! Comparison solvers: non-negative least squares (active set), the oracle
//! variant restricted to a known support, and l1-penalised non-negative
//! regression solved by ADMM.
//!
//! All solvers work in the `R`-dimensional normal-equation space
//! (`G = M'M`, `c = M'y`), which keeps the per-pixel cost independent of `L`
//! once the Gram matrix is formed.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{CsuError, Result};
use crate::types::{AbundanceField, BinaryMap, HyperCube, Library};

/// Detection threshold used in all comparisons.
pub const DEFAULT_RHO: f64 = 0.01;

/// Default ADMM penalty.
pub const DEFAULT_MU: f64 = 1.0;

/// Half-decade grid of l1 weights, `1e-4 ..= 1`.
pub fn lambda_grid() -> Vec<f64> {
    (0..=8).map(|k| 10f64.powf(-4.0 + 0.5 * k as f64)).collect()
}

/// Per-cube baseline output.
#[derive(Debug, Clone)]
pub struct BaselineResult {
    pub abundances: AbundanceField,
    /// Total solver iterations over all pixels.
    pub iterations: usize,
    /// Sum over pixels of the final objective value.
    pub objective: f64,
    /// Pixels whose solver hit its iteration cap.
    pub unconverged: usize,
}

impl BaselineResult {
    pub fn support_at(&self, rho: f64) -> Result<BinaryMap> {
        threshold_support(&self.abundances, rho)
    }
}

/// Single-pixel solver output.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelSolution {
    pub a: Vec<f64>,
    pub iterations: usize,
    pub objective: f64,
    pub converged: bool,
}

/// Reusable NNLS solver bound to one library.
#[derive(Debug, Clone)]
pub struct Ncls {
    lib: DMatrix<f64>,
    gram: DMatrix<f64>,
}

impl Ncls {
    pub fn new(lib: &Library) -> Self {
        let m = lib.data().clone();
        let gram = m.transpose() * &m;
        Self { lib: m, gram }
    }

    pub fn endmember_count(&self) -> usize {
        self.gram.nrows()
    }

    /// Solves `min ||y - Ma||^2` subject to `a >= 0`.
    pub fn solve(&self, y: &[f64]) -> Result<PixelSolution> {
        let allowed = vec![true; self.endmember_count()];
        self.solve_on(y, &allowed)
    }

    /// NNLS restricted to the columns flagged in `support`; zeros elsewhere.
    pub fn solve_restricted(&self, y: &[f64], support: &[bool]) -> Result<PixelSolution> {
        if support.len() != self.endmember_count() {
            return Err(CsuError::arg("support length differs from library size"));
        }
        if !support.iter().any(|&s| s) {
            return Err(CsuError::arg("oracle support is empty"));
        }
        self.solve_on(y, support)
    }

    fn check_y(&self, y: &[f64]) -> Result<DVector<f64>> {
        if y.len() != self.lib.nrows() {
            return Err(CsuError::arg(format!(
                "pixel has {} bands, library has {}",
                y.len(),
                self.lib.nrows()
            )));
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(CsuError::arg("non-finite pixel value"));
        }
        Ok(self.lib.tr_mul(&DVector::from_column_slice(y)))
    }

    fn solve_on(&self, y: &[f64], allowed: &[bool]) -> Result<PixelSolution> {
        let c = self.check_y(y)?;
        let r = self.endmember_count();
        let g = &self.gram;
        let scale = c.amax().max(g.diagonal().amax()).max(f64::MIN_POSITIVE);
        let tol = 1e-14 * scale;

        let mut a = DVector::<f64>::zeros(r);
        let mut passive = vec![false; r];
        let mut excluded: Vec<bool> = allowed.iter().map(|&ok| !ok).collect();
        let mut iterations = 0;
        let max_outer = 3 * r + 10;

        loop {
            let w = &c - g * &a;
            let pick = (0..r)
                .filter(|&j| !passive[j] && !excluded[j] && w[j] > tol)
                .max_by(|&i, &j| w[i].total_cmp(&w[j]));
            let Some(j) = pick else { break };
            if iterations >= max_outer {
                break;
            }
            iterations += 1;
            passive[j] = true;

            loop {
                let Some(s) = solve_passive(g, &c, &passive) else {
                    // column j is numerically dependent on the passive set
                    passive[j] = false;
                    excluded[j] = true;
                    break;
                };
                if (0..r).filter(|&i| passive[i]).all(|i| s[i] > 0.0) {
                    a = s;
                    break;
                }
                let mut alpha = f64::INFINITY;
                for i in (0..r).filter(|&i| passive[i] && s[i] <= 0.0) {
                    alpha = alpha.min(a[i] / (a[i] - s[i]));
                }
                a += (s - &a) * alpha;
                for i in 0..r {
                    if passive[i] && a[i] <= tol {
                        passive[i] = false;
                        a[i] = 0.0;
                    }
                }
                if !passive.iter().any(|&p| p) {
                    break;
                }
            }
        }

        let resid = DVector::from_column_slice(y) - &self.lib * &a;
        Ok(PixelSolution {
            a: a.iter().map(|v| v.max(0.0)).collect(),
            iterations,
            objective: resid.norm_squared(),
            converged: iterations < max_outer,
        })
    }

    /// KKT violation of a candidate: `|w_i|` on the support, `max(w_i, 0)` off it,
    /// with `w = M'(y - Ma)`.
    pub fn kkt_residual(&self, y: &[f64], a: &[f64]) -> Result<f64> {
        let c = self.check_y(y)?;
        let av = DVector::from_column_slice(a);
        let w = c - &self.gram * av;
        Ok((0..a.len())
            .map(|i| if a[i] > 0.0 { w[i].abs() } else { w[i].max(0.0) })
            .fold(0.0, f64::max))
    }
}

/// Solves `G_PP s_P = c_P` with zeros outside the passive set.
fn solve_passive(g: &DMatrix<f64>, c: &DVector<f64>, passive: &[bool]) -> Option<DVector<f64>> {
    let idx: Vec<usize> = (0..passive.len()).filter(|&i| passive[i]).collect();
    let k = idx.len();
    let sub = DMatrix::from_fn(k, k, |i, j| g[(idx[i], idx[j])]);
    let rhs = DVector::from_fn(k, |i, _| c[idx[i]]);
    let chol = sub.cholesky()?;
    let sol = chol.solve(&rhs);
    if sol.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let mut s = DVector::zeros(passive.len());
    for (i, &j) in idx.iter().enumerate() {
        s[j] = sol[i];
    }
    Some(s)
}

/// Non-negatively constrained least squares for one pixel.
pub fn ncls(y: &[f64], lib: &Library) -> Result<Vec<f64>> {
    Ok(Ncls::new(lib).solve(y)?.a)
}

/// NNLS on the columns in `true_support` only.
pub fn oracle_ncls(y: &[f64], lib: &Library, true_support: &[bool]) -> Result<Vec<f64>> {
    Ok(Ncls::new(lib).solve_restricted(y, true_support)?.a)
}

/// ADMM settings for [`sunsal`].
#[derive(Debug, Clone, Copy)]
pub struct SunsalOptions {
    pub lambda: f64,
    pub max_iter: usize,
    pub tol: f64,
    pub mu: f64,
}

impl SunsalOptions {
    pub fn new(lambda: f64) -> Self {
        Self { lambda, max_iter: 2000, tol: 1e-7, mu: DEFAULT_MU }
    }
}

/// Result of one ADMM solve, with the best-so-far objective after every iteration.
#[derive(Debug, Clone)]
pub struct SunsalTrace {
    pub solution: PixelSolution,
    pub best_objective: Vec<f64>,
}

/// Reusable l1 solver bound to one library.
#[derive(Debug, Clone)]
pub struct Sunsal {
    lib: DMatrix<f64>,
    gram: DMatrix<f64>,
}

impl Sunsal {
    pub fn new(lib: &Library) -> Self {
        let m = lib.data().clone();
        let gram = m.transpose() * &m;
        Self { lib: m, gram }
    }

    fn objective(&self, y: &DVector<f64>, a: &DVector<f64>, lambda: f64) -> f64 {
        0.5 * (y - &self.lib * a).norm_squared() + lambda * a.sum()
    }

    /// `min 1/2 ||y - Ma||^2 + lambda ||a||_1` subject to `a >= 0`.
    pub fn solve(&self, y: &[f64], opts: SunsalOptions) -> Result<SunsalTrace> {
        if !(opts.lambda >= 0.0 && opts.lambda.is_finite()) {
            return Err(CsuError::arg(format!("lambda must be >= 0, got {}", opts.lambda)));
        }
        if !(opts.mu > 0.0) || opts.max_iter == 0 {
            return Err(CsuError::arg("ADMM needs mu > 0 and max_iter > 0"));
        }
        if y.len() != self.lib.nrows() || y.iter().any(|v| !v.is_finite()) {
            return Err(CsuError::arg("pixel must be finite with one value per band"));
        }
        let r = self.gram.nrows();
        let yv = DVector::from_column_slice(y);
        let c = self.lib.tr_mul(&yv);
        let eye = DMatrix::<f64>::identity(r, r);
        let factor = |mu: f64| {
            (&self.gram + &eye * mu)
                .cholesky()
                .ok_or_else(|| CsuError::numeric("ADMM system is not positive-definite"))
        };

        let mut mu = opts.mu;
        let mut chol = factor(mu)?;
        let mut u = DVector::<f64>::zeros(r);
        let mut d = DVector::<f64>::zeros(r);
        let tol = opts.tol * (r as f64).sqrt();

        let mut best = self.objective(&yv, &u, opts.lambda);
        let mut best_u = u.clone();
        let mut history = Vec::with_capacity(opts.max_iter);
        let mut converged = false;
        let mut iterations = 0;

        for it in 0..opts.max_iter {
            iterations = it + 1;
            let a = chol.solve(&(&c + (&u + &d) * mu));
            let u_prev = u.clone();
            u = (&a - &d).map(|v| (v - opts.lambda / mu).max(0.0));
            d -= &a - &u;

            let primal = (&a - &u).norm();
            let dual = mu * (&u - &u_prev).norm();

            let obj = self.objective(&yv, &u, opts.lambda);
            if obj < best {
                best = obj;
                best_u.copy_from(&u);
            }
            history.push(best);

            if primal < tol && dual < tol {
                converged = true;
                break;
            }
            // residual balancing; the scaled dual variable rescales with mu
            if primal > 10.0 * dual {
                mu *= 2.0;
                d /= 2.0;
                chol = factor(mu)?;
            } else if dual > 10.0 * primal {
                mu /= 2.0;
                d *= 2.0;
                chol = factor(mu)?;
            }
        }

        Ok(SunsalTrace {
            solution: PixelSolution {
                a: best_u.iter().copied().collect(),
                iterations,
                objective: best,
                converged,
            },
            best_objective: history,
        })
    }
}

/// ADMM solution of the l1-penalised non-negative regression for one pixel.
pub fn sunsal(y: &[f64], lib: &Library, lambda: f64, max_iter: usize, tol: f64) -> Result<PixelSolution> {
    let opts = SunsalOptions { lambda, max_iter, tol, mu: DEFAULT_MU };
    Ok(Sunsal::new(lib).solve(y, opts)?.solution)
}

/// `1{a_{r,n} > rho}`; empty pixels are kept as they are.
pub fn threshold_support(a: &AbundanceField, rho: f64) -> Result<BinaryMap> {
    if !(rho > 0.0) {
        return Err(CsuError::arg(format!("threshold must be positive, got {rho}")));
    }
    let v = a.values();
    BinaryMap::from_fn(v.nrows(), v.ncols(), |r, n| v[(r, n)] > rho)
}

fn check_cube(cube: &HyperCube, lib: &Library) -> Result<()> {
    if cube.band_count() != lib.band_count() {
        return Err(CsuError::arg(format!(
            "cube has {} bands, library has {}",
            cube.band_count(),
            lib.band_count()
        )));
    }
    Ok(())
}

fn collect(r: usize, n: usize, sols: Vec<PixelSolution>) -> Result<BaselineResult> {
    let mut values = DMatrix::zeros(r, n);
    let mut iterations = 0;
    let mut objective = 0.0;
    let mut unconverged = 0;
    for (j, s) in sols.into_iter().enumerate() {
        for (i, v) in s.a.iter().enumerate() {
            values[(i, j)] = *v;
        }
        iterations += s.iterations;
        objective += s.objective;
        unconverged += usize::from(!s.converged);
    }
    Ok(BaselineResult { abundances: AbundanceField::new(values)?, iterations, objective, unconverged })
}

/// NNLS on every pixel of a cube.
pub fn ncls_cube(cube: &HyperCube, lib: &Library) -> Result<BaselineResult> {
    check_cube(cube, lib)?;
    let solver = Ncls::new(lib);
    let sols: Result<Vec<_>> = (0..cube.n_pixels()).into_par_iter().map(|n| solver.solve(cube.pixel(n))).collect();
    collect(lib.endmember_count(), cube.n_pixels(), sols?)
}

/// Oracle NNLS on every pixel, using the true support map.
pub fn oracle_ncls_cube(cube: &HyperCube, lib: &Library, truth: &BinaryMap) -> Result<BaselineResult> {
    check_cube(cube, lib)?;
    if truth.n_pixels() != cube.n_pixels() || truth.n_endmembers() != lib.endmember_count() {
        return Err(CsuError::arg("truth support shape does not match cube and library"));
    }
    let solver = Ncls::new(lib);
    let r = lib.endmember_count();
    let sols: Result<Vec<_>> = (0..cube.n_pixels())
        .into_par_iter()
        .map(|n| {
            let support: Vec<bool> = (0..r).map(|k| truth.get(k, n)).collect();
            solver.solve_restricted(cube.pixel(n), &support)
        })
        .collect();
    collect(r, cube.n_pixels(), sols?)
}

/// l1 ADMM on every pixel.
pub fn sunsal_cube(cube: &HyperCube, lib: &Library, opts: SunsalOptions) -> Result<BaselineResult> {
    check_cube(cube, lib)?;
    let solver = Sunsal::new(lib);
    let sols: Result<Vec<_>> = (0..cube.n_pixels())
        .into_par_iter()
        .map(|n| solver.solve(cube.pixel(n), opts).map(|t| t.solution))
        .collect();
    collect(lib.endmember_count(), cube.n_pixels(), sols?)
}

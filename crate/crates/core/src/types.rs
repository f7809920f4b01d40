//! Domain types shared across the crate.
//!
//! Pixels are indexed column-major over the grid: pixel `n = row + n_row * col`.
//! Every matrix indexed by pixel (cube, abundances, labels) uses that order for
//! its columns.

use nalgebra::{DMatrix, DVector};

use crate::error::{CsuError, Result};

/// Upper bound on each Ising coupling during estimation.
pub const BETA_MAX: f64 = 2.0;

/// Largest library a [`BinaryMap`] can label (one bit per endmember in a `u64`).
pub const MAX_LABEL_BITS: usize = 64;

/// Image grid with a fixed 8-neighbourhood, clipped at the borders.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridGeometry {
    n_row: usize,
    n_col: usize,
}

impl GridGeometry {
    pub fn new(n_row: usize, n_col: usize) -> Result<Self> {
        if n_row == 0 || n_col == 0 {
            return Err(CsuError::arg(format!("grid must be non-empty, got {n_row}x{n_col}")));
        }
        Ok(Self { n_row, n_col })
    }

    pub fn n_row(&self) -> usize {
        self.n_row
    }

    pub fn n_col(&self) -> usize {
        self.n_col
    }

    pub fn n_pixels(&self) -> usize {
        self.n_row * self.n_col
    }

    pub fn index(&self, row: usize, col: usize) -> usize {
        row + self.n_row * col
    }

    pub fn coords(&self, n: usize) -> (usize, usize) {
        (n % self.n_row, n / self.n_row)
    }

    /// The 8-neighbourhood of pixel `n`, clipped at the image borders.
    pub fn neighbors(&self, n: usize) -> Result<Vec<usize>> {
        if n >= self.n_pixels() {
            return Err(CsuError::arg(format!(
                "pixel {n} out of range for {} pixels",
                self.n_pixels()
            )));
        }
        let mut out = Vec::with_capacity(8);
        self.for_each_neighbor(n, |m| out.push(m));
        Ok(out)
    }

    /// Calls `f` on every neighbour of `n`. `n` must be in range.
    #[inline]
    pub fn for_each_neighbor(&self, n: usize, mut f: impl FnMut(usize)) {
        let (row, col) = self.coords(n);
        let r0 = row.saturating_sub(1);
        let r1 = (row + 1).min(self.n_row - 1);
        let c0 = col.saturating_sub(1);
        let c1 = (col + 1).min(self.n_col - 1);
        for c in c0..=c1 {
            for r in r0..=r1 {
                if r != row || c != col {
                    f(r + self.n_row * c);
                }
            }
        }
    }

    pub fn neighbor_count(&self, n: usize) -> usize {
        let (row, col) = self.coords(n);
        let rows = 1 + usize::from(row > 0) + usize::from(row + 1 < self.n_row);
        let cols = 1 + usize::from(col > 0) + usize::from(col + 1 < self.n_col);
        rows * cols - 1
    }

    /// Number of ordered neighbour pairs, `sum_n |V(n)|`.
    pub fn ordered_pair_count(&self) -> usize {
        (0..self.n_pixels()).map(|n| self.neighbor_count(n)).sum()
    }

    /// Colour in a 2x2 block colouring. Pixels sharing a colour are never
    /// 8-neighbours, so they can be updated concurrently.
    pub fn color(&self, n: usize) -> usize {
        let (row, col) = self.coords(n);
        (row % 2) + 2 * (col % 2)
    }
}

/// Observed image: `L` bands by `N` pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct HyperCube {
    data: DMatrix<f64>,
    geom: GridGeometry,
}

impl HyperCube {
    pub fn new(data: DMatrix<f64>, geom: GridGeometry) -> Result<Self> {
        if data.nrows() == 0 {
            return Err(CsuError::arg("cube needs at least one band"));
        }
        if data.ncols() != geom.n_pixels() {
            return Err(CsuError::arg(format!(
                "cube has {} pixels but the grid has {}",
                data.ncols(),
                geom.n_pixels()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(CsuError::arg("cube contains non-finite values"));
        }
        Ok(Self { data, geom })
    }

    pub fn data(&self) -> &DMatrix<f64> {
        &self.data
    }

    pub fn geometry(&self) -> GridGeometry {
        self.geom
    }

    pub fn band_count(&self) -> usize {
        self.data.nrows()
    }

    pub fn n_pixels(&self) -> usize {
        self.data.ncols()
    }

    pub fn pixel(&self, n: usize) -> &[f64] {
        let l = self.band_count();
        &self.data.as_slice()[n * l..(n + 1) * l]
    }
}

/// Endmember library: one spectral signature per column.
#[derive(Debug, Clone, PartialEq)]
pub struct Library {
    data: DMatrix<f64>,
    names: Vec<String>,
}

impl Library {
    pub fn new(data: DMatrix<f64>, names: Vec<String>) -> Result<Self> {
        if data.ncols() == 0 || data.nrows() == 0 {
            return Err(CsuError::arg("library needs at least one band and one endmember"));
        }
        if names.len() != data.ncols() {
            return Err(CsuError::arg(format!(
                "{} names for {} endmembers",
                names.len(),
                data.ncols()
            )));
        }
        if data.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(CsuError::arg("library entries must be finite and non-negative"));
        }
        if let Some(r) = (0..data.ncols()).find(|&r| data.column(r).norm() == 0.0) {
            return Err(CsuError::arg(format!("library column {r} is zero")));
        }
        Ok(Self { data, names })
    }

    /// Library with generated names `em0`, `em1`, ...
    pub fn unnamed(data: DMatrix<f64>) -> Result<Self> {
        let names = (0..data.ncols()).map(|r| format!("em{r}")).collect();
        Self::new(data, names)
    }

    pub fn data(&self) -> &DMatrix<f64> {
        &self.data
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn band_count(&self) -> usize {
        self.data.nrows()
    }

    pub fn endmember_count(&self) -> usize {
        self.data.ncols()
    }

    /// `M a` for one abundance vector.
    pub fn mix(&self, a: &[f64]) -> DVector<f64> {
        &self.data * DVector::from_column_slice(a)
    }
}

/// Binary `R x N` label matrix, one bit mask per pixel. Empty pixels allowed.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryMap {
    n_endmembers: usize,
    masks: Vec<u64>,
}

impl BinaryMap {
    pub fn zeros(n_endmembers: usize, n_pixels: usize) -> Result<Self> {
        Self::from_masks(n_endmembers, vec![0; n_pixels])
    }

    pub fn from_masks(n_endmembers: usize, masks: Vec<u64>) -> Result<Self> {
        if n_endmembers == 0 || n_endmembers > MAX_LABEL_BITS {
            return Err(CsuError::arg(format!(
                "label maps support 1..={MAX_LABEL_BITS} endmembers, got {n_endmembers}"
            )));
        }
        let allowed = full_mask(n_endmembers);
        if masks.iter().any(|m| m & !allowed != 0) {
            return Err(CsuError::arg("label mask has bits beyond the endmember count"));
        }
        Ok(Self { n_endmembers, masks })
    }

    /// From a row-major closure `f(r, n)`.
    pub fn from_fn(
        n_endmembers: usize,
        n_pixels: usize,
        mut f: impl FnMut(usize, usize) -> bool,
    ) -> Result<Self> {
        let masks = (0..n_pixels)
            .map(|n| {
                (0..n_endmembers).fold(0u64, |m, r| if f(r, n) { m | (1 << r) } else { m })
            })
            .collect();
        Self::from_masks(n_endmembers, masks)
    }

    pub fn n_endmembers(&self) -> usize {
        self.n_endmembers
    }

    pub fn n_pixels(&self) -> usize {
        self.masks.len()
    }

    #[inline]
    pub fn get(&self, r: usize, n: usize) -> bool {
        self.masks[n] >> r & 1 == 1
    }

    pub fn set(&mut self, r: usize, n: usize, value: bool) {
        if value {
            self.masks[n] |= 1 << r;
        } else {
            self.masks[n] &= !(1 << r);
        }
    }

    #[inline]
    pub fn pixel_mask(&self, n: usize) -> u64 {
        self.masks[n]
    }

    pub fn masks(&self) -> &[u64] {
        &self.masks
    }

    pub fn active_count(&self, n: usize) -> usize {
        self.masks[n].count_ones() as usize
    }

    pub fn has_empty_pixel(&self) -> bool {
        self.masks.contains(&0)
    }

    /// Labels as a dense `R x N` 0/1 matrix.
    pub fn to_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.n_endmembers, self.n_pixels(), |r, n| {
            if self.get(r, n) {
                1.0
            } else {
                0.0
            }
        })
    }
}

pub(crate) fn full_mask(n_endmembers: usize) -> u64 {
    if n_endmembers >= 64 {
        u64::MAX
    } else {
        (1u64 << n_endmembers) - 1
    }
}

/// Label matrix `Z` satisfying the non-empty-pixel constraint.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SupportField(BinaryMap);

impl SupportField {
    pub fn new(map: BinaryMap) -> Result<Self> {
        if let Some(n) = map.masks.iter().position(|&m| m == 0) {
            return Err(CsuError::arg(format!("pixel {n} has no active endmember")));
        }
        Ok(Self(map))
    }

    pub fn from_masks(n_endmembers: usize, masks: Vec<u64>) -> Result<Self> {
        Self::new(BinaryMap::from_masks(n_endmembers, masks)?)
    }

    pub fn ones(n_endmembers: usize, n_pixels: usize) -> Result<Self> {
        Self::from_masks(n_endmembers, vec![full_mask(n_endmembers); n_pixels])
    }

    pub fn as_map(&self) -> &BinaryMap {
        &self.0
    }

    pub fn into_map(self) -> BinaryMap {
        self.0
    }
}

impl std::ops::Deref for SupportField {
    type Target = BinaryMap;

    fn deref(&self) -> &BinaryMap {
        &self.0
    }
}

/// Non-negative `R x N` matrix of abundance values.
#[derive(Debug, Clone, PartialEq)]
pub struct AbundanceField {
    values: DMatrix<f64>,
}

impl AbundanceField {
    pub fn new(values: DMatrix<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(CsuError::arg("abundances must be finite and non-negative"));
        }
        Ok(Self { values })
    }

    pub fn zeros(n_endmembers: usize, n_pixels: usize) -> Self {
        Self { values: DMatrix::zeros(n_endmembers, n_pixels) }
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn into_values(self) -> DMatrix<f64> {
        self.values
    }

    pub fn n_endmembers(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_pixels(&self) -> usize {
        self.values.ncols()
    }

    pub fn pixel(&self, n: usize) -> &[f64] {
        let r = self.n_endmembers();
        &self.values.as_slice()[n * r..(n + 1) * r]
    }
}

/// Per-band noise variances; the covariance is `diag(variances)`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseModel {
    variances: Vec<f64>,
}

impl NoiseModel {
    pub fn new(variances: Vec<f64>) -> Result<Self> {
        if variances.is_empty() {
            return Err(CsuError::arg("noise model needs at least one band"));
        }
        if variances.iter().any(|v| !v.is_finite() || *v <= 0.0) {
            return Err(CsuError::arg("noise variances must be finite and positive"));
        }
        Ok(Self { variances })
    }

    pub fn isotropic(bands: usize, variance: f64) -> Result<Self> {
        Self::new(vec![variance; bands])
    }

    pub fn variances(&self) -> &[f64] {
        &self.variances
    }
}

/// Model hyperparameters: inverse-gamma shape/scale for `s2`, couplings, scales.
#[derive(Debug, Clone, PartialEq)]
pub struct HyperParams {
    pub gamma: f64,
    pub nu: f64,
    pub beta: Vec<f64>,
    pub s2: Vec<f64>,
}

impl HyperParams {
    pub fn new(gamma: f64, nu: f64, beta: Vec<f64>, s2: Vec<f64>) -> Result<Self> {
        if !(gamma > 0.0 && nu > 0.0 && gamma.is_finite() && nu.is_finite()) {
            return Err(CsuError::arg("gamma and nu must be positive"));
        }
        if beta.len() != s2.len() {
            return Err(CsuError::arg("beta and s2 must have one entry per endmember"));
        }
        if beta.iter().any(|b| !(0.0..=BETA_MAX).contains(b)) {
            return Err(CsuError::arg(format!("beta entries must lie in [0, {BETA_MAX}]")));
        }
        if s2.iter().any(|s| !s.is_finite() || *s <= 0.0) {
            return Err(CsuError::arg("s2 entries must be positive"));
        }
        Ok(Self { gamma, nu, beta, s2 })
    }

    /// Prior mean of each `s2_r`, defined for `gamma > 1`.
    pub fn prior_scale_mean(&self) -> Option<f64> {
        (self.gamma > 1.0).then(|| self.nu / (self.gamma - 1.0))
    }
}

/// Largest normalised inner product between two distinct library columns.
pub fn mutual_coherence(lib: &Library) -> Result<f64> {
    let m = lib.data();
    let r = m.ncols();
    if r < 2 {
        return Err(CsuError::arg("mutual coherence needs at least two endmembers"));
    }
    let norms: Vec<f64> = (0..r).map(|j| m.column(j).norm()).collect();
    let mut best = 0.0f64;
    for i in 0..r {
        for j in i + 1..r {
            let c = m.column(i).dot(&m.column(j)).abs() / (norms[i] * norms[j]);
            best = best.max(c);
        }
    }
    Ok(best.min(1.0))
}

/// `A = Z ⊙ X`.
pub fn compose_abundances(z: &BinaryMap, x: &AbundanceField) -> Result<AbundanceField> {
    if z.n_endmembers() != x.n_endmembers() || z.n_pixels() != x.n_pixels() {
        return Err(CsuError::arg(format!(
            "label map is {}x{} but abundances are {}x{}",
            z.n_endmembers(),
            z.n_pixels(),
            x.n_endmembers(),
            x.n_pixels()
        )));
    }
    let values = DMatrix::from_fn(x.n_endmembers(), x.n_pixels(), |r, n| {
        if z.get(r, n) {
            x.values[(r, n)]
        } else {
            0.0
        }
    });
    Ok(AbundanceField { values })
}

use nalgebra::DMatrix;

use crate::error::{CsuError, Result};
use crate::types::{AbundanceField, BinaryMap, GridGeometry};

/// Per-iteration record of a chain.
///
/// Labels are bit-packed and kept for every iteration. Abundance matrices
/// are kept for post-burn-in iterations only, every `thin`-th one.
#[derive(Debug, Clone)]
pub struct ChainTrace {
    n_mc: usize,
    n_bi: usize,
    n_endmembers: usize,
    geom: GridGeometry,
    thin: usize,
    words_per_iter: usize,
    z_bits: Vec<u64>,
    x_samples: Vec<(usize, DMatrix<f64>)>,
    sigma2: Vec<Vec<f64>>,
    s2: Vec<Vec<f64>>,
    beta: Vec<Vec<f64>>,
    len: usize,
}

impl ChainTrace {
    pub fn new(n_mc: usize, n_bi: usize, n_endmembers: usize, geom: GridGeometry, thin: usize) -> Result<Self> {
        if n_bi >= n_mc {
            return Err(CsuError::arg(format!("burn-in {n_bi} must be below chain length {n_mc}")));
        }
        if thin == 0 {
            return Err(CsuError::arg("thinning interval must be at least 1"));
        }
        let bits = n_endmembers * geom.n_pixels();
        let words_per_iter = bits.div_ceil(64);
        Ok(Self {
            n_mc,
            n_bi,
            n_endmembers,
            geom,
            thin,
            words_per_iter,
            z_bits: Vec::with_capacity(words_per_iter * n_mc),
            x_samples: Vec::new(),
            sigma2: Vec::with_capacity(n_mc),
            s2: Vec::with_capacity(n_mc),
            beta: Vec::with_capacity(n_mc),
            len: 0,
        })
    }

    pub fn n_mc(&self) -> usize {
        self.n_mc
    }

    pub fn n_bi(&self) -> usize {
        self.n_bi
    }

    pub fn n_endmembers(&self) -> usize {
        self.n_endmembers
    }

    pub fn n_pixels(&self) -> usize {
        self.geom.n_pixels()
    }

    pub fn geometry(&self) -> GridGeometry {
        self.geom
    }

    pub fn thin(&self) -> usize {
        self.thin
    }

    /// Number of recorded iterations.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn is_complete(&self) -> bool {
        self.len == self.n_mc
    }

    /// Zero-based indices of recorded post-burn-in iterations.
    pub fn post_burn_in(&self) -> std::ops::Range<usize> {
        self.n_bi.min(self.len)..self.len
    }

    /// Whether iteration index `i` (zero-based) keeps its abundance matrix.
    pub fn keeps_x(&self, i: usize) -> bool {
        i >= self.n_bi && (i - self.n_bi) % self.thin == 0
    }

    /// Appends one iteration.
    pub fn push(
        &mut self,
        z: &BinaryMap,
        x: &AbundanceField,
        sigma2: &[f64],
        s2: &[f64],
        beta: &[f64],
    ) -> Result<()> {
        if self.len >= self.n_mc {
            return Err(CsuError::arg("trace is already full"));
        }
        if z.n_endmembers() != self.n_endmembers
            || z.n_pixels() != self.n_pixels()
            || x.n_endmembers() != self.n_endmembers
            || x.n_pixels() != self.n_pixels()
        {
            return Err(CsuError::arg("sample shape does not match the trace"));
        }
        let start = self.z_bits.len();
        self.z_bits.resize(start + self.words_per_iter, 0);
        let words = &mut self.z_bits[start..];
        let r = self.n_endmembers;
        for (n, &m) in z.masks().iter().enumerate() {
            let mut bits = m;
            while bits != 0 {
                let k = bits.trailing_zeros() as usize;
                let idx = n * r + k;
                words[idx / 64] |= 1 << (idx % 64);
                bits &= bits - 1;
            }
        }
        if self.keeps_x(self.len) {
            self.x_samples.push((self.len, x.values().clone()));
        }
        self.sigma2.push(sigma2.to_vec());
        self.s2.push(s2.to_vec());
        self.beta.push(beta.to_vec());
        self.len += 1;
        Ok(())
    }

    /// Label `z_{r,n}` at iteration index `i`.
    #[inline]
    pub fn z(&self, i: usize, r: usize, n: usize) -> bool {
        let idx = n * self.n_endmembers + r;
        self.z_bits[i * self.words_per_iter + idx / 64] >> (idx % 64) & 1 == 1
    }

    /// Full label map at iteration index `i`.
    pub fn z_map(&self, i: usize) -> BinaryMap {
        BinaryMap::from_fn(self.n_endmembers, self.n_pixels(), |r, n| self.z(i, r, n))
            .expect("trace shape is valid")
    }

    /// Stored `(iteration index, X)` pairs.
    pub fn x_samples(&self) -> &[(usize, DMatrix<f64>)] {
        &self.x_samples
    }

    pub fn sigma2(&self) -> &[Vec<f64>] {
        &self.sigma2
    }

    pub fn s2(&self) -> &[Vec<f64>] {
        &self.s2
    }

    pub fn beta(&self) -> &[Vec<f64>] {
        &self.beta
    }
}

//! Evaluation metrics: abundance error, abundance angle, reconstruction
//! error and support detection scores.

use std::fmt::Write as _;

use nalgebra::DMatrix;

use crate::error::{CsuError, Result};
use crate::types::{AbundanceField, BinaryMap, HyperCube, Library};

/// Per-pixel values and their arithmetic mean.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelMetric {
    /// `None` for pixels where the metric is undefined.
    pub per_pixel: Vec<Option<f64>>,
    pub mean: f64,
    pub missing: usize,
}

impl PixelMetric {
    fn from_values(per_pixel: Vec<Option<f64>>) -> Self {
        let defined: Vec<f64> = per_pixel.iter().flatten().copied().collect();
        let missing = per_pixel.len() - defined.len();
        let mean = if defined.is_empty() { f64::NAN } else { defined.iter().sum::<f64>() / defined.len() as f64 };
        Self { per_pixel, mean, missing }
    }
}

fn check_same(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(CsuError::arg(format!("shape mismatch: {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// `||a_hat_n - a_n||_2` per pixel.
pub fn rmse(a_hat: &AbundanceField, a_true: &AbundanceField) -> Result<PixelMetric> {
    let (h, t) = (a_hat.values(), a_true.values());
    check_same(h, t)?;
    Ok(PixelMetric::from_values((0..h.ncols()).map(|n| Some((h.column(n) - t.column(n)).norm())).collect()))
}

/// Angle in radians between `a_hat_n` and `a_n`; undefined when either is zero.
pub fn aad(a_hat: &AbundanceField, a_true: &AbundanceField) -> Result<PixelMetric> {
    let (h, t) = (a_hat.values(), a_true.values());
    check_same(h, t)?;
    let vals = (0..h.ncols())
        .map(|n| {
            let (u, v) = (h.column(n), t.column(n));
            let (nu, nv) = (u.norm(), v.norm());
            (nu > 0.0 && nv > 0.0).then(|| (u.dot(&v) / (nu * nv)).clamp(-1.0, 1.0).acos())
        })
        .collect();
    Ok(PixelMetric::from_values(vals))
}

/// `||M a_hat_n - y_n||_2` per pixel.
pub fn reconstruction_error(a_hat: &AbundanceField, cube: &HyperCube, lib: &Library) -> Result<PixelMetric> {
    if a_hat.n_endmembers() != lib.endmember_count()
        || a_hat.n_pixels() != cube.n_pixels()
        || cube.band_count() != lib.band_count()
    {
        return Err(CsuError::arg("abundances, cube and library disagree in shape"));
    }
    let resid = lib.data() * a_hat.values() - cube.data();
    Ok(PixelMetric::from_values(resid.column_iter().map(|c| Some(c.norm())).collect()))
}

/// Detection counts and scores for one endmember.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectionScores {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
    /// 1 when nothing is detected.
    pub precision: f64,
    /// 1 when nothing is present.
    pub recall: f64,
    pub f1: f64,
}

impl DetectionScores {
    fn from_counts(tp: usize, fp: usize, fn_: usize, tn: usize) -> Self {
        let precision = if tp + fp == 0 { 1.0 } else { tp as f64 / (tp + fp) as f64 };
        let recall = if tp + fn_ == 0 { 1.0 } else { tp as f64 / (tp + fn_) as f64 };
        let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
        Self { tp, fp, fn_, tn, precision, recall, f1 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SupportScores {
    pub per_endmember: Vec<DetectionScores>,
    /// Fraction of `(r, n)` entries that disagree.
    pub hamming_rate: f64,
}

pub fn support_scores(z_hat: &BinaryMap, z_true: &BinaryMap) -> Result<SupportScores> {
    if z_hat.n_endmembers() != z_true.n_endmembers() || z_hat.n_pixels() != z_true.n_pixels() {
        return Err(CsuError::arg("support maps disagree in shape"));
    }
    let (r, n) = (z_hat.n_endmembers(), z_hat.n_pixels());
    let mut wrong = 0;
    let per_endmember = (0..r)
        .map(|k| {
            let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
            for p in 0..n {
                match (z_hat.get(k, p), z_true.get(k, p)) {
                    (true, true) => tp += 1,
                    (true, false) => fp += 1,
                    (false, true) => fn_ += 1,
                    (false, false) => tn += 1,
                }
            }
            wrong += fp + fn_;
            DetectionScores::from_counts(tp, fp, fn_, tn)
        })
        .collect();
    Ok(SupportScores { per_endmember, hamming_rate: wrong as f64 / (r * n) as f64 })
}

/// All metrics of one estimate against the truth.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub rmse: PixelMetric,
    pub aad: PixelMetric,
    pub re: PixelMetric,
    pub support: Option<SupportScores>,
}

/// Evaluates `a_hat` (with optional support estimate) against the truth.
pub fn evaluate(
    a_hat: &AbundanceField,
    a_true: &AbundanceField,
    cube: &HyperCube,
    lib: &Library,
    z_hat: Option<&BinaryMap>,
    z_true: Option<&BinaryMap>,
) -> Result<EvalReport> {
    let support = match (z_hat, z_true) {
        (Some(h), Some(t)) => Some(support_scores(h, t)?),
        _ => None,
    };
    Ok(EvalReport {
        rmse: rmse(a_hat, a_true)?,
        aad: aad(a_hat, a_true)?,
        re: reconstruction_error(a_hat, cube, lib)?,
        support,
    })
}

impl EvalReport {
    /// Flat `key = value` listing of the averages and detection scores.
    ///
    /// Averages are also given scaled by 100 to match tables quoted in
    /// units of `1e-2`.
    pub fn to_kv_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| writeln!(s, "{k} = {v}").unwrap();
        for (name, m) in [("rmse", &self.rmse), ("aad", &self.aad), ("re", &self.re)] {
            kv(&format!("{name}_mean"), format!("{:e}", m.mean));
            kv(&format!("{name}_mean_x1e-2"), format!("{:.2}", m.mean * 100.0));
        }
        kv("aad_missing", self.aad.missing.to_string());
        if let Some(sup) = &self.support {
            kv("hamming_rate", format!("{:e}", sup.hamming_rate));
            for (k, d) in sup.per_endmember.iter().enumerate() {
                kv(&format!("em{k}_tp"), d.tp.to_string());
                kv(&format!("em{k}_fp"), d.fp.to_string());
                kv(&format!("em{k}_fn"), d.fn_.to_string());
                kv(&format!("em{k}_tn"), d.tn.to_string());
                kv(&format!("em{k}_precision"), format!("{:e}", d.precision));
                kv(&format!("em{k}_recall"), format!("{:e}", d.recall));
                kv(&format!("em{k}_f1"), format!("{:e}", d.f1));
            }
        }
        s
    }

    /// Per-pixel CSV with header `pixel,rmse,aad,re`; undefined values are empty.
    pub fn to_csv(&self) -> String {
        let cell = |v: Option<f64>| v.map(|x| format!("{x:e}")).unwrap_or_default();
        let mut s = String::from("pixel,rmse,aad,re\n");
        for n in 0..self.rmse.per_pixel.len() {
            writeln!(
                s,
                "{n},{},{},{}",
                cell(self.rmse.per_pixel[n]),
                cell(self.aad.per_pixel[n]),
                cell(self.re.per_pixel[n])
            )
            .unwrap();
        }
        s
    }
}

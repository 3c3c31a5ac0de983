//! Training losses: Huber photometric regression (default) and cross-entropy
//! over quantized colors (ablation arm).

use ndarray::{Array2, Array3};

use crate::error::{Error, Result};

/// A scalar loss together with its per-pixel terms; the scalar is exactly the
/// mean of the per-pixel entries.
#[derive(Debug, Clone)]
pub struct LossValue {
    pub scalar: f64,
    pub per_pixel: Array2<f64>,
}

fn huber_elem(e: f64) -> f64 {
    if e.abs() < 1.0 {
        0.5 * e * e
    } else {
        e.abs() - 0.5
    }
}

fn huber_elem_grad(e: f64) -> f64 {
    // At |e| == 1 both branches have the same one-sided derivative.
    if e.abs() < 1.0 {
        e
    } else {
        e.signum()
    }
}

/// Huber loss between a reconstruction and an aligned target, both `h x w x 3`
/// in `[-1, 1]`. Per pixel the three channel residuals are each passed through
/// the Huber function and summed; the scalar averages over pixels.
pub fn huber_loss(recon: &Array3<f64>, target: &Array3<f64>) -> Result<LossValue> {
    if recon.shape() != target.shape() {
        return Err(Error::shape(format!(
            "reconstruction {:?} vs target {:?}",
            recon.shape(),
            target.shape()
        )));
    }
    let (h, w, _) = recon.dim();
    let mut per_pixel = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut z = 0.0;
            for c in 0..recon.shape()[2] {
                z += huber_elem(recon[[y, x, c]] - target[[y, x, c]]);
            }
            per_pixel[[y, x]] = z;
        }
    }
    let scalar = per_pixel.sum() / (h * w) as f64;
    Ok(LossValue { scalar, per_pixel })
}

/// Gradient of the Huber scalar with respect to the reconstruction.
pub fn huber_grad(recon: &Array3<f64>, target: &Array3<f64>) -> Result<Array3<f64>> {
    if recon.shape() != target.shape() {
        return Err(Error::shape("huber_grad shapes differ"));
    }
    let n = (recon.shape()[0] * recon.shape()[1]) as f64;
    let mut g = recon.clone();
    g.zip_mut_with(target, |r, &t| *r = huber_elem_grad(*r - t) / n);
    Ok(g)
}

/// Uniform color quantizer over the normalized `(a, b)` chroma plane.
#[derive(Debug, Clone)]
pub struct ColorQuantizer {
    /// K x 2 bin centers in normalized units.
    pub centers: Array2<f64>,
}

impl ColorQuantizer {
    /// A `bins_per_axis`^2 grid over `[-1, 1]^2`; bin index is row-major over
    /// `(a, b)`.
    pub fn uniform_lab(bins_per_axis: usize) -> Result<Self> {
        if bins_per_axis == 0 {
            return Err(Error::invalid("quantizer needs at least one bin per axis"));
        }
        let k = bins_per_axis * bins_per_axis;
        let step = 2.0 / bins_per_axis as f64;
        let mut centers = Array2::zeros((k, 2));
        for i in 0..bins_per_axis {
            for j in 0..bins_per_axis {
                centers[[i * bins_per_axis + j, 0]] = -1.0 + step * (i as f64 + 0.5);
                centers[[i * bins_per_axis + j, 1]] = -1.0 + step * (j as f64 + 0.5);
            }
        }
        Ok(ColorQuantizer { centers })
    }

    pub fn bins(&self) -> usize {
        self.centers.shape()[0]
    }

    /// Nearest center by squared distance; ties go to the lowest index.
    pub fn quantize(&self, a: f64, b: f64) -> usize {
        let mut best = 0usize;
        let mut best_d = f64::INFINITY;
        for (k, row) in self.centers.rows().into_iter().enumerate() {
            let d = (a - row[0]).powi(2) + (b - row[1]).powi(2);
            if d < best_d {
                best_d = d;
                best = k;
            }
        }
        best
    }

    /// Quantize the chroma channels (1 and 2) of an aligned `h x w x 3` Lab
    /// target into bin indices.
    pub fn quantize_image(&self, aligned: &Array3<f64>) -> Array2<usize> {
        let (h, w, _) = aligned.dim();
        Array2::from_shape_fn((h, w), |(y, x)| {
            self.quantize(aligned[[y, x, 1]], aligned[[y, x, 2]])
        })
    }
}

const LOG_CLAMP: f64 = 1e-8;

/// Cross-entropy between copied class distributions and quantized target bins,
/// averaged over pixels, with the log argument clamped at `1e-8`.
pub fn classification_loss(
    probs: &Array3<f64>,
    targets: &Array2<usize>,
    quantizer: &ColorQuantizer,
) -> Result<LossValue> {
    if quantizer.bins() == 0 {
        return Err(Error::invalid("quantizer is unfitted"));
    }
    let (h, w, k) = probs.dim();
    if k != quantizer.bins() {
        return Err(Error::shape(format!(
            "distribution has {k} classes, quantizer has {}",
            quantizer.bins()
        )));
    }
    if targets.dim() != (h, w) {
        return Err(Error::shape("target bins do not match distribution grid"));
    }
    let mut per_pixel = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let t = targets[[y, x]];
            if t >= k {
                return Err(Error::invalid(format!("target bin {t} out of range 0..{k}")));
            }
            per_pixel[[y, x]] = -probs[[y, x, t]].max(LOG_CLAMP).ln();
        }
    }
    let scalar = per_pixel.sum() / (h * w) as f64;
    Ok(LossValue { scalar, per_pixel })
}

/// Gradient of the classification scalar with respect to the copied
/// distribution (zero inside the clamped region).
pub fn classification_grad(probs: &Array3<f64>, targets: &Array2<usize>) -> Array3<f64> {
    let (h, w, k) = probs.dim();
    let n = (h * w) as f64;
    let mut g = Array3::zeros((h, w, k));
    for y in 0..h {
        for x in 0..w {
            let t = targets[[y, x]];
            let p = probs[[y, x, t]];
            if p > LOG_CLAMP {
                g[[y, x, t]] = -1.0 / (p * n);
            }
        }
    }
    g
}

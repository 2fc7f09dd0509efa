//! Dense reconstruction targets for masked positions and the masked objective.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::patchify::{patchify, Image, MaskingPlan, PatchGrid};
use crate::tensor::{Mat, Real};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetKind {
    Pixel,
    Hog,
    Code,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HogConfig {
    pub n_bins: usize,
    pub cell_size: usize,
    pub signed: bool,
    pub epsilon: f64,
}

impl Default for HogConfig {
    fn default() -> Self {
        Self {
            n_bins: 9,
            cell_size: 8,
            signed: false,
            epsilon: 1e-6,
        }
    }
}

impl HogConfig {
    pub fn validate(&self, patch_size: usize) -> Result<()> {
        if self.n_bins < 2 {
            return Err(Error::Config(format!("HOG needs at least 2 bins, got {}", self.n_bins)));
        }
        if self.cell_size == 0 || patch_size % self.cell_size != 0 {
            return Err(Error::Config(format!(
                "HOG cell size {} does not divide patch size {patch_size}",
                self.cell_size
            )));
        }
        Ok(())
    }

    /// Descriptor length per patch.
    pub fn dim(&self, patch_size: usize) -> usize {
        let cells = patch_size / self.cell_size.max(1);
        cells * cells * self.n_bins
    }
}

/// One target per masked position, in `plan.masked` order.
#[derive(Debug, Clone, PartialEq)]
pub enum TargetBatch {
    Pixel(Vec<Vec<f32>>),
    Hog(Vec<Vec<f32>>),
    Code { codes: Vec<usize>, codebook_size: usize },
}

impl TargetBatch {
    pub fn kind(&self) -> TargetKind {
        match self {
            TargetBatch::Pixel(_) => TargetKind::Pixel,
            TargetBatch::Hog(_) => TargetKind::Hog,
            TargetBatch::Code { .. } => TargetKind::Code,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TargetBatch::Pixel(v) | TargetBatch::Hog(v) => v.len(),
            TargetBatch::Code { codes, .. } => codes.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Width the prediction head must emit for this target.
    pub fn dim(&self) -> Option<usize> {
        match self {
            TargetBatch::Pixel(v) | TargetBatch::Hog(v) => v.first().map(Vec::len),
            TargetBatch::Code { codebook_size, .. } => Some(*codebook_size),
        }
    }

    /// Joins per-image batches sample-major, matching the encoder's stacking.
    pub fn concat(parts: Vec<TargetBatch>) -> Result<TargetBatch> {
        let mut it = parts.into_iter();
        let Some(first) = it.next() else {
            return Err(Error::Shape("no target batches to join".into()));
        };
        it.try_fold(first, |acc, next| match (acc, next) {
            (TargetBatch::Pixel(mut a), TargetBatch::Pixel(b)) => {
                a.extend(b);
                Ok(TargetBatch::Pixel(a))
            }
            (TargetBatch::Hog(mut a), TargetBatch::Hog(b)) => {
                a.extend(b);
                Ok(TargetBatch::Hog(a))
            }
            (
                TargetBatch::Code { mut codes, codebook_size },
                TargetBatch::Code { codes: more, codebook_size: k },
            ) if k == codebook_size => {
                codes.extend(more);
                Ok(TargetBatch::Code { codes, codebook_size })
            }
            _ => Err(Error::Shape("cannot join target batches of different kinds".into())),
        })
    }
}

fn check_plan(grid: &PatchGrid, plan: &MaskingPlan) -> Result<()> {
    if plan.n_total != grid.len() {
        return Err(Error::Shape(format!(
            "plan covers {} patches, image has {}",
            plan.n_total,
            grid.len()
        )));
    }
    Ok(())
}

const NORM_EPS: f64 = 1e-6;

/// Raw patch pixels, optionally standardized per patch.
pub fn pixel_target(image: &Image, patch_size: usize, plan: &MaskingPlan, normalize_per_patch: bool) -> Result<TargetBatch> {
    let grid = patchify(image, patch_size)?;
    check_plan(&grid, plan)?;
    let out = plan
        .masked
        .iter()
        .map(|&i| {
            let p = &grid.patches[i];
            if !normalize_per_patch {
                return p.clone();
            }
            let n = p.len() as f64;
            let mean = p.iter().map(|&v| v as f64).sum::<f64>() / n;
            let var = p.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
            let std = (var + NORM_EPS).sqrt();
            p.iter().map(|&v| ((v as f64 - mean) / std) as f32).collect()
        })
        .collect();
    Ok(TargetBatch::Pixel(out))
}

/// Per-pixel gradient magnitude and orientation over the whole image using
/// `[-1, 0, 1]` central differences with replicated borders.
fn gradients(image: &Image) -> (Vec<f32>, Vec<f32>) {
    let (h, w) = (image.height, image.width);
    let lum = image.luma();
    let at = |y: usize, x: usize| lum[y * w + x];
    let mut gx = vec![0.0f32; h * w];
    let mut gy = vec![0.0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            let (xl, xr) = (x.saturating_sub(1), (x + 1).min(w - 1));
            let (yu, yd) = (y.saturating_sub(1), (y + 1).min(h - 1));
            gx[y * w + x] = at(y, xr) - at(y, xl);
            gy[y * w + x] = at(yd, x) - at(yu, x);
        }
    }
    (gx, gy)
}

/// Histogram-of-oriented-gradient descriptor per masked patch.
///
/// Orientation bins are centered at `b·span/n_bins` (span = π unsigned,
/// 2π signed) with linear interpolation between the two nearest centers,
/// weighted by gradient magnitude. Cell histograms are concatenated
/// row-major and the patch vector is scaled by `1 / (‖v‖₂ + ε)`.
pub fn hog_target(image: &Image, patch_size: usize, plan: &MaskingPlan, cfg: &HogConfig) -> Result<TargetBatch> {
    cfg.validate(patch_size)?;
    let grid = patchify(image, patch_size)?;
    check_plan(&grid, plan)?;
    let (gx, gy) = gradients(image);
    let w = image.width;
    let span = if cfg.signed {
        std::f64::consts::TAU
    } else {
        std::f64::consts::PI
    };
    let bin_width = span / cfg.n_bins as f64;
    let cells = patch_size / cfg.cell_size;
    let out = plan
        .masked
        .iter()
        .map(|&i| {
            let (pr, pc) = (i / grid.cols, i % grid.cols);
            let mut v = vec![0.0f64; cells * cells * cfg.n_bins];
            for cy in 0..cells {
                for cx in 0..cells {
                    let hist = &mut v[(cy * cells + cx) * cfg.n_bins..][..cfg.n_bins];
                    for yy in 0..cfg.cell_size {
                        for xx in 0..cfg.cell_size {
                            let y = pr * patch_size + cy * cfg.cell_size + yy;
                            let x = pc * patch_size + cx * cfg.cell_size + xx;
                            let (dx, dy) = (gx[y * w + x] as f64, gy[y * w + x] as f64);
                            let mag = (dx * dx + dy * dy).sqrt();
                            if mag == 0.0 {
                                continue;
                            }
                            let angle = dy.atan2(dx).rem_euclid(span);
                            let pos = angle / bin_width;
                            let lo = pos.floor();
                            let frac = pos - lo;
                            let b0 = (lo as usize) % cfg.n_bins;
                            let b1 = (b0 + 1) % cfg.n_bins;
                            hist[b0] += mag * (1.0 - frac);
                            hist[b1] += mag * frac;
                        }
                    }
                }
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter().map(|x| (x / (norm + cfg.epsilon)) as f32).collect()
        })
        .collect();
    Ok(TargetBatch::Hog(out))
}

/// Index of the nearest codebook row (squared Euclidean, ties to the lowest index).
pub fn nearest_code(codebook: &Mat<f32>, v: &[f32]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for k in 0..codebook.rows {
        let d: f64 = codebook
            .row(k)
            .iter()
            .zip(v)
            .map(|(&a, &b)| {
                let t = a as f64 - b as f64;
                t * t
            })
            .sum();
        if d < best_d {
            best_d = d;
            best = k;
        }
    }
    best
}

/// Discrete code of each masked patch under a k-means codebook.
pub fn codebook_target(image: &Image, patch_size: usize, plan: &MaskingPlan, codebook: &Mat<f32>) -> Result<TargetBatch> {
    if codebook.rows == 0 {
        return Err(Error::Config("codebook is empty".into()));
    }
    let grid = patchify(image, patch_size)?;
    check_plan(&grid, plan)?;
    if codebook.cols != grid.patch_dim() {
        return Err(Error::Config(format!(
            "codebook width {} does not match patch dimension {}",
            codebook.cols,
            grid.patch_dim()
        )));
    }
    let codes = plan
        .masked
        .iter()
        .map(|&i| nearest_code(codebook, &grid.patches[i]))
        .collect();
    Ok(TargetBatch::Code {
        codes,
        codebook_size: codebook.rows,
    })
}

/// Mean ℓ1 (pixel, HOG) or mean cross-entropy (codes) over every masked
/// position in the batch, plus its gradient with respect to the predictions.
pub fn masked_objective<F: Real>(predictions: &Mat<F>, targets: &TargetBatch) -> Result<(F, Mat<F>)> {
    if predictions.rows != targets.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} targets",
            predictions.rows,
            targets.len()
        )));
    }
    let mut grad = predictions.zeros_like();
    if predictions.rows == 0 {
        return Ok((F::zero(), grad));
    }
    match targets {
        TargetBatch::Pixel(t) | TargetBatch::Hog(t) => {
            let dim = t[0].len();
            if predictions.cols != dim || t.iter().any(|v| v.len() != dim) {
                return Err(Error::Shape(format!(
                    "prediction width {} does not match target width {dim}",
                    predictions.cols
                )));
            }
            let n = F::lit((predictions.rows * dim) as f64);
            let mut total = F::zero();
            for (r, tv) in t.iter().enumerate() {
                let g = grad.row_mut(r);
                for (c, (&z, &tt)) in predictions.row(r).iter().zip(tv).enumerate() {
                    let diff = z - F::lit(tt as f64);
                    total += diff.abs();
                    g[c] = if diff > F::zero() {
                        F::one() / n
                    } else if diff < F::zero() {
                        -F::one() / n
                    } else {
                        F::zero()
                    };
                }
            }
            Ok((total / n, grad))
        }
        TargetBatch::Code { codes, codebook_size } => {
            if predictions.cols != *codebook_size {
                return Err(Error::Shape(format!(
                    "{} logits per position for a {codebook_size}-entry codebook",
                    predictions.cols
                )));
            }
            let n = F::lit(predictions.rows as f64);
            let mut total = F::zero();
            for (r, &code) in codes.iter().enumerate() {
                if code >= *codebook_size {
                    return Err(Error::Shape(format!("code {code} outside codebook of {codebook_size}")));
                }
                let z = predictions.row(r);
                let max = z.iter().copied().fold(F::neg_infinity(), F::max);
                let sum: F = z.iter().map(|&v| (v - max).exp()).sum();
                let lse = max + sum.ln();
                total += lse - z[code];
                let g = grad.row_mut(r);
                for (c, &v) in z.iter().enumerate() {
                    g[c] = (v - lse).exp() / n;
                }
                g[code] -= F::one() / n;
            }
            Ok((total / n, grad))
        }
    }
}

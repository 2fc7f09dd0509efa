//! Images, patch grids, masking plans and the initial token embedding.

use rand::seq::index;

use crate::encoder::TokenStates;
use crate::error::{Error, Result};
use crate::nn::{join, trunc_normal, Linear, Params};
use crate::rng::Rng;
use crate::tensor::{Mat, Real};

/// Row-major, channel-interleaved image with values nominally in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub pixels: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, pixels: Vec<f32>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::Shape(format!("channels must be 1 or 3, got {channels}")));
        }
        if pixels.len() != height * width * channels {
            return Err(Error::Shape(format!(
                "{height}x{width}x{channels} image needs {} values, got {}",
                height * width * channels,
                pixels.len()
            )));
        }
        if let Some(i) = pixels.iter().position(|v| !v.is_finite()) {
            return Err(Error::Shape(format!("pixel value {i} is not finite")));
        }
        Ok(Self {
            height,
            width,
            channels,
            pixels,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Self {
        Self {
            height,
            width,
            channels,
            pixels: vec![value; height * width * channels],
        }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.pixels[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f32) {
        self.pixels[(y * self.width + x) * self.channels + c] = v;
    }

    /// Luma (0.299, 0.587, 0.114) for RGB, identity for grayscale.
    pub fn luma(&self) -> Vec<f32> {
        match self.channels {
            1 => self.pixels.clone(),
            _ => self
                .pixels
                .chunks_exact(3)
                .map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
                .collect(),
        }
    }
}

/// Non-overlapping square patches of an image in grid order.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchGrid {
    pub patch_size: usize,
    pub rows: usize,
    pub cols: usize,
    pub channels: usize,
    /// `N × patch_size²·channels`, patch `i` is grid cell `(i / cols, i % cols)`.
    pub patches: Vec<Vec<f32>>,
}

impl PatchGrid {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }
}

pub fn patchify(image: &Image, patch_size: usize) -> Result<PatchGrid> {
    if patch_size == 0 || image.height % patch_size != 0 || image.width % patch_size != 0 {
        return Err(Error::Shape(format!(
            "{}x{} image is not divisible into {patch_size}-pixel patches",
            image.height, image.width
        )));
    }
    let rows = image.height / patch_size;
    let cols = image.width / patch_size;
    let c = image.channels;
    let mut patches = Vec::with_capacity(rows * cols);
    for pr in 0..rows {
        for pc in 0..cols {
            let mut v = Vec::with_capacity(patch_size * patch_size * c);
            for y in 0..patch_size {
                let start = ((pr * patch_size + y) * image.width + pc * patch_size) * c;
                v.extend_from_slice(&image.pixels[start..start + patch_size * c]);
            }
            patches.push(v);
        }
    }
    Ok(PatchGrid {
        patch_size,
        rows,
        cols,
        channels: c,
        patches,
    })
}

pub fn unpatchify(grid: &PatchGrid) -> Image {
    let ps = grid.patch_size;
    let c = grid.channels;
    let (h, w) = (grid.rows * ps, grid.cols * ps);
    let mut pixels = vec![0.0; h * w * c];
    for (i, patch) in grid.patches.iter().enumerate() {
        let (pr, pc) = (i / grid.cols, i % grid.cols);
        for y in 0..ps {
            let start = ((pr * ps + y) * w + pc * ps) * c;
            pixels[start..start + ps * c].copy_from_slice(&patch[y * ps * c..(y + 1) * ps * c]);
        }
    }
    Image {
        height: h,
        width: w,
        channels: c,
        pixels,
    }
}

/// Partition of patch positions into retained image tokens and mask tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskingPlan {
    pub n_total: usize,
    pub retained: Vec<usize>,
    pub masked: Vec<usize>,
    pub mask_ratio: f64,
}

impl MaskingPlan {
    /// Every patch retained, nothing masked.
    pub fn full(n_total: usize) -> Self {
        Self {
            n_total,
            retained: (0..n_total).collect(),
            masked: Vec::new(),
            mask_ratio: 0.0,
        }
    }
}

/// `round(ratio·n)` with halves rounded up.
pub fn mask_count(n_total: usize, mask_ratio: f64) -> usize {
    ((mask_ratio * n_total as f64 + 0.5).floor() as usize).min(n_total)
}

fn check_ratio(n_total: usize, mask_ratio: f64) -> Result<()> {
    if n_total == 0 {
        return Err(Error::Config("masking plan needs at least one patch".into()));
    }
    if !(0.0..=1.0).contains(&mask_ratio) {
        return Err(Error::Config(format!("mask ratio {mask_ratio} outside [0, 1]")));
    }
    Ok(())
}

/// Uniformly random disjoint split with `round(ratio·n)` masked positions.
pub fn sample_masking_plan(n_total: usize, mask_ratio: f64, rng: &mut Rng) -> Result<MaskingPlan> {
    check_ratio(n_total, mask_ratio)?;
    let n_mask = mask_count(n_total, mask_ratio);
    let mut is_masked = vec![false; n_total];
    for i in index::sample(rng, n_total, n_mask) {
        is_masked[i] = true;
    }
    let (masked, retained): (Vec<usize>, Vec<usize>) = (0..n_total).partition(|&i| is_masked[i]);
    Ok(MaskingPlan {
        n_total,
        retained,
        masked,
        mask_ratio,
    })
}

/// Experimental overlap variant: the masked set is drawn independently of the
/// retained set, so a position may appear in both.
pub fn sample_overlapping_plan(n_total: usize, mask_ratio: f64, rng: &mut Rng) -> Result<MaskingPlan> {
    check_ratio(n_total, mask_ratio)?;
    let n_mask = mask_count(n_total, mask_ratio);
    let mut retained: Vec<usize> = index::sample(rng, n_total, n_total - n_mask).into_vec();
    let mut masked: Vec<usize> = index::sample(rng, n_total, n_mask).into_vec();
    retained.sort_unstable();
    masked.sort_unstable();
    Ok(MaskingPlan {
        n_total,
        retained,
        masked,
        mask_ratio,
    })
}

/// Patch projection, absolute position table, the shared `[MASK]` embedding
/// and the position-free `[PROXY]` embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingParams<F> {
    pub patch_projection: Linear<F>,
    pub positional: Mat<F>,
    pub mask: Vec<F>,
    pub proxy: Mat<F>,
}

impl<F: Real> EmbeddingParams<F> {
    pub fn init(rng: &mut Rng, patch_dim: usize, n_positions: usize, dim: usize, proxies: usize) -> Self {
        Self {
            patch_projection: Linear::init(rng, patch_dim, dim),
            positional: trunc_normal(rng, n_positions, dim, 0.02),
            mask: trunc_normal(rng, 1, dim, 0.02).data,
            proxy: trunc_normal(rng, proxies, dim, 0.02),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            patch_projection: self.patch_projection.zeros_like(),
            positional: self.positional.zeros_like(),
            mask: vec![F::zero(); self.mask.len()],
            proxy: self.proxy.zeros_like(),
        }
    }

    pub fn dim(&self) -> usize {
        self.mask.len()
    }
}

impl<F: Real> Params<F> for EmbeddingParams<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[F])) {
        self.patch_projection.visit(&join(prefix, "patch_proj"), f);
        let p = &self.positional;
        f(&join(prefix, "pos"), &[p.rows, p.cols], &p.data);
        f(&join(prefix, "mask"), &[self.mask.len()], &self.mask);
        let x = &self.proxy;
        f(&join(prefix, "proxy"), &[x.rows, x.cols], &x.data);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [F])) {
        self.patch_projection.visit_mut(&join(prefix, "patch_proj"), f);
        let p = &mut self.positional;
        f(&join(prefix, "pos"), &[p.rows, p.cols], &mut p.data);
        let n = self.mask.len();
        f(&join(prefix, "mask"), &[n], &mut self.mask);
        let x = &mut self.proxy;
        f(&join(prefix, "proxy"), &[x.rows, x.cols], &mut x.data);
    }
}

/// What the embedding backward pass needs.
#[derive(Debug, Clone)]
pub struct EmbedCache<F> {
    patch_inputs: Mat<F>,
    retained: Vec<Vec<usize>>,
    masked: Vec<Vec<usize>>,
}

/// Checks that every plan matches its grid and that all plans in the batch
/// share their retained/masked cardinalities.
pub fn check_batch(grids: &[PatchGrid], plans: &[MaskingPlan]) -> Result<(usize, usize)> {
    if grids.len() != plans.len() || grids.is_empty() {
        return Err(Error::Shape(format!(
            "batch has {} grids and {} plans",
            grids.len(),
            plans.len()
        )));
    }
    let (ni, nm) = (plans[0].retained.len(), plans[0].masked.len());
    for (g, p) in grids.iter().zip(plans) {
        if p.n_total != g.len() {
            return Err(Error::Shape(format!(
                "plan covers {} patches but grid has {}",
                p.n_total,
                g.len()
            )));
        }
        if p.retained.len() != ni || p.masked.len() != nm {
            return Err(Error::Shape("plans in one batch must share token counts".into()));
        }
        if g.patch_dim() != grids[0].patch_dim() {
            return Err(Error::Shape("grids in one batch must share patch geometry".into()));
        }
    }
    Ok((ni, nm))
}

/// Layer-0 token states for a batch.
///
/// Image rows are `projection(patch) + pos[position]`, mask rows are
/// `mask + pos[position]`, proxy rows are the proxy embeddings alone.
pub fn embed_tokens<F: Real>(
    grids: &[PatchGrid],
    plans: &[MaskingPlan],
    params: &EmbeddingParams<F>,
) -> Result<(TokenStates<F>, EmbedCache<F>)> {
    let (ni, nm) = check_batch(grids, plans)?;
    let batch = grids.len();
    let d = params.dim();
    let pd = grids[0].patch_dim();
    if pd != params.patch_projection.in_dim() {
        return Err(Error::Config(format!(
            "patch dimension {pd} does not match projection input {}",
            params.patch_projection.in_dim()
        )));
    }
    let n_pos = params.positional.rows;
    for p in plans {
        if let Some(&bad) = p.retained.iter().chain(&p.masked).find(|&&i| i >= n_pos) {
            return Err(Error::Config(format!(
                "patch position {bad} outside the positional table ({n_pos} rows)"
            )));
        }
    }

    let mut patch_inputs = Mat::zeros(batch * ni, pd);
    for (b, (g, p)) in grids.iter().zip(plans).enumerate() {
        for (r, &pos) in p.retained.iter().enumerate() {
            let dst = patch_inputs.row_mut(b * ni + r);
            for (o, &v) in dst.iter_mut().zip(&g.patches[pos]) {
                *o = F::lit(v as f64);
            }
        }
    }
    let mut h_img = params.patch_projection.forward(&patch_inputs);
    for (b, p) in plans.iter().enumerate() {
        for (r, &pos) in p.retained.iter().enumerate() {
            for (o, &e) in h_img.row_mut(b * ni + r).iter_mut().zip(params.positional.row(pos)) {
                *o += e;
            }
        }
    }
    let mut h_mask = Mat::zeros(batch * nm, d);
    for (b, p) in plans.iter().enumerate() {
        for (r, &pos) in p.masked.iter().enumerate() {
            let row = h_mask.row_mut(b * nm + r);
            for c in 0..d {
                row[c] = params.mask[c] + params.positional.at(pos, c);
            }
        }
    }
    let np = params.proxy.rows;
    let mut h_proxy = Mat::zeros(batch * np, d);
    for b in 0..batch {
        for k in 0..np {
            h_proxy.row_mut(b * np + k).copy_from_slice(params.proxy.row(k));
        }
    }
    let states = TokenStates {
        batch,
        h_img,
        h_proxy,
        h_mask,
        layer_index: 0,
    };
    let cache = EmbedCache {
        patch_inputs,
        retained: plans.iter().map(|p| p.retained.clone()).collect(),
        masked: plans.iter().map(|p| p.masked.clone()).collect(),
    };
    Ok((states, cache))
}

pub fn embed_backward<F: Real>(
    params: &EmbeddingParams<F>,
    cache: &EmbedCache<F>,
    d_states: &TokenStates<F>,
    grad: &mut EmbeddingParams<F>,
) {
    let d = params.dim();
    let ni = cache.retained.first().map_or(0, Vec::len);
    let nm = cache.masked.first().map_or(0, Vec::len);
    params
        .patch_projection
        .backward(&cache.patch_inputs, &d_states.h_img, &mut grad.patch_projection);
    for (b, ret) in cache.retained.iter().enumerate() {
        for (r, &pos) in ret.iter().enumerate() {
            let src = d_states.h_img.row(b * ni + r);
            for (g, &v) in grad.positional.row_mut(pos).iter_mut().zip(src) {
                *g += v;
            }
        }
    }
    for (b, msk) in cache.masked.iter().enumerate() {
        for (r, &pos) in msk.iter().enumerate() {
            let src = d_states.h_mask.row(b * nm + r);
            for c in 0..d {
                grad.mask[c] += src[c];
                *grad.positional.at_mut(pos, c) += src[c];
            }
        }
    }
    let np = params.proxy.rows;
    for b in 0..cache.retained.len() {
        for k in 0..np {
            let src = d_states.h_proxy.row(b * np + k);
            for (g, &v) in grad.proxy.row_mut(k).iter_mut().zip(src) {
                *g += v;
            }
        }
    }
}

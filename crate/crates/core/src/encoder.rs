//! Dual-path transformer blocks.
//!
//! In proxy mode each layer first runs a standard pre-norm ViT block over the
//! joint `[IMG ‖ PROXY]` sequence (compression), then lets the mask tokens
//! cross-attend to `[PROXY' ‖ MASK]` (reconstruction). Mask tokens are never
//! an input of the compression path, so nothing flows from `[MASK]` back into
//! image or proxy states. Vanilla mode runs one joint block over
//! `[IMG ‖ MASK]` and leaves proxy rows untouched.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{join, Attention, AttentionCache, LayerNorm, LayerNormCache, Linear, Mlp, MlpCache, Params, Segments};
use crate::patchify::MaskingPlan;
use crate::rng::Rng;
use crate::tensor::{Mat, Real};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Proxy,
    Vanilla,
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Proxy => "proxy",
            Mode::Vanilla => "vanilla",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    pub proxy_count: usize,
    pub mode: Mode,
    /// Maximum stochastic-depth rate, reached at the last layer.
    pub drop_path: f64,
    pub record_attention: bool,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::Config("depth must be at least 1".into()));
        }
        if self.heads == 0 || self.dim == 0 || self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "dim {} must be a positive multiple of heads {}",
                self.dim, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.drop_path) {
            return Err(Error::Config(format!("drop_path {} outside [0, 1)", self.drop_path)));
        }
        Ok(())
    }

    /// Per-layer stochastic-depth rate, linear from 0 to `drop_path`.
    pub fn drop_rate(&self, layer: usize) -> f64 {
        if self.depth <= 1 {
            self.drop_path
        } else {
            self.drop_path * layer as f64 / (self.depth - 1) as f64
        }
    }
}

/// Hidden states of a batch, each block stacked sample-major.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenStates<F> {
    pub batch: usize,
    pub h_img: Mat<F>,
    pub h_proxy: Mat<F>,
    pub h_mask: Mat<F>,
    pub layer_index: usize,
}

impl<F: Real> TokenStates<F> {
    pub fn n_img(&self) -> usize {
        self.h_img.rows / self.batch.max(1)
    }

    pub fn n_proxy(&self) -> usize {
        self.h_proxy.rows / self.batch.max(1)
    }

    pub fn n_mask(&self) -> usize {
        self.h_mask.rows / self.batch.max(1)
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            batch: self.batch,
            h_img: self.h_img.zeros_like(),
            h_proxy: self.h_proxy.zeros_like(),
            h_mask: self.h_mask.zeros_like(),
            layer_index: self.layer_index,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.h_img.is_finite() && self.h_proxy.is_finite() && self.h_mask.is_finite()
    }
}

// ---------------------------------------------------------------------------
// Parameters

/// Self-attention + MLP half of a block (also the whole vanilla block).
#[derive(Debug, Clone, PartialEq)]
pub struct CompressionParams<F> {
    pub norm1: LayerNorm<F>,
    pub attn: Attention<F>,
    pub norm2: LayerNorm<F>,
    pub mlp: Mlp<F>,
}

/// Cross-attention + MLP half of a proxy block; only needed for pre-training.
#[derive(Debug, Clone, PartialEq)]
pub struct ReconstructionParams<F> {
    pub norm3: LayerNorm<F>,
    pub cross_attn: Attention<F>,
    pub norm4: LayerNorm<F>,
    pub mlp2: Mlp<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProxyBlockParams<F> {
    pub compression: CompressionParams<F>,
    pub reconstruction: Option<ReconstructionParams<F>>,
}

pub const MLP_RATIO: usize = 4;

impl<F: Real> CompressionParams<F> {
    pub fn init(rng: &mut Rng, dim: usize, heads: usize) -> Self {
        Self {
            norm1: LayerNorm::new(dim),
            attn: Attention::init(rng, dim, heads),
            norm2: LayerNorm::new(dim),
            mlp: Mlp::init(rng, dim, dim * MLP_RATIO),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let d = self.norm1.gamma.len();
        Self {
            norm1: LayerNorm::zeros(d),
            attn: self.attn.zeros_like(),
            norm2: LayerNorm::zeros(d),
            mlp: self.mlp.zeros_like(),
        }
    }
}

impl<F: Real> ReconstructionParams<F> {
    pub fn init(rng: &mut Rng, dim: usize, heads: usize) -> Self {
        Self {
            norm3: LayerNorm::new(dim),
            cross_attn: Attention::init(rng, dim, heads),
            norm4: LayerNorm::new(dim),
            mlp2: Mlp::init(rng, dim, dim * MLP_RATIO),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let d = self.norm3.gamma.len();
        Self {
            norm3: LayerNorm::zeros(d),
            cross_attn: self.cross_attn.zeros_like(),
            norm4: LayerNorm::zeros(d),
            mlp2: self.mlp2.zeros_like(),
        }
    }
}

impl<F: Real> ProxyBlockParams<F> {
    pub fn init(rng: &mut Rng, dim: usize, heads: usize, mode: Mode) -> Self {
        let compression = CompressionParams::init(rng, dim, heads);
        let reconstruction = match mode {
            Mode::Proxy => Some(ReconstructionParams::init(rng, dim, heads)),
            Mode::Vanilla => None,
        };
        Self {
            compression,
            reconstruction,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            compression: self.compression.zeros_like(),
            reconstruction: self.reconstruction.as_ref().map(ReconstructionParams::zeros_like),
        }
    }
}

/// Parameter-name fragments that belong to the reconstruction path.
pub const RECONSTRUCTION_TENSORS: [&str; 4] = ["norm3", "cross_attn", "norm4", "mlp2"];

impl<F: Real> Params<F> for ProxyBlockParams<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[F])) {
        let c = &self.compression;
        c.norm1.visit(&join(prefix, "norm1"), f);
        c.attn.visit(&join(prefix, "attn"), f);
        c.norm2.visit(&join(prefix, "norm2"), f);
        c.mlp.visit(&join(prefix, "mlp"), f);
        if let Some(r) = &self.reconstruction {
            r.norm3.visit(&join(prefix, "norm3"), f);
            r.cross_attn.visit(&join(prefix, "cross_attn"), f);
            r.norm4.visit(&join(prefix, "norm4"), f);
            r.mlp2.visit(&join(prefix, "mlp2"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [F])) {
        let c = &mut self.compression;
        c.norm1.visit_mut(&join(prefix, "norm1"), f);
        c.attn.visit_mut(&join(prefix, "attn"), f);
        c.norm2.visit_mut(&join(prefix, "norm2"), f);
        c.mlp.visit_mut(&join(prefix, "mlp"), f);
        if let Some(r) = &mut self.reconstruction {
            r.norm3.visit_mut(&join(prefix, "norm3"), f);
            r.cross_attn.visit_mut(&join(prefix, "cross_attn"), f);
            r.norm4.visit_mut(&join(prefix, "norm4"), f);
            r.mlp2.visit_mut(&join(prefix, "mlp2"), f);
        }
    }
}

// ---------------------------------------------------------------------------
// Sequence helpers

/// Stacks per-sample `[a_b ‖ b_b]` segments.
pub fn interleave<F: Real>(a: &Mat<F>, b: &Mat<F>, batch: usize) -> Mat<F> {
    let na = a.rows / batch.max(1);
    let nb = b.rows / batch.max(1);
    let cols = a.cols.max(b.cols);
    let mut out = Mat::zeros(batch * (na + nb), cols);
    let stride = (na + nb) * cols;
    for s in 0..batch {
        let dst = &mut out.data[s * stride..(s + 1) * stride];
        dst[..na * cols].copy_from_slice(&a.data[s * na * cols..(s + 1) * na * cols]);
        dst[na * cols..].copy_from_slice(&b.data[s * nb * cols..(s + 1) * nb * cols]);
    }
    out
}

/// Inverse of [`interleave`].
pub fn deinterleave<F: Real>(x: &Mat<F>, na: usize, nb: usize, batch: usize) -> (Mat<F>, Mat<F>) {
    let cols = x.cols;
    let mut a = Mat::zeros(batch * na, cols);
    let mut b = Mat::zeros(batch * nb, cols);
    let stride = (na + nb) * cols;
    for s in 0..batch {
        let src = &x.data[s * stride..(s + 1) * stride];
        a.data[s * na * cols..(s + 1) * na * cols].copy_from_slice(&src[..na * cols]);
        b.data[s * nb * cols..(s + 1) * nb * cols].copy_from_slice(&src[na * cols..]);
    }
    (a, b)
}

/// Per-sample branch multipliers for stochastic depth: `[attn, mlp, cross_attn, mlp2]`.
pub type BranchScales<F> = [F; 4];

fn scale_branch<F: Real>(m: &mut Mat<F>, scales: Option<&[BranchScales<F>]>, which: usize) {
    let Some(scales) = scales else { return };
    let per = m.rows / scales.len().max(1);
    for (s, sc) in scales.iter().enumerate() {
        let k = sc[which];
        if k == F::one() {
            continue;
        }
        for v in &mut m.data[s * per * m.cols..(s + 1) * per * m.cols] {
            *v *= k;
        }
    }
}

// ---------------------------------------------------------------------------
// Joint (self-attention) block

#[derive(Debug, Clone)]
pub struct JointCache<F> {
    ln1: LayerNormCache<F>,
    pub attn: AttentionCache<F>,
    ln2: LayerNormCache<F>,
    mlp: MlpCache<F>,
    na: usize,
    nb: usize,
    batch: usize,
    scales: Option<Vec<BranchScales<F>>>,
}

/// Pre-norm ViT block over per-sample `[a ‖ b]`; returns the updated blocks.
fn joint_forward<F: Real>(
    a: &Mat<F>,
    b: &Mat<F>,
    batch: usize,
    p: &CompressionParams<F>,
    scales: Option<&[BranchScales<F>]>,
) -> (Mat<F>, Mat<F>, JointCache<F>) {
    let na = a.rows / batch;
    let nb = b.rows / batch;
    let n = na + nb;
    let x = interleave(a, b, batch);
    let (a1, ln1) = p.norm1.forward(&x);
    let (mut s, attn) = p.attn.forward(&a1, None, Segments { batch, queries: n, keys: n });
    scale_branch(&mut s, scales, 0);
    let mut x1 = x;
    x1.add_assign(&s);
    let (a2, ln2) = p.norm2.forward(&x1);
    let (mut m, mlp) = p.mlp.forward(&a2);
    scale_branch(&mut m, scales, 1);
    x1.add_assign(&m);
    let (oa, ob) = deinterleave(&x1, na, nb, batch);
    let cache = JointCache {
        ln1,
        attn,
        ln2,
        mlp,
        na,
        nb,
        batch,
        scales: scales.map(<[_]>::to_vec),
    };
    (oa, ob, cache)
}

fn joint_backward<F: Real>(
    p: &CompressionParams<F>,
    cache: &JointCache<F>,
    da: &Mat<F>,
    db: &Mat<F>,
    grad: &mut CompressionParams<F>,
) -> (Mat<F>, Mat<F>) {
    let scales = cache.scales.as_deref();
    let dx2 = interleave(da, db, cache.batch);
    let mut dm = dx2.clone();
    scale_branch(&mut dm, scales, 1);
    let da2 = p.mlp.backward(&cache.mlp, &dm, &mut grad.mlp);
    let mut dx1 = dx2;
    dx1.add_assign(&p.norm2.backward(&cache.ln2, &da2, &mut grad.norm2));
    let mut ds = dx1.clone();
    scale_branch(&mut ds, scales, 0);
    let (da1, _) = p.attn.backward(&cache.attn, &ds, &mut grad.attn);
    dx1.add_assign(&p.norm1.backward(&cache.ln1, &da1, &mut grad.norm1));
    deinterleave(&dx1, cache.na, cache.nb, cache.batch)
}

/// Vanilla MIM layer: joint self-attention + MLP over `[IMG ‖ MASK]`.
pub fn vanilla_block_forward<F: Real>(
    h_img: &Mat<F>,
    h_mask: &Mat<F>,
    batch: usize,
    p: &CompressionParams<F>,
    scales: Option<&[BranchScales<F>]>,
) -> (Mat<F>, Mat<F>, JointCache<F>) {
    joint_forward(h_img, h_mask, batch, p, scales)
}

/// Compression: self-attention + MLP over `[IMG ‖ PROXY]`. Mask tokens are not
/// an argument.
pub fn compression_forward<F: Real>(
    h_img: &Mat<F>,
    h_proxy: &Mat<F>,
    batch: usize,
    p: &CompressionParams<F>,
    scales: Option<&[BranchScales<F>]>,
) -> (Mat<F>, Mat<F>, JointCache<F>) {
    joint_forward(h_img, h_proxy, batch, p, scales)
}

pub fn joint_block_backward<F: Real>(
    p: &CompressionParams<F>,
    cache: &JointCache<F>,
    da: &Mat<F>,
    db: &Mat<F>,
    grad: &mut CompressionParams<F>,
) -> (Mat<F>, Mat<F>) {
    joint_backward(p, cache, da, db, grad)
}

// ---------------------------------------------------------------------------
// Reconstruction (cross-attention) half

#[derive(Debug, Clone)]
pub struct ReconstructionCache<F> {
    ln3: LayerNormCache<F>,
    pub attn: AttentionCache<F>,
    ln4: LayerNormCache<F>,
    mlp: MlpCache<F>,
    n_proxy: usize,
    n_mask: usize,
    batch: usize,
    scales: Option<Vec<BranchScales<F>>>,
}

fn query_rows(batch: usize, n_proxy: usize, n_mask: usize) -> Vec<usize> {
    (0..batch)
        .flat_map(|b| (0..n_mask).map(move |i| b * (n_proxy + n_mask) + n_proxy + i))
        .collect()
}

/// Mask tokens query `[PROXY' ‖ MASK]` (keys and values), then an MLP. The
/// proxy states are read-only here.
pub fn reconstruction_forward<F: Real>(
    h_mask: &Mat<F>,
    h_proxy_next: &Mat<F>,
    batch: usize,
    p: &ReconstructionParams<F>,
    scales: Option<&[BranchScales<F>]>,
) -> (Mat<F>, ReconstructionCache<F>) {
    let n_mask = h_mask.rows / batch;
    let n_proxy = h_proxy_next.rows / batch;
    let kv = interleave(h_proxy_next, h_mask, batch);
    let (kvn, ln3) = p.norm3.forward(&kv);
    let qn = kvn.gather_rows(&query_rows(batch, n_proxy, n_mask));
    let seg = Segments {
        batch,
        queries: n_mask,
        keys: n_proxy + n_mask,
    };
    let (mut c, attn) = p.cross_attn.forward(&qn, Some(&kvn), seg);
    scale_branch(&mut c, scales, 2);
    let mut y = h_mask.clone();
    y.add_assign(&c);
    let (a4, ln4) = p.norm4.forward(&y);
    let (mut m, mlp) = p.mlp2.forward(&a4);
    scale_branch(&mut m, scales, 3);
    y.add_assign(&m);
    let cache = ReconstructionCache {
        ln3,
        attn,
        ln4,
        mlp,
        n_proxy,
        n_mask,
        batch,
        scales: scales.map(<[_]>::to_vec),
    };
    (y, cache)
}

/// Returns `(dL/dh_mask, dL/dh_proxy_next)`.
pub fn reconstruction_backward<F: Real>(
    p: &ReconstructionParams<F>,
    cache: &ReconstructionCache<F>,
    dy: &Mat<F>,
    grad: &mut ReconstructionParams<F>,
) -> (Mat<F>, Mat<F>) {
    let scales = cache.scales.as_deref();
    let mut dm = dy.clone();
    scale_branch(&mut dm, scales, 3);
    let da4 = p.mlp2.backward(&cache.mlp, &dm, &mut grad.mlp2);
    let mut dy1 = dy.clone();
    dy1.add_assign(&p.norm4.backward(&cache.ln4, &da4, &mut grad.norm4));
    let mut dc = dy1.clone();
    scale_branch(&mut dc, scales, 2);
    let (dqn, dkvn) = p.cross_attn.backward(&cache.attn, &dc, &mut grad.cross_attn);
    let mut dkvn = dkvn.expect("cross-attention returns key gradients");
    for (r, &row) in query_rows(cache.batch, cache.n_proxy, cache.n_mask).iter().enumerate() {
        for (o, &g) in dkvn.row_mut(row).iter_mut().zip(dqn.row(r)) {
            *o += g;
        }
    }
    let dkv = p.norm3.backward(&cache.ln3, &dkvn, &mut grad.norm3);
    let (dproxy, dmask_kv) = deinterleave(&dkv, cache.n_proxy, cache.n_mask, cache.batch);
    dy1.add_assign(&dmask_kv);
    (dy1, dproxy)
}

// ---------------------------------------------------------------------------
// Attention records

/// Softmax matrices of one layer for one sample, per head.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerAttention {
    /// Rows and columns follow the self-attention sequence: `[IMG ‖ PROXY]` in
    /// proxy mode, `[IMG ‖ MASK]` in vanilla mode.
    pub self_attn: Vec<Mat<f64>>,
    /// Rows are mask queries, columns `[PROXY ‖ MASK]`; empty in vanilla mode.
    pub cross_attn: Vec<Mat<f64>>,
}

/// Attention captured during one forward pass of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionRecord {
    pub mode: Mode,
    pub n_img: usize,
    pub n_proxy: usize,
    pub n_mask: usize,
    /// Patch position of each image token row.
    pub retained: Vec<usize>,
    /// Patch position of each mask token row.
    pub masked: Vec<usize>,
    pub layers: Vec<LayerAttention>,
}

impl AttentionRecord {
    pub fn heads(&self) -> usize {
        self.layers.first().map_or(0, |l| l.self_attn.len())
    }
}

fn probs_for_sample<F: Real>(cache: &AttentionCache<F>, sample: usize, heads: usize) -> Vec<Mat<f64>> {
    cache.probs[sample * heads..(sample + 1) * heads]
        .iter()
        .map(|m| m.cast())
        .collect()
}

// ---------------------------------------------------------------------------
// Encoder stack

#[derive(Debug, Clone)]
enum LayerCache<F> {
    Proxy {
        compression: JointCache<F>,
        reconstruction: Option<ReconstructionCache<F>>,
    },
    Vanilla(JointCache<F>),
}

#[derive(Debug, Clone)]
pub struct EncoderCache<F> {
    layers: Vec<LayerCache<F>>,
    final_ln: [LayerNormCache<F>; 3],
    batch: usize,
}

#[derive(Debug, Clone, Default)]
pub struct ForwardOptions<'a, F> {
    pub record_attention: bool,
    /// Keep the (pre-final-norm) states after the embedding and every layer.
    pub keep_hidden: bool,
    /// `[layer][sample]` stochastic-depth multipliers; `None` at inference.
    pub drop_path: Option<&'a [Vec<BranchScales<F>>]>,
}

#[derive(Debug, Clone)]
pub struct EncoderOutput<F> {
    /// Final states after the shared final layer norm.
    pub states: TokenStates<F>,
    pub records: Vec<AttentionRecord>,
    /// `hidden[l]` = states entering layer `l` (so `hidden[depth]` is the last
    /// block output before the final norm). Empty unless requested.
    pub hidden: Vec<TokenStates<F>>,
}

/// Runs the layer stack; in proxy mode the reconstruction of layer `i` reads
/// the proxy states produced by the compression of the same layer.
pub fn encoder_forward<F: Real>(
    states: TokenStates<F>,
    config: &EncoderConfig,
    blocks: &[ProxyBlockParams<F>],
    final_norm: &LayerNorm<F>,
    plans: &[MaskingPlan],
    opts: &ForwardOptions<'_, F>,
) -> Result<(EncoderOutput<F>, EncoderCache<F>)> {
    if blocks.len() != config.depth {
        return Err(Error::Config(format!(
            "encoder depth {} but {} layer parameter sets",
            config.depth,
            blocks.len()
        )));
    }
    if let Some(dp) = opts.drop_path {
        if dp.len() != config.depth || dp.iter().any(|l| l.len() != states.batch) {
            return Err(Error::Config("drop-path scales do not match depth × batch".into()));
        }
    }
    let batch = states.batch;
    let heads = config.heads;
    let (n_img, n_proxy, n_mask) = (states.n_img(), states.n_proxy(), states.n_mask());
    let mut records: Vec<AttentionRecord> = if opts.record_attention {
        (0..batch)
            .map(|b| AttentionRecord {
                mode: config.mode,
                n_img,
                n_proxy,
                n_mask,
                retained: plans.get(b).map(|p| p.retained.clone()).unwrap_or_default(),
                masked: plans.get(b).map(|p| p.masked.clone()).unwrap_or_default(),
                layers: Vec::with_capacity(config.depth),
            })
            .collect()
    } else {
        Vec::new()
    };
    let mut hidden = Vec::new();
    let mut layers = Vec::with_capacity(config.depth);
    let mut cur = states;

    for (l, block) in blocks.iter().enumerate() {
        if opts.keep_hidden {
            hidden.push(cur.clone());
        }
        let scales = opts.drop_path.map(|dp| dp[l].as_slice());
        match config.mode {
            Mode::Proxy => {
                let (img, proxy, comp) =
                    compression_forward(&cur.h_img, &cur.h_proxy, batch, &block.compression, scales);
                let (mask, recon) = match &block.reconstruction {
                    Some(r) => {
                        let (m, c) = reconstruction_forward(&cur.h_mask, &proxy, batch, r, scales);
                        (m, Some(c))
                    }
                    None if n_mask == 0 => (cur.h_mask.clone(), None),
                    None => {
                        return Err(Error::Config(
                            "reconstruction path was stripped; mask tokens cannot be processed".into(),
                        ))
                    }
                };
                for (b, rec) in records.iter_mut().enumerate() {
                    rec.layers.push(LayerAttention {
                        self_attn: probs_for_sample(&comp.attn, b, heads),
                        cross_attn: recon
                            .as_ref()
                            .map(|c| probs_for_sample(&c.attn, b, heads))
                            .unwrap_or_default(),
                    });
                }
                layers.push(LayerCache::Proxy {
                    compression: comp,
                    reconstruction: recon,
                });
                cur = TokenStates {
                    batch,
                    h_img: img,
                    h_proxy: proxy,
                    h_mask: mask,
                    layer_index: l + 1,
                };
            }
            Mode::Vanilla => {
                let (img, mask, joint) =
                    vanilla_block_forward(&cur.h_img, &cur.h_mask, batch, &block.compression, scales);
                for (b, rec) in records.iter_mut().enumerate() {
                    rec.layers.push(LayerAttention {
                        self_attn: probs_for_sample(&joint.attn, b, heads),
                        cross_attn: Vec::new(),
                    });
                }
                layers.push(LayerCache::Vanilla(joint));
                cur = TokenStates {
                    batch,
                    h_img: img,
                    h_proxy: cur.h_proxy,
                    h_mask: mask,
                    layer_index: l + 1,
                };
            }
        }
    }
    if opts.keep_hidden {
        hidden.push(cur.clone());
    }
    let (img, c_img) = final_norm.forward(&cur.h_img);
    let (proxy, c_proxy) = final_norm.forward(&cur.h_proxy);
    let (mask, c_mask) = final_norm.forward(&cur.h_mask);
    let out = EncoderOutput {
        states: TokenStates {
            batch,
            h_img: img,
            h_proxy: proxy,
            h_mask: mask,
            layer_index: cur.layer_index,
        },
        records,
        hidden,
    };
    let cache = EncoderCache {
        layers,
        final_ln: [c_img, c_proxy, c_mask],
        batch,
    };
    Ok((out, cache))
}

/// Back-propagates gradients of the final states; returns gradients of the
/// layer-0 states and accumulates parameter gradients.
pub fn encoder_backward<F: Real>(
    blocks: &[ProxyBlockParams<F>],
    final_norm: &LayerNorm<F>,
    cache: &EncoderCache<F>,
    d_final: &TokenStates<F>,
    grad_blocks: &mut [ProxyBlockParams<F>],
    grad_final: &mut LayerNorm<F>,
) -> TokenStates<F> {
    let mut d_img = final_norm.backward(&cache.final_ln[0], &d_final.h_img, grad_final);
    let mut d_proxy = final_norm.backward(&cache.final_ln[1], &d_final.h_proxy, grad_final);
    let mut d_mask = final_norm.backward(&cache.final_ln[2], &d_final.h_mask, grad_final);
    for (l, layer) in cache.layers.iter().enumerate().rev() {
        let block = &blocks[l];
        let grad = &mut grad_blocks[l];
        match layer {
            LayerCache::Proxy {
                compression,
                reconstruction,
            } => {
                if let (Some(rc), Some(rp)) = (reconstruction, &block.reconstruction) {
                    let rg = grad
                        .reconstruction
                        .as_mut()
                        .expect("gradient mirrors parameter structure");
                    let (dm, dp) = reconstruction_backward(rp, rc, &d_mask, rg);
                    d_mask = dm;
                    d_proxy.add_assign(&dp);
                }
                let (di, dp) = joint_backward(&block.compression, compression, &d_img, &d_proxy, &mut grad.compression);
                d_img = di;
                d_proxy = dp;
            }
            LayerCache::Vanilla(joint) => {
                let (di, dm) = joint_backward(&block.compression, joint, &d_img, &d_mask, &mut grad.compression);
                d_img = di;
                d_mask = dm;
            }
        }
    }
    TokenStates {
        batch: cache.batch,
        h_img: d_img,
        h_proxy: d_proxy,
        h_mask: d_mask,
        layer_index: 0,
    }
}

/// Linear prediction head applied to the final-normed mask states.
pub fn prediction_head<F: Real>(h_mask_final: &Mat<F>, head: &Linear<F>) -> Result<Mat<F>> {
    if h_mask_final.cols != head.in_dim() {
        return Err(Error::Config(format!(
            "head expects width {} but mask states have {}",
            head.in_dim(),
            h_mask_final.cols
        )));
    }
    Ok(head.forward(h_mask_final))
}

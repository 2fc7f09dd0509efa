//! Layer primitives with explicit forward caches and hand-derived backward
//! passes: layer norm, linear maps, GELU MLPs and segmented multi-head
//! attention over batched token matrices.

use rand_distr::{Distribution, Normal};

use crate::rng::Rng;
use crate::tensor::{matmul, matmul_acc, Mat, Real};

pub const LN_EPS: f64 = 1e-6;

/// Walks named parameter tensors in a fixed order.
pub trait Params<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[F]));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [F]));
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Truncated normal (±2 std) used for every projection weight.
pub fn trunc_normal<F: Real>(rng: &mut Rng, rows: usize, cols: usize, std: f64) -> Mat<F> {
    let normal = Normal::new(0.0, std).expect("valid std");
    Mat::from_fn(rows, cols, |_, _| loop {
        let v: f64 = normal.sample(rng);
        if v.abs() <= 2.0 * std {
            break F::lit(v);
        }
    })
}

// ---------------------------------------------------------------------------
// Linear

#[derive(Debug, Clone, PartialEq)]
pub struct Linear<F> {
    /// `in × out`; `y = x·W + b`.
    pub weight: Mat<F>,
    pub bias: Vec<F>,
}

impl<F: Real> Linear<F> {
    pub fn init(rng: &mut Rng, fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: trunc_normal(rng, fan_in, fan_out, 0.02),
            bias: vec![F::zero(); fan_out],
        }
    }

    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: Mat::zeros(fan_in, fan_out),
            bias: vec![F::zero(); fan_out],
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.rows
    }

    pub fn out_dim(&self) -> usize {
        self.weight.cols
    }

    pub fn forward(&self, x: &Mat<F>) -> Mat<F> {
        let mut y = Mat::zeros(x.rows, self.out_dim());
        for r in 0..y.rows {
            y.row_mut(r).copy_from_slice(&self.bias);
        }
        matmul_acc(x, false, &self.weight, false, &mut y, F::one());
        y
    }

    /// Accumulates parameter gradients into `grad` and returns `dL/dx`.
    pub fn backward(&self, x: &Mat<F>, dy: &Mat<F>, grad: &mut Linear<F>) -> Mat<F> {
        matmul_acc(x, true, dy, false, &mut grad.weight, F::one());
        for r in 0..dy.rows {
            for (g, &d) in grad.bias.iter_mut().zip(dy.row(r)) {
                *g += d;
            }
        }
        matmul(dy, false, &self.weight, true)
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.in_dim(), self.out_dim())
    }
}

impl<F: Real> Params<F> for Linear<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[F])) {
        f(&join(prefix, "weight"), &[self.weight.rows, self.weight.cols], &self.weight.data);
        f(&join(prefix, "bias"), &[self.bias.len()], &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [F])) {
        let shape = [self.weight.rows, self.weight.cols];
        f(&join(prefix, "weight"), &shape, &mut self.weight.data);
        let n = self.bias.len();
        f(&join(prefix, "bias"), &[n], &mut self.bias);
    }
}

// ---------------------------------------------------------------------------
// LayerNorm

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm<F> {
    pub gamma: Vec<F>,
    pub beta: Vec<F>,
}

#[derive(Debug, Clone)]
pub struct LayerNormCache<F> {
    xhat: Mat<F>,
    rstd: Vec<F>,
}

impl<F: Real> LayerNorm<F> {
    pub fn new(dim: usize) -> Self {
        Self {
            gamma: vec![F::one(); dim],
            beta: vec![F::zero(); dim],
        }
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            gamma: vec![F::zero(); dim],
            beta: vec![F::zero(); dim],
        }
    }

    pub fn forward(&self, x: &Mat<F>) -> (Mat<F>, LayerNormCache<F>) {
        let d = x.cols;
        let inv_d = F::one() / F::lit(d as f64);
        let eps = F::lit(LN_EPS);
        let mut y = Mat::zeros(x.rows, d);
        let mut xhat = Mat::zeros(x.rows, d);
        let mut rstd = Vec::with_capacity(x.rows);
        for r in 0..x.rows {
            let row = x.row(r);
            let mean = row.iter().copied().sum::<F>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() * inv_d;
            let rs = F::one() / (var + eps).sqrt();
            rstd.push(rs);
            let xh = xhat.row_mut(r);
            for c in 0..d {
                xh[c] = (row[c] - mean) * rs;
            }
            let yr = y.row_mut(r);
            let xh = xhat.row(r);
            for c in 0..d {
                yr[c] = xh[c] * self.gamma[c] + self.beta[c];
            }
        }
        (y, LayerNormCache { xhat, rstd })
    }

    pub fn backward(&self, cache: &LayerNormCache<F>, dy: &Mat<F>, grad: &mut LayerNorm<F>) -> Mat<F> {
        let d = dy.cols;
        let inv_d = F::one() / F::lit(d as f64);
        let mut dx = Mat::zeros(dy.rows, d);
        let mut dxhat = vec![F::zero(); d];
        for r in 0..dy.rows {
            let g = dy.row(r);
            let xh = cache.xhat.row(r);
            let mut sum_d = F::zero();
            let mut sum_dx = F::zero();
            for c in 0..d {
                grad.gamma[c] += g[c] * xh[c];
                grad.beta[c] += g[c];
                dxhat[c] = g[c] * self.gamma[c];
                sum_d += dxhat[c];
                sum_dx += dxhat[c] * xh[c];
            }
            let rs = cache.rstd[r];
            let out = dx.row_mut(r);
            for c in 0..d {
                out[c] = rs * (dxhat[c] - sum_d * inv_d - xh[c] * sum_dx * inv_d);
            }
        }
        dx
    }
}

impl<F: Real> Params<F> for LayerNorm<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[F])) {
        f(&join(prefix, "gamma"), &[self.gamma.len()], &self.gamma);
        f(&join(prefix, "beta"), &[self.beta.len()], &self.beta);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [F])) {
        let n = self.gamma.len();
        f(&join(prefix, "gamma"), &[n], &mut self.gamma);
        f(&join(prefix, "beta"), &[n], &mut self.beta);
    }
}

// ---------------------------------------------------------------------------
// GELU (tanh form)

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[inline]
pub fn gelu<F: Real>(x: F) -> F {
    let u = F::lit(GELU_C) * (x + F::lit(GELU_A) * x * x * x);
    F::lit(0.5) * x * (F::one() + u.tanh())
}

#[inline]
pub fn gelu_grad<F: Real>(x: F) -> F {
    let c = F::lit(GELU_C);
    let a = F::lit(GELU_A);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let half = F::lit(0.5);
    half * (F::one() + t) + half * x * (F::one() - t * t) * c * (F::one() + F::lit(3.0) * a * x * x)
}

// ---------------------------------------------------------------------------
// MLP

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<F> {
    pub fc1: Linear<F>,
    pub fc2: Linear<F>,
}

#[derive(Debug, Clone)]
pub struct MlpCache<F> {
    x: Mat<F>,
    pre: Mat<F>,
    act: Mat<F>,
}

impl<F: Real> Mlp<F> {
    pub fn init(rng: &mut Rng, dim: usize, hidden: usize) -> Self {
        Self {
            fc1: Linear::init(rng, dim, hidden),
            fc2: Linear::init(rng, hidden, dim),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            fc1: self.fc1.zeros_like(),
            fc2: self.fc2.zeros_like(),
        }
    }

    pub fn forward(&self, x: &Mat<F>) -> (Mat<F>, MlpCache<F>) {
        let pre = self.fc1.forward(x);
        let mut act = pre.clone();
        act.data.iter_mut().for_each(|v| *v = gelu(*v));
        let y = self.fc2.forward(&act);
        (
            y,
            MlpCache {
                x: x.clone(),
                pre,
                act,
            },
        )
    }

    pub fn backward(&self, cache: &MlpCache<F>, dy: &Mat<F>, grad: &mut Mlp<F>) -> Mat<F> {
        let mut dact = self.fc2.backward(&cache.act, dy, &mut grad.fc2);
        for (d, &p) in dact.data.iter_mut().zip(&cache.pre.data) {
            *d *= gelu_grad(p);
        }
        self.fc1.backward(&cache.x, &dact, &mut grad.fc1)
    }
}

impl<F: Real> Params<F> for Mlp<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[F])) {
        self.fc1.visit(&join(prefix, "fc1"), f);
        self.fc2.visit(&join(prefix, "fc2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [F])) {
        self.fc1.visit_mut(&join(prefix, "fc1"), f);
        self.fc2.visit_mut(&join(prefix, "fc2"), f);
    }
}

// ---------------------------------------------------------------------------
// Multi-head attention over per-sample segments

/// Token layout of a batched attention call: sample `b` owns query rows
/// `[b·queries, (b+1)·queries)` and key rows `[b·keys, (b+1)·keys)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segments {
    pub batch: usize,
    pub queries: usize,
    pub keys: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Attention<F> {
    pub heads: usize,
    pub q: Linear<F>,
    pub k: Linear<F>,
    pub v: Linear<F>,
    pub out: Linear<F>,
}

#[derive(Debug, Clone)]
pub struct AttentionCache<F> {
    qin: Mat<F>,
    /// `None` for self-attention (keys come from `qin`).
    kvin: Option<Mat<F>>,
    q: Mat<F>,
    k: Mat<F>,
    v: Mat<F>,
    /// Softmax matrices indexed `b * heads + h`, each `queries × keys`.
    pub probs: Vec<Mat<F>>,
    ctx: Mat<F>,
    seg: Segments,
}

impl<F: Real> Attention<F> {
    pub fn init(rng: &mut Rng, dim: usize, heads: usize) -> Self {
        Self {
            heads,
            q: Linear::init(rng, dim, dim),
            k: Linear::init(rng, dim, dim),
            v: Linear::init(rng, dim, dim),
            out: Linear::init(rng, dim, dim),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            heads: self.heads,
            q: self.q.zeros_like(),
            k: self.k.zeros_like(),
            v: self.v.zeros_like(),
            out: self.out.zeros_like(),
        }
    }

    pub fn dim(&self) -> usize {
        self.q.in_dim()
    }

    /// `kvin = None` means self-attention over `qin`.
    pub fn forward(&self, qin: &Mat<F>, kvin: Option<&Mat<F>>, seg: Segments) -> (Mat<F>, AttentionCache<F>) {
        let d = self.dim();
        let heads = self.heads;
        let dh = d / heads;
        let scale = F::one() / F::lit(dh as f64).sqrt();
        let kv_src = kvin.unwrap_or(qin);
        debug_assert_eq!(qin.rows, seg.batch * seg.queries);
        debug_assert_eq!(kv_src.rows, seg.batch * seg.keys);

        let q = self.q.forward(qin);
        let k = self.k.forward(kv_src);
        let v = self.v.forward(kv_src);
        let mut ctx = Mat::zeros(qin.rows, d);
        let mut probs = Vec::with_capacity(seg.batch * heads);
        let mut scores = vec![F::zero(); seg.keys];
        for b in 0..seg.batch {
            let q0 = b * seg.queries;
            let k0 = b * seg.keys;
            for h in 0..heads {
                let c0 = h * dh;
                let mut p = Mat::zeros(seg.queries, seg.keys);
                for i in 0..seg.queries {
                    let qi = &q.row(q0 + i)[c0..c0 + dh];
                    let mut max = F::neg_infinity();
                    for (j, s) in scores.iter_mut().enumerate() {
                        let kj = &k.row(k0 + j)[c0..c0 + dh];
                        let dot: F = qi.iter().zip(kj).map(|(&a, &b)| a * b).sum();
                        *s = dot * scale;
                        if *s > max {
                            max = *s;
                        }
                    }
                    let mut z = F::zero();
                    for s in scores.iter_mut() {
                        *s = (*s - max).exp();
                        z += *s;
                    }
                    let prow = p.row_mut(i);
                    for j in 0..seg.keys {
                        prow[j] = scores[j] / z;
                    }
                    let crow = &mut ctx.row_mut(q0 + i)[c0..c0 + dh];
                    for j in 0..seg.keys {
                        let w = p.at(i, j);
                        let vj = &v.row(k0 + j)[c0..c0 + dh];
                        for (c, &vv) in crow.iter_mut().zip(vj) {
                            *c += w * vv;
                        }
                    }
                }
                probs.push(p);
            }
        }
        let y = self.out.forward(&ctx);
        let cache = AttentionCache {
            qin: qin.clone(),
            kvin: kvin.cloned(),
            q,
            k,
            v,
            probs,
            ctx,
            seg,
        };
        (y, cache)
    }

    /// Returns `(dL/dqin, dL/dkvin)`. For self-attention the two are already
    /// summed into the first element and the second is `None`.
    pub fn backward(
        &self,
        cache: &AttentionCache<F>,
        dy: &Mat<F>,
        grad: &mut Attention<F>,
    ) -> (Mat<F>, Option<Mat<F>>) {
        let d = self.dim();
        let heads = self.heads;
        let dh = d / heads;
        let scale = F::one() / F::lit(dh as f64).sqrt();
        let seg = cache.seg;

        let dctx = self.out.backward(&cache.ctx, dy, &mut grad.out);
        let mut dq = Mat::zeros(cache.q.rows, d);
        let mut dk = Mat::zeros(cache.k.rows, d);
        let mut dv = Mat::zeros(cache.v.rows, d);
        let mut dp = vec![F::zero(); seg.keys];
        for b in 0..seg.batch {
            let q0 = b * seg.queries;
            let k0 = b * seg.keys;
            for h in 0..heads {
                let c0 = h * dh;
                let p = &cache.probs[b * heads + h];
                for i in 0..seg.queries {
                    let dci = &dctx.row(q0 + i)[c0..c0 + dh];
                    // dP = dctx · Vᵀ ; dV += Pᵀ · dctx
                    let mut dot_pd = F::zero();
                    for j in 0..seg.keys {
                        let vj = &cache.v.row(k0 + j)[c0..c0 + dh];
                        let g: F = dci.iter().zip(vj).map(|(&a, &b)| a * b).sum();
                        dp[j] = g;
                        dot_pd += g * p.at(i, j);
                        let w = p.at(i, j);
                        let dvj = &mut dv.row_mut(k0 + j)[c0..c0 + dh];
                        for (o, &g) in dvj.iter_mut().zip(dci) {
                            *o += w * g;
                        }
                    }
                    // softmax backward, then through the scaled dot product
                    for j in 0..seg.keys {
                        let ds = p.at(i, j) * (dp[j] - dot_pd) * scale;
                        if ds == F::zero() {
                            continue;
                        }
                        let kj = &cache.k.row(k0 + j)[c0..c0 + dh];
                        let dqi = &mut dq.row_mut(q0 + i)[c0..c0 + dh];
                        for (o, &kk) in dqi.iter_mut().zip(kj) {
                            *o += ds * kk;
                        }
                        let qi = &cache.q.row(q0 + i)[c0..c0 + dh];
                        let dkj = &mut dk.row_mut(k0 + j)[c0..c0 + dh];
                        for (o, &qq) in dkj.iter_mut().zip(qi) {
                            *o += ds * qq;
                        }
                    }
                }
            }
        }
        let kv_src = cache.kvin.as_ref().unwrap_or(&cache.qin);
        let mut dqin = self.q.backward(&cache.qin, &dq, &mut grad.q);
        let mut dkv = self.k.backward(kv_src, &dk, &mut grad.k);
        dkv.add_assign(&self.v.backward(kv_src, &dv, &mut grad.v));
        if cache.kvin.is_none() {
            dqin.add_assign(&dkv);
            (dqin, None)
        } else {
            (dqin, Some(dkv))
        }
    }
}

impl<F: Real> Params<F> for Attention<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[F])) {
        self.q.visit(&join(prefix, "q"), f);
        self.k.visit(&join(prefix, "k"), f);
        self.v.visit(&join(prefix, "v"), f);
        self.out.visit(&join(prefix, "out"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [F])) {
        self.q.visit_mut(&join(prefix, "q"), f);
        self.k.visit_mut(&join(prefix, "k"), f);
        self.v.visit_mut(&join(prefix, "v"), f);
        self.out.visit_mut(&join(prefix, "out"), f);
    }
}

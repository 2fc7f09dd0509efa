//! AdamW with decoupled weight decay and global-norm clipping.

use crate::error::{Error, Result};
use crate::model::{Gradients, Model};
use crate::nn::Params;

/// Decay applies to projection matrices only; biases, norms and embeddings
/// are exempt.
pub fn decays(name: &str, shape: &[usize]) -> bool {
    shape.len() == 2 && name.ends_with(".weight")
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Number of updates applied so far.
    pub t: u64,
    pub names: Vec<String>,
    pub shapes: Vec<Vec<usize>>,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl AdamW {
    pub fn new(model: &Model<f32>, betas: [f64; 2], eps: f64, weight_decay: f64) -> Self {
        let (mut names, mut shapes, mut m) = (Vec::new(), Vec::new(), Vec::new());
        model.visit("", &mut |n, s, d| {
            names.push(n.to_string());
            shapes.push(s.to_vec());
            m.push(vec![0f32; d.len()]);
        });
        Self {
            beta1: betas[0],
            beta2: betas[1],
            eps,
            weight_decay,
            t: 0,
            names,
            shapes,
            v: m.clone(),
            m,
        }
    }

    /// One update. With `lr == 0` the moments advance but parameters are
    /// left bitwise untouched.
    pub fn update(&mut self, model: &mut Model<f32>, grads: &Gradients<f32>, lr: f64) -> Result<()> {
        let mut gnames = Vec::with_capacity(self.names.len());
        let mut flat: Vec<Vec<f32>> = Vec::with_capacity(self.names.len());
        grads.visit("", &mut |n, _, d| {
            gnames.push(n.to_string());
            flat.push(d.to_vec());
        });
        if gnames != self.names {
            return Err(Error::Shape("gradient tensors do not match optimizer state".into()));
        }

        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        let mut i = 0;
        let (wd, eps) = (self.weight_decay, self.eps);
        let (ms, vs) = (&mut self.m, &mut self.v);
        let mut mismatch = None;
        model.visit_mut("", &mut |name, shape, p| {
            let (m, v, g) = (&mut ms[i], &mut vs[i], &flat[i]);
            if p.len() != g.len() {
                mismatch.get_or_insert_with(|| name.to_string());
                i += 1;
                return;
            }
            let decay = if decays(name, shape) { wd } else { 0.0 };
            for j in 0..p.len() {
                let gj = g[j] as f64;
                let mj = b1 * m[j] as f64 + (1.0 - b1) * gj;
                let vj = b2 * v[j] as f64 + (1.0 - b2) * gj * gj;
                m[j] = mj as f32;
                v[j] = vj as f32;
                if lr != 0.0 {
                    let pj = p[j] as f64;
                    let upd = (mj / bc1) / ((vj / bc2).sqrt() + eps);
                    p[j] = (pj - lr * decay * pj - lr * upd) as f32;
                }
            }
            i += 1;
        });
        match mismatch {
            Some(n) => Err(Error::Shape(format!("gradient for {n} has the wrong size"))),
            None => Ok(()),
        }
    }
}

pub fn global_norm(grads: &Gradients<f32>) -> f64 {
    let mut s = 0f64;
    grads.visit("", &mut |_, _, d| s += d.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>());
    s.sqrt()
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping; nothing is touched when it is already
/// within bounds (so an infinite threshold is a bitwise no-op).
pub fn clip_global_norm(grads: &mut Gradients<f32>, max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm.is_finite() && norm > max_norm {
        let scale = max_norm / norm;
        grads.visit_mut("", &mut |_, _, d| d.iter_mut().for_each(|v| *v = (*v as f64 * scale) as f32));
    }
    norm
}

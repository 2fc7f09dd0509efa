//! Linear probing of frozen encoder features.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::encoder::{ForwardOptions, TokenStates};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::patchify::{patchify, Image, MaskingPlan};
use crate::rng::{SeedStreams, Stream};
use crate::tensor::{matmul, Mat, Real};

/// Images per forward pass during extraction.
const CHUNK: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    /// Mean over image-token rows.
    MeanImg,
    /// One proxy row, used as a class token.
    Cls(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureSpec {
    /// Hidden state index: 0 is the embedding, `depth` the last block.
    pub layer_index: usize,
    pub pooling: Pooling,
    /// Scale each feature row to unit L2 norm.
    #[serde(default)]
    pub normalize: bool,
}

/// `round(depth · 7/12)`, the proportional counterpart of layer 7 of 12.
pub fn default_layer(depth: usize) -> usize {
    (depth as f64 * 7.0 / 12.0).round() as usize
}

impl FeatureSpec {
    pub fn for_depth(depth: usize) -> Self {
        Self { layer_index: default_layer(depth), pooling: Pooling::MeanImg, normalize: false }
    }

    pub fn validate<F>(&self, model: &Model<F>) -> Result<()> {
        let c = &model.config;
        if self.layer_index > c.depth {
            return Err(Error::Config(format!(
                "probe layer {} out of range 0..={}",
                self.layer_index, c.depth
            )));
        }
        if let Pooling::Cls(k) = self.pooling {
            if k >= c.proxy_count {
                return Err(Error::Config(format!(
                    "cls index {k} out of range: the model has {} proxy tokens",
                    c.proxy_count
                )));
            }
        }
        Ok(())
    }
}

/// Unmasked forward pass returning the hidden states entering `layer`.
pub fn hidden_states<F: Real>(model: &Model<F>, images: &[Image], layer: usize) -> Result<TokenStates<F>> {
    let c = &model.config;
    if layer > c.depth {
        return Err(Error::Config(format!("layer {layer} out of range 0..={}", c.depth)));
    }
    let grids = images
        .iter()
        .map(|im| patchify(im, c.patch_size))
        .collect::<Result<Vec<_>>>()?;
    let plans = vec![MaskingPlan::full(c.n_patches()); images.len()];
    let opts = ForwardOptions { keep_hidden: true, ..Default::default() };
    let (mut out, _) = model.forward(&grids, &plans, &opts)?;
    Ok(out.hidden.swap_remove(layer))
}

fn l2_normalize_rows<F: Real>(m: &mut Mat<F>) {
    for r in 0..m.rows {
        let row = m.row_mut(r);
        let n = row.iter().map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt();
        if n > 0.0 {
            row.iter_mut().for_each(|v| *v = F::lit(v.as_f64() / n));
        }
    }
}

/// One pooled D-vector per image.
pub fn extract_features<F: Real>(model: &Model<F>, images: &[Image], spec: &FeatureSpec) -> Result<Mat<F>> {
    spec.validate(model)?;
    let d = model.config.dim;
    let mut out = Mat::zeros(images.len(), d);
    for (ci, chunk) in images.chunks(CHUNK).enumerate() {
        let h = hidden_states(model, chunk, spec.layer_index)?;
        let (ni, np) = (h.n_img(), h.n_proxy());
        for b in 0..chunk.len() {
            let dst = out.row_mut(ci * CHUNK + b);
            match spec.pooling {
                Pooling::MeanImg => {
                    for j in 0..d {
                        let s: f64 = (0..ni).map(|t| h.h_img.at(b * ni + t, j).as_f64()).sum();
                        dst[j] = F::lit(s / ni as f64);
                    }
                }
                Pooling::Cls(k) => dst.copy_from_slice(h.h_proxy.row(b * np + k)),
            }
        }
    }
    if spec.normalize {
        l2_normalize_rows(&mut out);
    }
    Ok(out)
}

/// Every image token at `layer`, `images.len() · n_patches` rows in patch
/// order.
pub fn extract_patch_features<F: Real>(model: &Model<F>, images: &[Image], layer: usize, normalize: bool) -> Result<Mat<F>> {
    let d = model.config.dim;
    let n = model.config.n_patches();
    let mut out = Mat::zeros(images.len() * n, d);
    for (ci, chunk) in images.chunks(CHUNK).enumerate() {
        let h = hidden_states(model, chunk, layer)?;
        let start = ci * CHUNK * n * d;
        out.data[start..start + h.h_img.data.len()].copy_from_slice(&h.h_img.data);
    }
    if normalize {
        l2_normalize_rows(&mut out);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Per-dimension standardization with train-set statistics.
    pub standardize: bool,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { epochs: 50, batch_size: 1024, lr: 4e-3, weight_decay: 1e-4, standardize: true, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearClassifier {
    /// `D × C`.
    pub weight: Mat<f64>,
    pub bias: Vec<f64>,
    /// Standardization applied before the linear map.
    pub mean: Vec<f64>,
    pub inv_std: Vec<f64>,
}

impl LinearClassifier {
    fn prepare<F: Real>(&self, x: &Mat<F>) -> Mat<f64> {
        Mat::from_fn(x.rows, x.cols, |r, c| (x.at(r, c).as_f64() - self.mean[c]) * self.inv_std[c])
    }

    pub fn logits<F: Real>(&self, x: &Mat<F>) -> Mat<f64> {
        let mut z = matmul(&self.prepare(x), false, &self.weight, false);
        for r in 0..z.rows {
            z.row_mut(r).iter_mut().zip(&self.bias).for_each(|(v, b)| *v += b);
        }
        z
    }

    /// Arg-max class per row, lowest index on ties.
    pub fn predict<F: Real>(&self, x: &Mat<F>) -> Vec<usize> {
        let z = self.logits(x);
        (0..z.rows)
            .map(|r| {
                let row = z.row(r);
                (0..row.len()).fold(0, |best, c| if row[c] > row[best] { c } else { best })
            })
            .collect()
    }
}

pub fn accuracy(pred: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    pred.iter().zip(labels).filter(|(a, b)| a == b).count() as f64 / labels.len() as f64
}

fn check_labels(labels: &[usize], rows: usize, classes: usize, what: &str) -> Result<()> {
    if labels.len() != rows {
        return Err(Error::Shape(format!("{what}: {} labels for {rows} feature rows", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Data(format!("{what}: label {bad} outside 0..{classes}")));
    }
    Ok(())
}

/// Softmax regression trained with AdamW and a cosine learning rate.
pub fn train_linear<F: Real>(x: &Mat<F>, y: &[usize], classes: usize, cfg: &ProbeConfig) -> Result<LinearClassifier> {
    if classes == 0 || x.rows == 0 {
        return Err(Error::Data("probe needs at least one class and one training row".into()));
    }
    check_labels(y, x.rows, classes, "train")?;
    if !x.is_finite() {
        return Err(Error::Numeric("non-finite probe features".into()));
    }
    let (n, d) = (x.rows, x.cols);
    let (mut mean, mut inv_std) = (vec![0.0; d], vec![1.0; d]);
    if cfg.standardize {
        for c in 0..d {
            let m = (0..n).map(|r| x.at(r, c).as_f64()).sum::<f64>() / n as f64;
            let var = (0..n).map(|r| (x.at(r, c).as_f64() - m).powi(2)).sum::<f64>() / n as f64;
            mean[c] = m;
            inv_std[c] = 1.0 / (var + 1e-6).sqrt();
        }
    }
    let mut clf = LinearClassifier { weight: Mat::zeros(d, classes), bias: vec![0.0; classes], mean, inv_std };
    let xs = clf.prepare(x);
    let batch = cfg.batch_size.clamp(1, n);
    let steps_per_epoch = n.div_ceil(batch);
    let total = (cfg.epochs * steps_per_epoch).max(1);
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
    let (mut mw, mut vw) = (vec![0.0; d * classes], vec![0.0; d * classes]);
    let (mut mb, mut vb) = (vec![0.0; classes], vec![0.0; classes]);
    let streams = SeedStreams::new(cfg.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut t = 0usize;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut streams.rng(Stream::Probe, epoch as u64));
        for idx in order.chunks(batch) {
            let xb = xs.gather_rows(idx);
            let mut z = matmul(&xb, false, &clf.weight, false);
            for (r, &i) in idx.iter().enumerate() {
                let row = z.row_mut(r);
                row.iter_mut().zip(&clf.bias).for_each(|(v, b)| *v += b);
                let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let s: f64 = row.iter_mut().map(|v| {
                    *v = (*v - mx).exp();
                    *v
                }).sum();
                row.iter_mut().for_each(|v| *v /= s);
                row[y[i]] -= 1.0;
                row.iter_mut().for_each(|v| *v /= idx.len() as f64);
            }
            let gw = matmul(&xb, true, &z, false);
            let gb: Vec<f64> = (0..classes).map(|c| (0..z.rows).map(|r| z.at(r, c)).sum()).collect();
            t += 1;
            let progress = (t - 1) as f64 / (total.max(2) - 1) as f64;
            let lr = cfg.lr * 0.5 * (1.0 + (std::f64::consts::PI * progress.min(1.0)).cos());
            let (c1, c2) = (1.0 - b1.powi(t as i32), 1.0 - b2.powi(t as i32));
            let adam = |p: &mut f64, g: f64, m: &mut f64, v: &mut f64, wd: f64| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= lr * wd * *p + lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            };
            for j in 0..d * classes {
                adam(&mut clf.weight.data[j], gw.data[j], &mut mw[j], &mut vw[j], cfg.weight_decay);
            }
            for j in 0..classes {
                adam(&mut clf.bias[j], gb[j], &mut mb[j], &mut vb[j], 0.0);
            }
        }
    }
    Ok(clf)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeResult {
    pub train_accuracy: f64,
    pub eval_accuracy: f64,
    pub classes: usize,
    pub classifier: LinearClassifier,
}

pub fn linear_probe<F: Real>(
    train_x: &Mat<F>,
    train_y: &[usize],
    eval_x: &Mat<F>,
    eval_y: &[usize],
    classes: usize,
    cfg: &ProbeConfig,
) -> Result<ProbeResult> {
    check_labels(eval_y, eval_x.rows, classes, "eval")?;
    if eval_x.cols != train_x.cols {
        return Err(Error::Shape(format!(
            "train features have {} dims, eval features {}",
            train_x.cols, eval_x.cols
        )));
    }
    let clf = train_linear(train_x, train_y, classes, cfg)?;
    Ok(ProbeResult {
        train_accuracy: accuracy(&clf.predict(train_x), train_y),
        eval_accuracy: accuracy(&clf.predict(eval_x), eval_y),
        classes,
        classifier: clf,
    })
}

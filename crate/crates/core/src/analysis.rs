//! Attention diagnostics: query-conditioned maps, averaged proxy heatmaps,
//! attention distance, heatmap rendering and CSV export.

use std::io::Write;
use std::path::Path;

use crate::encoder::{AttentionRecord, ForwardOptions, Mode};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::patchify::{patchify, Image, MaskingPlan};
use crate::pnm;
use crate::tensor::{Mat, Real};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QueryKind {
    /// Patch position in the grid (row-major).
    Patch(usize),
    Proxy(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerSel {
    Index(usize),
    Last,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadSel {
    Index(usize),
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionQuery {
    pub kind: QueryKind,
    pub layer: LayerSel,
    pub head: HeadSel,
}

fn resolve_layer(sel: LayerSel, depth: usize) -> Result<usize> {
    match sel {
        LayerSel::Last if depth > 0 => Ok(depth - 1),
        LayerSel::Index(l) if l < depth => Ok(l),
        _ => Err(Error::Input(format!("layer selector {sel:?} out of range: valid layers 0..{depth}"))),
    }
}

/// Attention of one query over image-token keys, renormalized and laid out
/// on the `rows × cols` patch grid. Positions without an image token are 0.
pub fn attention_map_from_record(record: &AttentionRecord, rows: usize, cols: usize, query: &AttentionQuery) -> Result<Mat<f64>> {
    let n_total = rows * cols;
    let layer = resolve_layer(query.layer, record.layers.len())?;
    let heads = &record.layers[layer].self_attn;
    let head_ids: Vec<usize> = match query.head {
        HeadSel::Mean => (0..heads.len()).collect(),
        HeadSel::Index(h) if h < heads.len() => vec![h],
        HeadSel::Index(h) => {
            return Err(Error::Input(format!("head {h} out of range: valid heads 0..{}", heads.len())));
        }
    };
    let row = match query.kind {
        QueryKind::Patch(p) => {
            if p >= n_total {
                return Err(Error::Input(format!("patch {p} out of range: valid patches 0..{n_total}")));
            }
            record.retained.iter().position(|&r| r == p).ok_or_else(|| {
                Error::Input(format!("patch {p} is masked and has no image token"))
            })?
        }
        QueryKind::Proxy(k) => {
            if record.mode != Mode::Proxy || k >= record.n_proxy {
                return Err(Error::Input(format!(
                    "proxy {k} out of range: the model exposes {} proxy queries",
                    if record.mode == Mode::Proxy { record.n_proxy } else { 0 }
                )));
            }
            record.n_img + k
        }
    };
    let mut map = Mat::zeros(rows, cols);
    for &h in &head_ids {
        let a = &heads[h];
        for (k, &pos) in record.retained.iter().enumerate() {
            map.data[pos] += a.at(row, k);
        }
    }
    let s: f64 = map.data.iter().sum();
    if s > 0.0 {
        map.data.iter_mut().for_each(|v| *v /= s);
    }
    Ok(map)
}

/// Full-image forward with attention recording.
pub fn record_attention<F: Real>(model: &Model<F>, images: &[Image]) -> Result<Vec<AttentionRecord>> {
    let c = &model.config;
    let grids = images
        .iter()
        .map(|im| patchify(im, c.patch_size))
        .collect::<Result<Vec<_>>>()?;
    let plans = vec![MaskingPlan::full(c.n_patches()); images.len()];
    let opts = ForwardOptions { record_attention: true, ..Default::default() };
    Ok(model.forward(&grids, &plans, &opts)?.0.records)
}

pub fn attention_map<F: Real>(model: &Model<F>, image: &Image, query: &AttentionQuery) -> Result<Mat<f64>> {
    let side = model.config.grid_side();
    let rec = record_attention(model, std::slice::from_ref(image))?;
    attention_map_from_record(&rec[0], side, side, query)
}

/// Per proxy token, the head-averaged map averaged over all images.
pub fn mean_proxy_heatmaps<F: Real>(model: &Model<F>, images: &[Image], layer: LayerSel) -> Result<Vec<Mat<f64>>> {
    let c = &model.config;
    if images.is_empty() {
        return Err(Error::Input("heatmaps need at least one image".into()));
    }
    if let Some(i) = images
        .iter()
        .position(|im| im.height != c.image_size || im.width != c.image_size || im.channels != c.channels)
    {
        return Err(Error::Input(format!(
            "image {i} does not match the model's {s}x{s}x{} input",
            c.channels,
            s = c.image_size
        )));
    }
    let side = c.grid_side();
    let mut maps = vec![Mat::zeros(side, side); c.proxy_count];
    for chunk in images.chunks(64) {
        for rec in record_attention(model, chunk)? {
            for (k, m) in maps.iter_mut().enumerate() {
                let q = AttentionQuery { kind: QueryKind::Proxy(k), layer, head: HeadSel::Mean };
                m.add_assign(&attention_map_from_record(&rec, side, side, &q)?);
            }
        }
    }
    let n = images.len() as f64;
    maps.iter_mut().for_each(|m| m.data.iter_mut().for_each(|v| *v /= n));
    Ok(maps)
}

/// Shannon entropy (nats) of a map treated as a distribution.
pub fn map_entropy(map: &Mat<f64>) -> f64 {
    let s: f64 = map.data.iter().sum();
    if s <= 0.0 {
        return 0.0;
    }
    -map.data
        .iter()
        .map(|&v| v / s)
        .filter(|&p| p > 0.0)
        .map(|p| p * p.ln())
        .sum::<f64>()
}

/// Mean attention distance in pixels, `values[layer][head]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceProfile {
    pub patch_size: usize,
    pub values: Vec<Vec<f64>>,
}

impl DistanceProfile {
    pub fn layer_means(&self) -> Vec<f64> {
        self.values
            .iter()
            .map(|h| h.iter().sum::<f64>() / h.len().max(1) as f64)
            .collect()
    }

    /// Average of several profiles with identical shape.
    pub fn mean(profiles: &[DistanceProfile]) -> Option<DistanceProfile> {
        let first = profiles.first()?;
        let mut values = first.values.clone();
        for p in &profiles[1..] {
            for (a, b) in values.iter_mut().zip(&p.values) {
                a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
            }
        }
        let n = profiles.len() as f64;
        values.iter_mut().for_each(|h| h.iter_mut().for_each(|v| *v /= n));
        Some(DistanceProfile { patch_size: first.patch_size, values })
    }
}

fn center(pos: usize, cols: usize, patch_size: usize) -> (f64, f64) {
    let ps = patch_size as f64;
    ((pos / cols) as f64 * ps + ps / 2.0, (pos % cols) as f64 * ps + ps / 2.0)
}

/// For every (layer, head): the mean over image-token queries of the
/// attention-weighted distance to image-token keys (proxy and mask columns
/// dropped, rows renormalized, the query's own patch included).
pub fn attention_distance(record: &AttentionRecord, cols: usize, patch_size: usize) -> DistanceProfile {
    let ni = record.n_img;
    let pos = &record.retained;
    let values = record
        .layers
        .iter()
        .map(|layer| {
            layer
                .self_attn
                .iter()
                .map(|a| {
                    let mut total = 0.0;
                    for q in 0..ni {
                        let (qy, qx) = center(pos[q], cols, patch_size);
                        let (mut num, mut den) = (0.0, 0.0);
                        for k in 0..ni {
                            let (ky, kx) = center(pos[k], cols, patch_size);
                            let w = a.at(q, k);
                            num += w * ((qy - ky).powi(2) + (qx - kx).powi(2)).sqrt();
                            den += w;
                        }
                        if den > 0.0 {
                            total += num / den;
                        }
                    }
                    if ni == 0 {
                        0.0
                    } else {
                        total / ni as f64
                    }
                })
                .collect()
        })
        .collect();
    DistanceProfile { patch_size, values }
}

/// Min-max scaled to bytes; a constant map renders as 128.
pub fn heatmap_bytes(map: &Mat<f64>, patch_size: usize) -> Result<(usize, usize, Vec<u8>)> {
    if !map.is_finite() {
        return Err(Error::Input("heatmap contains non-finite values".into()));
    }
    let (lo, hi) = map
        .data
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    let level = |v: f64| -> u8 {
        if hi > lo {
            pnm::quantize(((v - lo) / (hi - lo)) as f32)
        } else {
            128
        }
    };
    let (h, w) = (map.rows * patch_size, map.cols * patch_size);
    let mut out = vec![0u8; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = level(map.at(y / patch_size, x / patch_size));
        }
    }
    Ok((h, w, out))
}

/// Writes the heatmap as PGM and, when `base` is given, a PPM overlay that
/// blends the base 50% with a red heat layer.
pub fn render_heatmap(map: &Mat<f64>, patch_size: usize, pgm_path: &Path, overlay: Option<(&Image, &Path)>) -> Result<()> {
    let (h, w, heat) = heatmap_bytes(map, patch_size)?;
    std::fs::write(pgm_path, pnm::encode_bytes(w, h, 1, &heat)).map_err(|e| Error::io(pgm_path, e))?;
    if let Some((base, path)) = overlay {
        if base.height != h || base.width != w {
            return Err(Error::Input(format!(
                "overlay base is {}x{}, heatmap is {h}x{w}",
                base.height, base.width
            )));
        }
        let mut rgb = vec![0u8; h * w * 3];
        for i in 0..h * w {
            let px = |c: usize| base.pixels[i * base.channels + c.min(base.channels - 1)];
            let heat = heat[i] as f32 / 255.0;
            rgb[i * 3] = pnm::quantize(0.5 * px(0) + 0.5 * heat);
            rgb[i * 3 + 1] = pnm::quantize(0.5 * px(1));
            rgb[i * 3 + 2] = pnm::quantize(0.5 * px(2));
        }
        std::fs::write(path, pnm::encode_bytes(w, h, 3, &rgb)).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

pub const ATTENTION_CSV_HEADER: &str = "layer,head,query_kind,query_index,key_index,weight";

/// Rows of the self-attention export. Image queries and keys use patch
/// positions, proxy and mask rows their token index.
pub fn write_attention_csv<W: Write>(out: &mut W, record: &AttentionRecord, layers: &[usize]) -> Result<()> {
    let io = |e: std::io::Error| Error::Input(format!("writing attention CSV: {e}"));
    writeln!(out, "{ATTENTION_CSV_HEADER}").map_err(io)?;
    let other = if record.mode == Mode::Proxy { "proxy" } else { "mask" };
    let label = |i: usize| -> (&str, usize) {
        if i < record.n_img {
            ("patch", record.retained[i])
        } else if record.mode == Mode::Proxy {
            (other, i - record.n_img)
        } else {
            (other, record.masked[i - record.n_img])
        }
    };
    for &l in layers {
        let layer = record
            .layers
            .get(l)
            .ok_or_else(|| Error::Input(format!("layer {l} out of range: valid layers 0..{}", record.layers.len())))?;
        for (h, a) in layer.self_attn.iter().enumerate() {
            for q in 0..a.rows {
                let (kind, qi) = label(q);
                for k in 0..a.cols {
                    writeln!(out, "{l},{h},{kind},{qi},{},{:.9e}", label(k).1, a.at(q, k)).map_err(io)?;
                }
            }
        }
    }
    Ok(())
}

//! Seeded synthetic shapes: 1 to 3 colored rectangles or disks over a faint
//! noise background, with a per-patch object-id grid as ground truth.
//!
//! Pixel values are stored on the 8-bit grid (`q / 255`) so a dataset
//! written to PPM reads back bitwise identical.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::patchify::Image;
use crate::rng::{Rng, SeedStreams, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Rectangle,
    Disk,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 2] = [ShapeKind::Rectangle, ShapeKind::Disk];

    pub fn index(self) -> usize {
        match self {
            ShapeKind::Rectangle => 0,
            ShapeKind::Disk => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub image_size: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub n_images: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
    pub kinds: Vec<ShapeKind>,
    /// Shape extent in pixels (rectangle side, disk diameter), inclusive.
    pub min_size: usize,
    pub max_size: usize,
    pub palette: Vec<[f32; 3]>,
    pub background: [f32; 3],
    pub background_amplitude: f32,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            channels: 3,
            patch_size: 8,
            n_images: 2000,
            min_shapes: 1,
            max_shapes: 3,
            kinds: ShapeKind::ALL.to_vec(),
            min_size: 8,
            max_size: 20,
            palette: vec![
                [0.90, 0.15, 0.15],
                [0.15, 0.75, 0.20],
                [0.20, 0.30, 0.90],
                [0.95, 0.85, 0.10],
                [0.85, 0.25, 0.85],
                [0.10, 0.80, 0.85],
            ],
            background: [0.45, 0.45, 0.45],
            background_amplitude: 0.08,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.image_size == 0 || self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return bad(format!(
                "image_size {} must be a positive multiple of patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.channels != 1 && self.channels != 3 {
            return bad(format!("channels must be 1 or 3, got {}", self.channels));
        }
        if self.max_shapes == 0 {
            return bad("zero shapes per image leaves the class label undefined".into());
        }
        if self.min_shapes == 0 || self.min_shapes > self.max_shapes {
            return bad(format!(
                "shapes per image range {}..={} must be non-empty and start at 1 or more",
                self.min_shapes, self.max_shapes
            ));
        }
        if self.min_size == 0 || self.min_size > self.max_size {
            return bad(format!("shape size range {}..={} is empty", self.min_size, self.max_size));
        }
        if self.max_size > self.image_size {
            return bad(format!(
                "shapes up to {} px do not fit a {} px canvas",
                self.max_size, self.image_size
            ));
        }
        if self.kinds.is_empty() {
            return bad("no shape kinds enabled".into());
        }
        if self.palette.is_empty() {
            return bad("empty color palette".into());
        }
        if !(0.0..=0.5).contains(&self.background_amplitude) {
            return bad(format!(
                "background_amplitude {} outside [0, 0.5]",
                self.background_amplitude
            ));
        }
        Ok(())
    }

    pub fn grid_side(&self) -> usize {
        self.image_size / self.patch_size
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Shape {
    pub kind: ShapeKind,
    /// Top-left corner and extent in pixel units.
    pub x0: f64,
    pub y0: f64,
    pub w: f64,
    pub h: f64,
    pub color: [f32; 3],
}

impl Shape {
    /// Continuous-coordinate membership test; pixel (y, x) is sampled at
    /// (x + 0.5, y + 0.5).
    pub fn contains(&self, x: f64, y: f64) -> bool {
        match self.kind {
            ShapeKind::Rectangle => x >= self.x0 && x < self.x0 + self.w && y >= self.y0 && y < self.y0 + self.h,
            ShapeKind::Disk => {
                let r = self.w / 2.0;
                let (dx, dy) = (x - self.x0 - r, y - self.y0 - r);
                dx * dx + dy * dy <= r * r
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    pub image: Image,
    pub class_label: usize,
    /// Row-major object ids, 0 for background, `k` for the k-th drawn shape.
    pub patch_labels: Option<Vec<u32>>,
    /// Kind of each object, indexed by object id - 1.
    pub object_kinds: Vec<ShapeKind>,
    pub shapes: Vec<Shape>,
}

impl LabeledImage {
    /// Per-patch semantic labels: 0 background, `1 + kind index` otherwise.
    pub fn patch_classes(&self) -> Option<Vec<u32>> {
        self.patch_labels.as_ref().map(|labels| {
            labels
                .iter()
                .map(|&id| match id {
                    0 => 0,
                    k => 1 + self.object_kinds[k as usize - 1].index() as u32,
                })
                .collect()
        })
    }
}

fn quantized(v: f32) -> f32 {
    crate::pnm::quantize(v) as f32 / 255.0
}

fn draw_shape(cfg: &SynthConfig, rng: &mut Rng) -> Shape {
    let kind = cfg.kinds[rng.random_range(0..cfg.kinds.len())];
    let color = cfg.palette[rng.random_range(0..cfg.palette.len())];
    let w = rng.random_range(cfg.min_size..=cfg.max_size);
    let h = match kind {
        ShapeKind::Rectangle => rng.random_range(cfg.min_size..=cfg.max_size),
        ShapeKind::Disk => w,
    };
    let x0 = rng.random_range(0..=cfg.image_size - w);
    let y0 = rng.random_range(0..=cfg.image_size - h);
    Shape { kind, x0: x0 as f64, y0: y0 as f64, w: w as f64, h: h as f64, color }
}

/// Builds one image from an explicit shape list (drawn in order, later on top).
pub fn render(cfg: &SynthConfig, shapes: Vec<Shape>, rng: &mut Rng) -> Result<LabeledImage> {
    if shapes.is_empty() {
        return Err(Error::Config("zero shapes per image leaves the class label undefined".into()));
    }
    let (s, c) = (cfg.image_size, cfg.channels);
    let mut pixels = vec![0f32; s * s * c];
    let mut area = [0usize; 2];
    for y in 0..s {
        for x in 0..s {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let top = shapes.iter().rposition(|sh| sh.contains(px, py));
            let rgb = match top {
                Some(i) => {
                    area[shapes[i].kind.index()] += 1;
                    shapes[i].color
                }
                None => cfg.background,
            };
            let noise: [f32; 3] = if cfg.background_amplitude > 0.0 {
                let a = cfg.background_amplitude;
                [rng.random_range(-a..=a), rng.random_range(-a..=a), rng.random_range(-a..=a)]
            } else {
                [0.0; 3]
            };
            let base = (y * s + x) * c;
            if c == 1 {
                let g = (rgb[0] + rgb[1] + rgb[2]) / 3.0;
                pixels[base] = quantized(g + noise[0]);
            } else {
                for ch in 0..3 {
                    pixels[base + ch] = quantized(rgb[ch] + noise[ch]);
                }
            }
        }
    }
    let side = cfg.grid_side();
    let ps = cfg.patch_size as f64;
    let mut labels = Vec::with_capacity(side * side);
    for r in 0..side {
        for col in 0..side {
            let (cx, cy) = (col as f64 * ps + ps / 2.0, r as f64 * ps + ps / 2.0);
            let id = shapes.iter().rposition(|sh| sh.contains(cx, cy)).map_or(0, |i| i + 1);
            labels.push(id as u32);
        }
    }
    // Dominant kind by visible area; a fully hidden image falls back to the topmost shape.
    let class_label = if area.iter().all(|&a| a == 0) {
        shapes.last().unwrap().kind.index()
    } else if area[1] > area[0] {
        1
    } else {
        0
    };
    Ok(LabeledImage {
        image: Image::new(s, s, c, pixels)?,
        class_label,
        patch_labels: Some(labels),
        object_kinds: shapes.iter().map(|sh| sh.kind).collect(),
        shapes,
    })
}

pub fn generate_one(cfg: &SynthConfig, index: usize) -> Result<LabeledImage> {
    let mut rng = SeedStreams::new(cfg.seed).rng(Stream::Data, index as u64);
    let n = rng.random_range(cfg.min_shapes..=cfg.max_shapes);
    let shapes = (0..n).map(|_| draw_shape(cfg, &mut rng)).collect();
    render(cfg, shapes, &mut rng)
}

pub fn generate_synthetic(cfg: &SynthConfig) -> Result<Vec<LabeledImage>> {
    cfg.validate()?;
    (0..cfg.n_images).map(|i| generate_one(cfg, i)).collect()
}

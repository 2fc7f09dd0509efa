//! Random-resized-crop, horizontal flip and optional color jitter.

use rand::Rng as _;

use super::recipe::Recipe;
use crate::patchify::Image;
use crate::rng::Rng;

const CROP_TRIES: usize = 10;

/// Crop box `(y0, x0, h, w)`; the full image when no try fits.
pub fn sample_crop(height: usize, width: usize, area_range: [f64; 2], rng: &mut Rng) -> (usize, usize, usize, usize) {
    let area = (height * width) as f64;
    let (lo, hi) = ((3.0f64 / 4.0).ln(), (4.0f64 / 3.0).ln());
    for _ in 0..CROP_TRIES {
        let target = area * rng.random_range(area_range[0]..=area_range[1]);
        let aspect = rng.random_range(lo..=hi).exp();
        let w = (target * aspect).sqrt().round() as usize;
        let h = (target / aspect).sqrt().round() as usize;
        if w > 0 && h > 0 && w <= width && h <= height {
            let y0 = rng.random_range(0..=height - h);
            let x0 = rng.random_range(0..=width - w);
            return (y0, x0, h, w);
        }
    }
    (0, 0, height, width)
}

/// Bilinear resample of a crop box to `out_h × out_w` (half-pixel centers,
/// edge-clamped). An unscaled box is copied exactly.
pub fn resize_crop(image: &Image, crop: (usize, usize, usize, usize), out_h: usize, out_w: usize) -> Image {
    let (y0, x0, h, w) = crop;
    let c = image.channels;
    let mut pixels = vec![0f32; out_h * out_w * c];
    if h == out_h && w == out_w {
        for y in 0..h {
            let src = ((y0 + y) * image.width + x0) * c;
            pixels[y * w * c..(y + 1) * w * c].copy_from_slice(&image.pixels[src..src + w * c]);
        }
        return Image { height: out_h, width: out_w, channels: c, pixels };
    }
    let axis = |i: usize, n_in: usize, n_out: usize| {
        let s = ((i as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(n_in - 1);
        (i0, i1, s - i0 as f64)
    };
    for y in 0..out_h {
        let (ya, yb, fy) = axis(y, h, out_h);
        for x in 0..out_w {
            let (xa, xb, fx) = axis(x, w, out_w);
            for ch in 0..c {
                let g = |yy: usize, xx: usize| image.get(y0 + yy, x0 + xx, ch) as f64;
                let top = g(ya, xa) * (1.0 - fx) + g(ya, xb) * fx;
                let bot = g(yb, xa) * (1.0 - fx) + g(yb, xb) * fx;
                pixels[(y * out_w + x) * c + ch] = (top * (1.0 - fy) + bot * fy) as f32;
            }
        }
    }
    Image { height: out_h, width: out_w, channels: c, pixels }
}

pub fn flip_horizontal(image: &mut Image) {
    let (w, c) = (image.width, image.channels);
    for row in image.pixels.chunks_exact_mut(w * c) {
        for x in 0..w / 2 {
            for ch in 0..c {
                row.swap(x * c + ch, (w - 1 - x) * c + ch);
            }
        }
    }
}

/// Brightness, contrast and saturation factors drawn from `[1-s, 1+s]`.
pub fn color_jitter(image: &mut Image, strength: f64, rng: &mut Rng) {
    let mut factor = || rng.random_range(1.0 - strength..=1.0 + strength) as f32;
    let (b, k, s) = (factor(), factor(), factor());
    let c = image.channels;
    image.pixels.iter_mut().for_each(|v| *v *= b);
    let mean = image.pixels.iter().sum::<f32>() / image.pixels.len().max(1) as f32;
    image.pixels.iter_mut().for_each(|v| *v = (*v - mean) * k + mean);
    if c == 3 {
        for px in image.pixels.chunks_exact_mut(3) {
            let g = 0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2];
            px.iter_mut().for_each(|v| *v = (*v - g) * s + g);
        }
    }
    image.pixels.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
}

pub fn augment(image: &Image, recipe: &Recipe, rng: &mut Rng) -> Image {
    let crop = sample_crop(image.height, image.width, recipe.crop_ratio_range, rng);
    let mut out = resize_crop(image, crop, image.height, image.width);
    if rng.random::<f64>() < recipe.flip_prob {
        flip_horizontal(&mut out);
    }
    if recipe.color_jitter > 0.0 {
        color_jitter(&mut out, recipe.color_jitter, rng);
    }
    out
}

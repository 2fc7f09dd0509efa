#![allow(dead_code)]

use proxymim::encoder::Mode;
use proxymim::nn::Params;
use proxymim::rng::{SeedStreams, Stream};
use proxymim::targets::TargetKind;
use proxymim::{Image, Model, ModelConfig};
use rand::Rng as _;
use rand_distr::{Distribution, Normal};

pub fn random_image(size: usize, channels: usize, seed: u64) -> Image {
    let mut rng = SeedStreams::new(seed).rng(Stream::Data, 77);
    let px = (0..size * size * channels).map(|_| rng.random::<f32>()).collect();
    Image::new(size, size, channels, px).unwrap()
}

pub fn tiny_config(mode: Mode, proxies: usize, depth: usize) -> ModelConfig {
    let mut c = ModelConfig {
        image_size: 12,
        channels: 1,
        patch_size: 4,
        dim: 8,
        depth,
        heads: 2,
        proxy_count: proxies,
        mode,
        ..ModelConfig::default()
    };
    c.target.kind = TargetKind::Code;
    c.target.codebook_size = 5;
    c
}

/// Replaces every tensor with N(0, std²) draws so tests are not dominated by
/// the near-zero init.
pub fn randomize(model: &mut Model<f64>, seed: u64, std: f64) {
    let mut rng = SeedStreams::new(seed).rng(Stream::Init, 999);
    let n = Normal::new(0.0, std).unwrap();
    model.visit_mut("", &mut |name, _, data| {
        for v in data.iter_mut() {
            *v = n.sample(&mut rng);
            if name.ends_with("gamma") {
                *v += 1.0;
            }
        }
    });
}

pub fn random_mat(rows: usize, cols: usize, seed: u64) -> proxymim::Mat<f64> {
    let mut rng = SeedStreams::new(seed).rng(Stream::Data, 5);
    let n = Normal::new(0.0, 1.0).unwrap();
    proxymim::Mat::from_fn(rows, cols, |_, _| n.sample(&mut rng))
}

/// Random layer-0 states with `n_img` image, `n_proxy` proxy and `n_mask`
/// mask rows per sample.
pub fn random_states(batch: usize, n_img: usize, n_proxy: usize, n_mask: usize, dim: usize, seed: u64) -> proxymim::TokenStates<f64> {
    proxymim::TokenStates {
        batch,
        h_img: random_mat(batch * n_img, dim, seed),
        h_proxy: random_mat(batch * n_proxy, dim, seed + 1),
        h_mask: random_mat(batch * n_mask, dim, seed + 2),
        layer_index: 0,
    }
}

/// Plans whose retained/masked sets are the first `n_img` / next `n_mask`
/// positions.
pub fn simple_plans(batch: usize, n_img: usize, n_mask: usize) -> Vec<proxymim::MaskingPlan> {
    let plan = proxymim::MaskingPlan {
        n_total: n_img + n_mask,
        retained: (0..n_img).collect(),
        masked: (n_img..n_img + n_mask).collect(),
        mask_ratio: n_mask as f64 / (n_img + n_mask) as f64,
    };
    vec![plan; batch]
}

pub fn random_model(mode: Mode, proxies: usize, depth: usize, seed: u64) -> Model<f64> {
    let mut m = Model::<f64>::init(&tiny_config(mode, proxies, depth), seed).unwrap();
    randomize(&mut m, seed + 1000, 0.3);
    m
}

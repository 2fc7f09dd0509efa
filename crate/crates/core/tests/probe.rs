//! Feature extraction and the linear probe.

mod common;

use proxymim::encoder::Mode;
use proxymim::probe::{accuracy, extract_features, extract_patch_features, hidden_states, linear_probe, FeatureSpec, Pooling, ProbeConfig};
use proxymim::rng::{SeedStreams, Stream};
use proxymim::{Error, Mat, Model, ModelConfig};
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};

fn model() -> Model<f32> {
    let cfg = ModelConfig { image_size: 16, patch_size: 4, dim: 16, depth: 3, heads: 2, proxy_count: 3, ..Default::default() };
    Model::init(&cfg, 11).unwrap()
}

#[test]
fn duplicated_images_give_identical_rows() {
    let m = model();
    let im = common::random_image(16, 3, 1);
    let f = extract_features(&m, &[im.clone(), im], &FeatureSpec::for_depth(3)).unwrap();
    assert_eq!(f.row(0), f.row(1));
}

#[test]
fn mean_pooling_matches_row_mean_oracle() {
    let m = model();
    let imgs: Vec<_> = (0..3).map(|i| common::random_image(16, 3, 10 + i)).collect();
    for layer in 0..=3 {
        let spec = FeatureSpec { layer_index: layer, pooling: Pooling::MeanImg, normalize: false };
        let f = extract_features(&m, &imgs, &spec).unwrap();
        let h = hidden_states(&m, &imgs, layer).unwrap();
        for b in 0..3 {
            for j in 0..16 {
                let mean = (0..16).map(|t| h.h_img.at(b * 16 + t, j) as f64).sum::<f64>() / 16.0;
                assert!((f.at(b, j) as f64 - mean).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn single_patch_mean_is_that_token() {
    let cfg = ModelConfig { image_size: 4, patch_size: 4, dim: 8, depth: 2, heads: 2, proxy_count: 1, ..Default::default() };
    let m = Model::<f32>::init(&cfg, 0).unwrap();
    let im = common::random_image(4, 3, 2);
    let spec = FeatureSpec { layer_index: 2, pooling: Pooling::MeanImg, normalize: false };
    let f = extract_features(&m, std::slice::from_ref(&im), &spec).unwrap();
    let h = hidden_states(&m, &[im], 2).unwrap();
    assert_eq!(f.row(0), h.h_img.row(0));
}

#[test]
fn cls_pooling_reads_the_proxy_row_and_checks_range() {
    let m = model();
    let imgs = vec![common::random_image(16, 3, 4)];
    let spec = FeatureSpec { layer_index: 3, pooling: Pooling::Cls(2), normalize: false };
    let f = extract_features(&m, &imgs, &spec).unwrap();
    let h = hidden_states(&m, &imgs, 3).unwrap();
    assert_eq!(f.row(0), h.h_proxy.row(2));
    let bad = FeatureSpec { pooling: Pooling::Cls(3), ..spec };
    assert!(matches!(extract_features(&m, &imgs, &bad), Err(Error::Config(_))));
    let bad = FeatureSpec { layer_index: 4, ..spec };
    assert!(matches!(extract_features(&m, &imgs, &bad), Err(Error::Config(_))));
}

#[test]
fn patch_features_follow_patch_order_and_normalize() {
    let m = model();
    let imgs: Vec<_> = (0..2).map(|i| common::random_image(16, 3, 20 + i)).collect();
    let f = extract_patch_features(&m, &imgs, 2, false).unwrap();
    let h = hidden_states(&m, &imgs, 2).unwrap();
    assert_eq!(f, h.h_img);
    let n = extract_patch_features(&m, &imgs, 2, true).unwrap();
    for r in 0..n.rows {
        let norm: f64 = n.row(r).iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-5);
    }
}

#[test]
fn probing_leaves_the_backbone_untouched() {
    let m = model();
    let before = m.clone();
    let imgs: Vec<_> = (0..8).map(|i| common::random_image(16, 3, i)).collect();
    let f = extract_features(&m, &imgs, &FeatureSpec::for_depth(3)).unwrap();
    let y: Vec<usize> = (0..8).map(|i| i % 2).collect();
    linear_probe(&f, &y, &f, &y, 2, &ProbeConfig { epochs: 5, ..Default::default() }).unwrap();
    assert_eq!(m, before);
}

fn blobs(n: usize, dim: usize, classes: usize, sep: f64, seed: u64) -> (Mat<f64>, Vec<usize>) {
    let mut rng = SeedStreams::new(seed).rng(Stream::Data, 0);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let centers: Vec<Vec<f64>> = (0..classes).map(|_| (0..dim).map(|_| sep * normal.sample(&mut rng)).collect()).collect();
    let y: Vec<usize> = (0..n).map(|i| i % classes).collect();
    let x = Mat::from_fn(n, dim, |r, c| centers[y[r]][c] + normal.sample(&mut rng));
    (x, y)
}

#[test]
fn separable_two_class_features_reach_full_accuracy() {
    let mut rng = SeedStreams::new(5).rng(Stream::Data, 1);
    let x: Mat<f64> = Mat::from_fn(200, 4, |_, _| rng.random_range(-1.0..1.0));
    // a margin around the hyperplane x0 + 0.5·x2 = 0
    let y: Vec<usize> = (0..200).map(|r| usize::from(x.at(r, 0) + 0.5 * x.at(r, 2) > 0.0)).collect();
    let keep: Vec<usize> = (0..200).filter(|&r| (x.at(r, 0) + 0.5 * x.at(r, 2)).abs() > 0.1).collect();
    let xs = x.gather_rows(&keep);
    let ys: Vec<usize> = keep.iter().map(|&r| y[r]).collect();
    let res = linear_probe(&xs, &ys, &xs, &ys, 2, &ProbeConfig { epochs: 200, batch_size: 64, lr: 1e-2, ..Default::default() }).unwrap();
    assert_eq!(res.eval_accuracy, 1.0);
}

#[test]
fn shuffled_ten_class_labels_are_at_chance() {
    let (x, mut y) = blobs(4000, 16, 10, 3.0, 7);
    y.shuffle(&mut SeedStreams::new(7).rng(Stream::Probe, 99));
    let (tx, ty) = (x.rows_slice(0, 3000), &y[..3000]);
    let (ex, ey) = (x.rows_slice(3000, 1000), &y[3000..]);
    let res = linear_probe(&tx, ty, &ex, ey, 10, &ProbeConfig { epochs: 20, batch_size: 256, ..Default::default() }).unwrap();
    assert!((res.eval_accuracy - 0.1).abs() <= 0.03, "{}", res.eval_accuracy);
}

#[test]
fn fitting_the_training_set_beats_any_constant_predictor() {
    let (x, y) = blobs(300, 8, 3, 1.0, 3);
    let res = linear_probe(&x, &y, &x, &y, 3, &ProbeConfig { epochs: 100, batch_size: 64, ..Default::default() }).unwrap();
    let best_constant = (0..3).map(|k| accuracy(&vec![k; 300], &y)).fold(0.0, f64::max);
    assert!(res.eval_accuracy >= best_constant);
}

#[test]
fn scaling_features_preserves_decisions() {
    let (x, y) = blobs(600, 8, 4, 1.0, 9);
    let cfg = ProbeConfig { epochs: 60, batch_size: 64, lr: 1e-2, weight_decay: 0.0, standardize: false, seed: 0 };
    let a = linear_probe(&x, &y, &x, &y, 4, &cfg).unwrap();
    let mut xs = x.clone();
    xs.scale(10.0);
    let b = linear_probe(&xs, &y, &xs, &y, 4, &ProbeConfig { lr: cfg.lr / 10.0, ..cfg.clone() }).unwrap();
    let (pa, pb) = (a.classifier.predict(&x), b.classifier.predict(&xs));
    let agree = pa.iter().zip(&pb).filter(|(p, q)| p == q).count() as f64 / 600.0;
    assert!(agree >= 0.98, "agreement {agree}");

    // with standardization the scale drops out entirely
    let cfg = ProbeConfig { standardize: true, ..cfg };
    let a = linear_probe(&x, &y, &x, &y, 4, &cfg).unwrap();
    let b = linear_probe(&xs, &y, &xs, &y, 4, &cfg).unwrap();
    let agree = a.classifier.predict(&x).iter().zip(&b.classifier.predict(&xs)).filter(|(p, q)| p == q).count();
    assert!(agree >= 597, "agreement {agree}/600");
}

#[test]
fn probe_is_deterministic() {
    let (x, y) = blobs(200, 6, 3, 1.0, 1);
    let cfg = ProbeConfig { epochs: 10, batch_size: 32, ..Default::default() };
    assert_eq!(linear_probe(&x, &y, &x, &y, 3, &cfg).unwrap(), linear_probe(&x, &y, &x, &y, 3, &cfg).unwrap());
}

#[test]
fn vanilla_models_probe_too() {
    let cfg = ModelConfig { image_size: 8, patch_size: 4, dim: 8, depth: 2, heads: 2, proxy_count: 0, mode: Mode::Vanilla, ..Default::default() };
    let m = Model::<f32>::init(&cfg, 0).unwrap();
    let f = extract_features(&m, &[common::random_image(8, 3, 0)], &FeatureSpec::for_depth(2)).unwrap();
    assert!(f.is_finite());
}

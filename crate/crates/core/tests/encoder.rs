//! Dual-path encoder: information flow, equivariance, degenerate cases and
//! small closed-form oracles.

mod common;

use proxymim::encoder::{
    compression_forward, encoder_forward, prediction_head, reconstruction_forward, vanilla_block_forward,
    ForwardOptions, Mode,
};
use proxymim::nn::{gelu, LayerNorm, Linear, LN_EPS};
use proxymim::{Mat, Model, TokenStates};

use common::{random_mat, random_model, random_states, simple_plans};

fn run(model: &Model<f64>, states: TokenStates<f64>, n_img: usize, n_mask: usize, record: bool) -> proxymim::encoder::EncoderOutput<f64> {
    let plans = simple_plans(states.batch, n_img, n_mask);
    let opts = ForwardOptions { record_attention: record, keep_hidden: true, ..Default::default() };
    encoder_forward(states, &model.config.encoder(), &model.blocks, &model.final_norm, &plans, &opts)
        .unwrap()
        .0
}

#[test]
fn mask_inputs_never_reach_image_or_proxy_states() {
    for (trial, &(p, depth)) in [(0, 1), (1, 3), (4, 3), (2, 2)].iter().enumerate() {
        let model = random_model(Mode::Proxy, p, depth, trial as u64);
        let base = random_states(2, 5, p, 3, 8, 10 + trial as u64);
        let mut poked = base.clone();
        poked.h_mask = random_mat(6, 8, 99 + trial as u64);
        let a = run(&model, base, 5, 3, false);
        let b = run(&model, poked, 5, 3, false);
        for (ha, hb) in a.hidden.iter().zip(&b.hidden).skip(1) {
            assert_eq!(ha.h_img, hb.h_img);
            assert_eq!(ha.h_proxy, hb.h_proxy);
        }
        assert_eq!(a.states.h_img, b.states.h_img);
        assert_eq!(a.states.h_proxy, b.states.h_proxy);
        assert_ne!(a.states.h_mask, b.states.h_mask);
    }
}

#[test]
fn without_proxies_mask_output_ignores_image_content() {
    let model = random_model(Mode::Proxy, 0, 3, 4);
    let base = random_states(1, 6, 0, 3, 8, 1);
    let mut poked = base.clone();
    poked.h_img = random_mat(6, 8, 77);
    let a = run(&model, base, 6, 3, false);
    let b = run(&model, poked, 6, 3, false);
    assert_eq!(a.states.h_mask, b.states.h_mask);
    assert_ne!(a.states.h_img, b.states.h_img);
}

#[test]
fn with_proxies_mask_output_depends_on_image_content() {
    let model = random_model(Mode::Proxy, 2, 2, 4);
    let base = random_states(1, 6, 2, 3, 8, 1);
    let mut poked = base.clone();
    poked.h_img.data[0] += 0.5;
    let a = run(&model, base, 6, 3, false);
    let b = run(&model, poked, 6, 3, false);
    let diff: f64 = a.states.h_mask.data.iter().zip(&b.states.h_mask.data).map(|(x, y)| (x - y).abs()).sum();
    assert!(diff > 1e-8, "mask states did not move: {diff}");
}

#[test]
fn perturbing_the_mask_embedding_leaves_the_image_path_alone() {
    let mut model = random_model(Mode::Proxy, 3, 2, 8);
    let grids: Vec<_> = (0..2).map(|i| proxymim::patchify::patchify(&common::random_image(12, 1, i), 4).unwrap()).collect();
    let plans = vec![
        proxymim::MaskingPlan { n_total: 9, retained: vec![0, 1, 3, 4, 8], masked: vec![2, 5, 6, 7], mask_ratio: 4.0 / 9.0 };
        2
    ];
    let opts = ForwardOptions { keep_hidden: true, ..Default::default() };
    let a = model.forward(&grids, &plans, &opts).unwrap().0;
    model.embed.mask[3] += 1.0;
    // positions only used by mask tokens
    for c in 0..8 {
        *model.embed.positional.at_mut(6, c) -= 0.25;
    }
    let b = model.forward(&grids, &plans, &opts).unwrap().0;
    for (x, y) in a.hidden.iter().zip(&b.hidden) {
        assert_eq!(x.h_img, y.h_img);
        assert_eq!(x.h_proxy, y.h_proxy);
    }
    assert_ne!(a.predictions, b.predictions);
}

#[test]
fn recorded_attention_rows_are_distributions() {
    for mode in [Mode::Proxy, Mode::Vanilla] {
        let model = random_model(mode, 3, 2, 2);
        let out = run(&model, random_states(2, 5, 3, 4, 8, 3), 5, 4, true);
        assert_eq!(out.records.len(), 2);
        for rec in &out.records {
            assert_eq!(rec.layers.len(), 2);
            for layer in &rec.layers {
                for m in layer.self_attn.iter().chain(&layer.cross_attn) {
                    for r in 0..m.rows {
                        let row = m.row(r);
                        assert!(row.iter().all(|&v| v >= 0.0));
                        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-5);
                    }
                }
            }
            if mode == Mode::Vanilla {
                assert!(rec.layers.iter().all(|l| l.cross_attn.is_empty()));
            }
        }
    }
}

#[test]
fn image_permutation_is_equivariant() {
    let model = random_model(Mode::Proxy, 3, 3, 5);
    let base = random_states(1, 6, 3, 2, 8, 6);
    let perm = [4, 0, 5, 2, 1, 3];
    let mut permuted = base.clone();
    permuted.h_img = base.h_img.gather_rows(&perm);
    let a = run(&model, base, 6, 2, false);
    let b = run(&model, permuted, 6, 2, false);
    let close = |x: &Mat<f64>, y: &Mat<f64>| x.data.iter().zip(&y.data).all(|(p, q)| (p - q).abs() < 1e-6);
    assert!(close(&a.states.h_proxy, &b.states.h_proxy));
    assert!(close(&a.states.h_mask, &b.states.h_mask));
    assert!(close(&a.states.h_img.gather_rows(&perm), &b.states.h_img));
}

#[test]
fn compression_without_proxies_is_a_plain_block() {
    let model = random_model(Mode::Proxy, 0, 1, 1);
    let x = random_mat(5, 8, 2);
    let empty = Mat::zeros(0, 8);
    let (img, proxy, _) = compression_forward(&x, &empty, 1, &model.blocks[0].compression, None);
    let (img2, mask, _) = vanilla_block_forward(&x, &empty, 1, &model.blocks[0].compression, None);
    assert_eq!(img, img2);
    assert_eq!((proxy.rows, mask.rows), (0, 0));
    assert_eq!((img.rows, img.cols), (5, 8));
}

#[test]
fn vanilla_and_proxy_agree_without_proxies_or_masks() {
    let proxy = random_model(Mode::Proxy, 0, 2, 3);
    let mut vanilla = random_model(Mode::Vanilla, 0, 2, 33);
    for (v, p) in vanilla.blocks.iter_mut().zip(&proxy.blocks) {
        v.compression = p.compression.clone();
    }
    vanilla.final_norm = proxy.final_norm.clone();
    let s = random_states(2, 7, 0, 0, 8, 4);
    let a = run(&proxy, s.clone(), 7, 0, false);
    let b = run(&vanilla, s, 7, 0, false);
    assert_eq!(a.states.h_img, b.states.h_img);
}

#[test]
fn unit_depth_applies_each_path_once() {
    let model = random_model(Mode::Proxy, 2, 1, 9);
    let out = run(&model, random_states(1, 4, 2, 3, 8, 2), 4, 3, true);
    let rec = &out.records[0];
    assert_eq!(rec.layers.len(), 1);
    assert_eq!(rec.layers[0].self_attn.len(), 2);
    assert_eq!(rec.layers[0].cross_attn.len(), 2);
    assert_eq!((rec.layers[0].self_attn[0].rows, rec.layers[0].self_attn[0].cols), (6, 6));
    assert_eq!((rec.layers[0].cross_attn[0].rows, rec.layers[0].cross_attn[0].cols), (3, 5));
}

#[test]
fn depth_mismatch_is_a_config_error() {
    let model = random_model(Mode::Proxy, 1, 2, 0);
    let s = random_states(1, 2, 1, 1, 8, 0);
    let err = encoder_forward(s, &model.config.encoder(), &model.blocks[..1], &model.final_norm, &simple_plans(1, 2, 1), &ForwardOptions::default());
    assert!(matches!(err, Err(proxymim::Error::Config(_))));
}

fn layer_norm_row(x: &[f64]) -> Vec<f64> {
    let d = x.len() as f64;
    let mean = x.iter().sum::<f64>() / d;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d;
    x.iter().map(|v| (v - mean) / (var + LN_EPS).sqrt()).collect()
}

fn affine(x: &[f64], l: &Linear<f64>) -> Vec<f64> {
    (0..l.out_dim())
        .map(|o| l.bias[o] + x.iter().enumerate().map(|(i, v)| v * l.weight.at(i, o)).sum::<f64>())
        .collect()
}

#[test]
fn single_mask_single_proxy_cross_attention_is_a_two_way_softmax() {
    let model = random_model(Mode::Proxy, 1, 1, 12);
    let mut r = model.blocks[0].reconstruction.clone().unwrap();
    r.norm3 = LayerNorm::new(8);
    let mask = random_mat(1, 8, 1);
    let proxy = random_mat(1, 8, 2);
    let (out, cache) = reconstruction_forward(&mask, &proxy, 1, &r, None);
    assert_eq!(out.rows, 1);
    let (nm, np) = (layer_norm_row(mask.row(0)), layer_norm_row(proxy.row(0)));
    let q = affine(&nm, &r.cross_attn.q);
    let (kp, km) = (affine(&np, &r.cross_attn.k), affine(&nm, &r.cross_attn.k));
    let dh = 4;
    for h in 0..2 {
        let dot = |k: &[f64]| (h * dh..(h + 1) * dh).map(|c| q[c] * k[c]).sum::<f64>() / (dh as f64).sqrt();
        let (sp, sm) = (dot(&kp), dot(&km));
        let want = 1.0 / (1.0 + (sm - sp).exp());
        let got = &cache.attn.probs[h];
        assert_eq!((got.rows, got.cols), (1, 2));
        assert!((got.at(0, 0) - want).abs() < 1e-12, "head {h}: {} vs {want}", got.at(0, 0));
    }
}

#[test]
fn reconstruction_keeps_the_query_count() {
    let model = random_model(Mode::Proxy, 4, 1, 2);
    let r = model.blocks[0].reconstruction.as_ref().unwrap();
    for (p, m) in [(0, 3), (1, 1), (4, 5)] {
        let (out, _) = reconstruction_forward(&random_mat(2 * m, 8, 1), &random_mat(2 * p, 8, 2), 2, r, None);
        assert_eq!(out.rows, 2 * m);
    }
}

#[test]
fn single_token_block_with_zero_attention_output_is_residual_plus_mlp() {
    let model = random_model(Mode::Vanilla, 0, 1, 14);
    let mut block = model.blocks[0].compression.clone();
    block.attn.out = Linear::zeros(8, 8);
    let x = random_mat(1, 8, 3);
    let (y, _, _) = vanilla_block_forward(&x, &Mat::zeros(0, 8), 1, &block, None);
    let ln = |v: &[f64], n: &LayerNorm<f64>| -> Vec<f64> {
        layer_norm_row(v).iter().enumerate().map(|(c, z)| z * n.gamma[c] + n.beta[c]).collect()
    };
    let h: Vec<f64> = affine(&ln(x.row(0), &block.norm2), &block.mlp.fc1).into_iter().map(gelu).collect();
    let m = affine(&h, &block.mlp.fc2);
    for c in 0..8 {
        assert!((y.at(0, c) - (x.at(0, c) + m[c])).abs() < 1e-12);
    }
}

#[test]
fn prediction_head_oracles() {
    let h = random_mat(3, 8, 5);
    let zero = Linear::<f64>::zeros(8, 6);
    assert!(prediction_head(&h, &zero).unwrap().data.iter().all(|&v| v == 0.0));

    let mut ident = Linear::<f64>::zeros(8, 8);
    for i in 0..8 {
        *ident.weight.at_mut(i, i) = 1.0;
    }
    assert_eq!(prediction_head(&h, &ident).unwrap(), h);

    let model = random_model(Mode::Proxy, 1, 1, 6);
    let head = model.head.as_ref().unwrap();
    let z = prediction_head(&h, head).unwrap();
    for r in 0..3 {
        let want = affine(h.row(r), head);
        for (a, b) in z.row(r).iter().zip(&want) {
            assert!((a - b).abs() < 1e-6);
        }
    }
    assert!(prediction_head(&random_mat(2, 4, 0), head).is_err());
}

use std::path::Path;

use serde_json::json;

use proxymim::analysis::{
    attention_distance, map_entropy, mean_proxy_heatmaps, record_attention, render_heatmap, write_attention_csv,
    AttentionQuery, DistanceProfile, HeadSel, LayerSel, QueryKind,
};
use proxymim::patchify::Image;
use proxymim::pretrain::Checkpoint;
use proxymim::{pnm, Error, Model, Result};

use super::{check_compatible, csv_error, open_checkpoint, open_dataset, prepare_out, write_json};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layers {
    All,
    Last,
}

pub fn parse_layers(s: &str) -> Result<Layers> {
    match s {
        "all" => Ok(Layers::All),
        "last" => Ok(Layers::Last),
        _ => Err(Error::Input(format!("--layers must be `all` or `last`, got {s:?}"))),
    }
}

pub fn parse_head(s: &str) -> Result<HeadSel> {
    if s == "mean" {
        return Ok(HeadSel::Mean);
    }
    s.parse()
        .map(HeadSel::Index)
        .map_err(|_| Error::Input(format!("--head must be `mean` or a head index, got {s:?}")))
}

/// `patch:R,C` or `proxy:K`, checked against the model geometry.
pub fn parse_query(s: &str, side: usize, proxies: usize) -> Result<QueryKind> {
    let bad = || Error::Input(format!("--query must be `patch:R,C` or `proxy:K`, got {s:?}"));
    let (kind, rest) = s.split_once(':').ok_or_else(bad)?;
    match kind {
        "patch" => {
            let (r, c) = rest.split_once(',').ok_or_else(bad)?;
            let r: usize = r.trim().parse().map_err(|_| bad())?;
            let c: usize = c.trim().parse().map_err(|_| bad())?;
            if r >= side || c >= side {
                return Err(Error::Input(format!(
                    "patch {r},{c} out of range: rows and columns run 0..{side}"
                )));
            }
            Ok(QueryKind::Patch(r * side + c))
        }
        "proxy" => {
            let k: usize = rest.trim().parse().map_err(|_| bad())?;
            if k >= proxies {
                return Err(Error::Input(format!(
                    "proxy {k} out of range: valid proxy indices 0..{proxies}"
                )));
            }
            Ok(QueryKind::Proxy(k))
        }
        _ => Err(bad()),
    }
}

fn layer_list(layers: Layers, depth: usize) -> Vec<usize> {
    match layers {
        Layers::All => (0..depth).collect(),
        Layers::Last => vec![depth.saturating_sub(1)],
    }
}

fn write_source(out: &Path, ckpt: &Checkpoint, checkpoint: &Path, extra: serde_json::Value) -> Result<()> {
    write_json(
        &out.join("source.json"),
        &json!({ "checkpoint": checkpoint.display().to_string(), "config_hash": ckpt.config_hash, "details": extra }),
    )
}

pub enum ImageSource<'a> {
    File(&'a Path),
    Dataset(&'a Path, usize),
}

fn load_image(model: &Model<f32>, src: &ImageSource<'_>) -> Result<Image> {
    let image = match src {
        ImageSource::File(p) => pnm::read(p)?,
        ImageSource::Dataset(dir, index) => {
            let items = open_dataset(dir, None)?;
            let n = items.len();
            items
                .into_iter()
                .nth(*index)
                .ok_or_else(|| Error::Input(format!("image index {index} out of range: dataset has 0..{n}")))?
                .image
        }
    };
    let c = &model.config;
    if image.height != c.image_size || image.width != c.image_size || image.channels != c.channels {
        return Err(Error::Data(format!(
            "image is {}x{}x{}, model expects {s}x{s}x{}",
            image.height,
            image.width,
            image.channels,
            c.channels,
            s = c.image_size
        )));
    }
    Ok(image)
}

#[allow(clippy::too_many_arguments)]
pub fn attmap(checkpoint: &Path, src: ImageSource<'_>, query: &str, layers: Layers, head: &str, out: &Path, force: bool) -> Result<()> {
    let (ckpt, model) = open_checkpoint(checkpoint)?;
    let c = &model.config;
    let kind = parse_query(query, c.grid_side(), c.proxy_count)?;
    let head = parse_head(head)?;
    if let HeadSel::Index(h) = head {
        if h >= c.heads {
            return Err(Error::Input(format!("head {h} out of range: valid heads 0..{}", c.heads)));
        }
    }
    let image = load_image(&model, &src)?;
    prepare_out(out, force)?;
    let record = record_attention(&model, std::slice::from_ref(&image))?.remove(0);
    let side = c.grid_side();
    let ls = layer_list(layers, c.depth);
    for &l in &ls {
        let q = AttentionQuery { kind, layer: LayerSel::Index(l), head };
        let map = proxymim::analysis::attention_map_from_record(&record, side, side, &q)?;
        let pgm = out.join(format!("attmap_layer{l}.pgm"));
        let overlay = out.join(format!("attmap_layer{l}_overlay.ppm"));
        render_heatmap(&map, c.patch_size, &pgm, Some((&image, &overlay)))?;
    }
    let csv_path = out.join("attention.csv");
    let mut f = std::io::BufWriter::new(std::fs::File::create(&csv_path).map_err(|e| Error::io(&csv_path, e))?);
    write_attention_csv(&mut f, &record, &ls)?;
    write_source(out, &ckpt, checkpoint, json!({ "query": query, "layers": ls }))?;
    println!("wrote {} attention map(s) to {}", ls.len(), out.display());
    Ok(())
}

pub fn attdist(checkpoint: &Path, dataset: &Path, limit: usize, out: &Path, force: bool) -> Result<DistanceProfile> {
    let (ckpt, model) = open_checkpoint(checkpoint)?;
    let items = open_dataset(dataset, Some(limit))?;
    check_compatible(&model.config, &items)?;
    prepare_out(out, force)?;
    let images: Vec<Image> = items.into_iter().map(|i| i.image).collect();
    let c = &model.config;
    let mut profiles = Vec::with_capacity(images.len());
    for chunk in images.chunks(64) {
        for rec in record_attention(&model, chunk)? {
            profiles.push(attention_distance(&rec, c.grid_side(), c.patch_size));
        }
    }
    let profile = DistanceProfile::mean(&profiles).expect("at least one image");
    let path = out.join("attention_distance.csv");
    let err = csv_error(&path);
    let mut w = csv::Writer::from_path(&path).map_err(&err)?;
    w.write_record(["layer", "head", "distance_px"]).map_err(&err)?;
    for (l, heads) in profile.values.iter().enumerate() {
        for (h, v) in heads.iter().enumerate() {
            w.write_record([l.to_string(), h.to_string(), v.to_string()]).map_err(&err)?;
        }
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    write_source(out, &ckpt, checkpoint, json!({ "images": images.len() }))?;
    for (l, m) in profile.layer_means().iter().enumerate() {
        println!("layer {l}: mean attention distance {m:.3} px");
    }
    Ok(profile)
}

pub fn heatmap(checkpoint: &Path, dataset: &Path, limit: usize, layers: Layers, out: &Path, force: bool) -> Result<Vec<f64>> {
    let (ckpt, model) = open_checkpoint(checkpoint)?;
    let items = open_dataset(dataset, Some(limit))?;
    check_compatible(&model.config, &items)?;
    let c = &model.config;
    if c.proxy_count == 0 || c.mode != proxymim::Mode::Proxy {
        return Err(Error::Input("heatmaps need a proxy-mode model with at least one proxy token".into()));
    }
    prepare_out(out, force)?;
    let images: Vec<Image> = items.into_iter().map(|i| i.image).collect();
    let path = out.join("proxy_entropy.csv");
    let err = csv_error(&path);
    let mut w = csv::Writer::from_path(&path).map_err(&err)?;
    w.write_record(["layer", "proxy", "entropy"]).map_err(&err)?;
    let mut entropies = Vec::new();
    for l in layer_list(layers, c.depth) {
        let maps = mean_proxy_heatmaps(&model, &images, LayerSel::Index(l))?;
        for (k, m) in maps.iter().enumerate() {
            let name = match layers {
                Layers::Last => format!("proxy{k}.pgm"),
                Layers::All => format!("layer{l}_proxy{k}.pgm"),
            };
            render_heatmap(m, c.patch_size, &out.join(name), None)?;
            let e = map_entropy(m);
            entropies.push(e);
            w.write_record([l.to_string(), k.to_string(), e.to_string()]).map_err(&err)?;
        }
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    write_source(out, &ckpt, checkpoint, json!({ "images": images.len() }))?;
    println!("wrote {} proxy heatmaps to {}", entropies.len(), out.display());
    Ok(entropies)
}

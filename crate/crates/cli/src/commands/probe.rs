use std::fs::OpenOptions;
use std::path::Path;

use rand::seq::SliceRandom;

use proxymim::data::{write_raw_tensor, LabeledImage, RawData, RawTensor, ShapeKind};
use proxymim::patchify::Image;
use proxymim::probe::{extract_features, extract_patch_features, linear_probe, Pooling, ProbeResult};
use proxymim::rng::{SeedStreams, Stream};
use proxymim::{Error, Mat, Model, Result};

use super::{check_compatible, csv_error, open_checkpoint, open_dataset};
use crate::config::{ProbeSection, ProbeTask, RunConfig};

#[derive(Debug, Clone)]
pub struct ProbeOutcome {
    pub layer: usize,
    pub result: ProbeResult,
    pub n_train: usize,
    pub n_eval: usize,
}

fn labels(items: &[LabeledImage], task: ProbeTask) -> Result<(Vec<usize>, usize)> {
    match task {
        ProbeTask::Image => Ok((items.iter().map(|i| i.class_label).collect(), ShapeKind::ALL.len())),
        ProbeTask::Patch => {
            let mut out = Vec::new();
            for (i, item) in items.iter().enumerate() {
                let c = item
                    .patch_classes()
                    .ok_or_else(|| Error::Data(format!("image {i} has no patch labels")))?;
                out.extend(c.into_iter().map(|v| v as usize));
            }
            Ok((out, 1 + ShapeKind::ALL.len()))
        }
    }
}

/// Splits by image, extracts frozen features and fits the linear probe.
pub fn evaluate(
    model: &Model<f32>,
    items: &[LabeledImage],
    section: &ProbeSection,
    shuffle_labels: bool,
    export: Option<&Path>,
) -> Result<ProbeOutcome> {
    check_compatible(&model.config, items)?;
    let n_train = ((items.len() as f64) * section.train_fraction).round() as usize;
    if n_train == 0 || n_train >= items.len() {
        return Err(Error::Data(format!(
            "train_fraction {} leaves an empty split of {} images",
            section.train_fraction,
            items.len()
        )));
    }
    let (train, eval) = items.split_at(n_train);
    let spec = section.features(model.config.depth);
    let images = |s: &[LabeledImage]| s.iter().map(|i| i.image.clone()).collect::<Vec<Image>>();
    let (xa, xb) = match section.task {
        ProbeTask::Image => (
            extract_features(model, &images(train), &spec)?,
            extract_features(model, &images(eval), &spec)?,
        ),
        ProbeTask::Patch => {
            spec.validate(model)?;
            (
                extract_patch_features(model, &images(train), spec.layer_index, spec.normalize)?,
                extract_patch_features(model, &images(eval), spec.layer_index, spec.normalize)?,
            )
        }
    };
    let (mut ya, classes) = labels(train, section.task)?;
    let (yb, _) = labels(eval, section.task)?;
    if let Some(dir) = export {
        export_split(dir, "train", &xa, &ya)?;
        export_split(dir, "eval", &xb, &yb)?;
    }
    if shuffle_labels {
        ya.shuffle(&mut SeedStreams::new(section.seed).rng(Stream::Probe, u64::MAX));
    }
    let result = linear_probe(&xa, &ya, &xb, &yb, classes, &section.classifier())?;
    Ok(ProbeOutcome { layer: spec.layer_index, result, n_train: ya.len(), n_eval: yb.len() })
}

/// `{split}_features.rten` (f32, rows × dim) and `{split}_labels.rten` (i32).
fn export_split(dir: &Path, split: &str, x: &Mat<f32>, y: &[usize]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let features = RawTensor::new(vec![x.rows, x.cols], RawData::F32(x.data.clone()))?;
    write_raw_tensor(&dir.join(format!("{split}_features.rten")), &features)?;
    let labels = RawTensor::new(vec![y.len()], RawData::I32(y.iter().map(|&v| v as i32).collect()))?;
    write_raw_tensor(&dir.join(format!("{split}_labels.rten")), &labels)
}

pub const REPORT_HEADER: [&str; 10] = [
    "config_hash",
    "checkpoint",
    "task",
    "layer",
    "pooling",
    "normalize",
    "train_accuracy",
    "eval_accuracy",
    "n_train",
    "n_eval",
];

pub struct ProbeArgs<'a> {
    pub checkpoint: &'a Path,
    pub dataset: &'a Path,
    pub report: &'a Path,
    pub shuffle_labels: bool,
    pub export: Option<&'a Path>,
}

pub fn run(cfg: &RunConfig, args: &ProbeArgs<'_>) -> Result<ProbeOutcome> {
    let (checkpoint, report) = (args.checkpoint, args.report);
    let (ckpt, model) = open_checkpoint(checkpoint)?;
    let items = open_dataset(args.dataset, None)?;
    let outcome = evaluate(&model, &items, &cfg.probe, args.shuffle_labels, args.export)?;
    if let Some(dir) = report.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let fresh = !report.exists();
    let file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(report)
        .map_err(|e| Error::io(report, e))?;
    let mut w = csv::Writer::from_writer(file);
    let err = csv_error(report);
    if fresh {
        w.write_record(REPORT_HEADER).map_err(&err)?;
    }
    let pooling = match (cfg.probe.task, cfg.probe.pooling) {
        (crate::config::ProbeTask::Patch, _) => "patch".to_string(),
        (_, Pooling::MeanImg) => "mean_img".to_string(),
        (_, Pooling::Cls(k)) => format!("cls:{k}"),
    };
    let task = match cfg.probe.task {
        ProbeTask::Patch => "patch",
        ProbeTask::Image => "image",
    };
    w.write_record([
        ckpt.config_hash.clone().unwrap_or_default(),
        checkpoint.display().to_string(),
        task.to_string(),
        outcome.layer.to_string(),
        pooling,
        cfg.probe.normalize.to_string(),
        outcome.result.train_accuracy.to_string(),
        outcome.result.eval_accuracy.to_string(),
        outcome.n_train.to_string(),
        outcome.n_eval.to_string(),
    ])
    .map_err(&err)?;
    w.flush().map_err(|e| Error::io(report, e))?;
    println!(
        "{task} probe at layer {}: train {:.4}, eval {:.4}",
        outcome.layer, outcome.result.train_accuracy, outcome.result.eval_accuracy
    );
    Ok(outcome)
}

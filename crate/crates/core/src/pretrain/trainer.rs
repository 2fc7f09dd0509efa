//! One optimization step and the epoch-based training loop around it.

use rand::seq::SliceRandom;
use rand::Rng as _;

use super::augment::augment;
use super::checkpoint::Checkpoint;
use super::optim::{clip_global_norm, AdamW};
use super::recipe::Recipe;
use super::schedule::Schedule;
use crate::data::kmeans::train_codebook;
use crate::encoder::{BranchScales, ForwardOptions};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, OutputGrads};
use crate::nn::Params;
use crate::patchify::{patchify, sample_masking_plan, sample_overlapping_plan, Image, MaskingPlan};
use crate::rng::{SeedStreams, Stream};
use crate::targets::{codebook_target, hog_target, masked_objective, pixel_target, TargetBatch, TargetKind};
use crate::tensor::Mat;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
}

/// Per-layer, per-sample stochastic-depth multipliers (`0` or `1/(1-rate)`)
/// for the attention, MLP, cross-attention and second MLP branches.
pub fn drop_path_scales(config: &ModelConfig, batch: usize, seed: u64, step: u64) -> Option<Vec<Vec<BranchScales<f32>>>> {
    if config.drop_path <= 0.0 {
        return None;
    }
    let enc = config.encoder();
    let streams = SeedStreams::new(seed);
    let mut out = vec![Vec::with_capacity(batch); config.depth];
    for b in 0..batch {
        let mut rng = streams.rng2(Stream::DropPath, step, b as u64);
        for (layer, row) in out.iter_mut().enumerate() {
            let rate = enc.drop_rate(layer);
            let mut s = [1f32; 4];
            for v in &mut s {
                let keep = rng.random::<f64>() >= rate;
                *v = if keep { (1.0 / (1.0 - rate)) as f32 } else { 0.0 };
            }
            row.push(s);
        }
    }
    Some(out)
}

pub fn masking_plans(recipe: &Recipe, n_patches: usize, batch: usize, step: u64) -> Result<Vec<MaskingPlan>> {
    let streams = SeedStreams::new(recipe.seed);
    (0..batch)
        .map(|b| {
            let mut rng = streams.rng2(Stream::Masking, step, b as u64);
            if recipe.overlapping_mask {
                sample_overlapping_plan(n_patches, recipe.mask_ratio, &mut rng)
            } else {
                sample_masking_plan(n_patches, recipe.mask_ratio, &mut rng)
            }
        })
        .collect()
}

pub fn make_targets(config: &ModelConfig, image: &Image, plan: &MaskingPlan, codebook: Option<&Mat<f32>>) -> Result<TargetBatch> {
    let t = &config.target;
    match t.kind {
        TargetKind::Pixel => pixel_target(image, config.patch_size, plan, t.normalize_per_patch),
        TargetKind::Hog => hog_target(image, config.patch_size, plan, &t.hog),
        TargetKind::Code => {
            let cb = codebook.ok_or_else(|| Error::Config("code targets need a trained codebook".into()))?;
            codebook_target(image, config.patch_size, plan, cb)
        }
    }
}

fn first_non_finite<P: Params<f32>>(p: &P) -> Option<String> {
    let mut found = None;
    p.visit("", &mut |n, _, d| {
        if found.is_none() && d.iter().any(|v| !v.is_finite()) {
            found = Some(n.to_string());
        }
    });
    found
}

/// Mask, encode, predict, score, back-propagate and apply one AdamW update.
/// On a non-finite loss or gradient nothing is modified and the error names
/// the first offending tensor.
pub fn train_step(
    model: &mut Model<f32>,
    opt: &mut AdamW,
    recipe: &Recipe,
    lr: f64,
    images: &[Image],
    step: u64,
    codebook: Option<&Mat<f32>>,
) -> Result<StepReport> {
    let plans = masking_plans(recipe, model.config.n_patches(), images.len(), step)?;
    train_step_with_plans(model, opt, recipe, lr, images, &plans, step, codebook)
}

/// [`train_step`] with caller-chosen masking plans.
#[allow(clippy::too_many_arguments)]
pub fn train_step_with_plans(
    model: &mut Model<f32>,
    opt: &mut AdamW,
    recipe: &Recipe,
    lr: f64,
    images: &[Image],
    plans: &[MaskingPlan],
    step: u64,
    codebook: Option<&Mat<f32>>,
) -> Result<StepReport> {
    let cfg = model.config.clone();
    let grids = images
        .iter()
        .map(|im| patchify(im, cfg.patch_size))
        .collect::<Result<Vec<_>>>()?;
    let targets = TargetBatch::concat(
        images
            .iter()
            .zip(plans)
            .map(|(im, p)| make_targets(&cfg, im, p, codebook))
            .collect::<Result<Vec<_>>>()?,
    )?;
    let scales = drop_path_scales(&cfg, images.len(), recipe.seed, step);
    let opts = ForwardOptions { drop_path: scales.as_deref(), ..Default::default() };
    let (out, cache) = model.forward(&grids, plans, &opts)?;
    let pred = out
        .predictions
        .ok_or_else(|| Error::Config("cannot pre-train a model without its prediction head".into()))?;
    let (loss, dpred) = masked_objective(&pred, &targets)?;
    if !loss.is_finite() {
        let culprit = first_non_finite(model)
            .or_else(|| (!pred.is_finite()).then(|| "predictions".to_string()))
            .unwrap_or_else(|| "loss".to_string());
        return Err(Error::Numeric(format!("step {step}: loss is {loss}; first non-finite tensor: {culprit}")));
    }
    let mut grads = model.backward(&cache, &OutputGrads { predictions: Some(dpred), ..Default::default() })?;
    if let Some(name) = first_non_finite(&grads) {
        return Err(Error::Numeric(format!("step {step}: non-finite gradient in {name}")));
    }
    let grad_norm = match recipe.grad_clip {
        Some(c) => clip_global_norm(&mut grads, c),
        None => super::optim::global_norm(&grads),
    };
    let backup = (model.clone(), opt.clone());
    opt.update(model, &grads, lr)?;
    if let Some(name) = first_non_finite(model) {
        (*model, *opt) = backup;
        return Err(Error::Numeric(format!("step {step}: update made {name} non-finite")));
    }
    Ok(StepReport { step, lr, loss: loss as f64, grad_norm })
}

/// Training state: model, optimizer, schedule position and the dataset.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: Model<f32>,
    pub opt: AdamW,
    pub recipe: Recipe,
    pub schedule: Schedule,
    pub step: u64,
    pub codebook: Option<Mat<f32>>,
    images: Vec<Image>,
    perm: Option<(u64, Vec<usize>)>,
}

fn check_images(config: &ModelConfig, images: &[Image]) -> Result<()> {
    if images.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    for (i, im) in images.iter().enumerate() {
        if im.height != config.image_size || im.width != config.image_size || im.channels != config.channels {
            return Err(Error::Data(format!(
                "image {i} is {}x{}x{}, model expects {s}x{s}x{}",
                im.height,
                im.width,
                im.channels,
                config.channels,
                s = config.image_size
            )));
        }
    }
    Ok(())
}

impl Trainer {
    pub fn new(config: &ModelConfig, recipe: &Recipe, images: Vec<Image>) -> Result<Self> {
        recipe.validate()?;
        config.validate()?;
        check_images(config, &images)?;
        let model = Model::init(config, recipe.seed)?;
        let codebook = if config.target.kind == TargetKind::Code {
            let mut points = Vec::with_capacity(images.len() * config.n_patches());
            for im in &images {
                points.extend(patchify(im, config.patch_size)?.patches);
            }
            let t = &config.target;
            Some(train_codebook(&points, t.codebook_size, t.codebook_iterations, recipe.seed)?.codebook)
        } else {
            None
        };
        let opt = AdamW::new(&model, recipe.adam_beta, recipe.adam_eps, recipe.weight_decay);
        let schedule = Schedule::new(recipe, images.len());
        Ok(Self { model, opt, recipe: recipe.clone(), schedule, step: 0, codebook, images, perm: None })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint, images: Vec<Image>) -> Result<Self> {
        let model = ckpt.model()?;
        check_images(&model.config, &images)?;
        let opt = ckpt.optimizer(&model)?;
        let schedule = Schedule::new(&ckpt.recipe, images.len());
        Ok(Self {
            model,
            opt,
            recipe: ckpt.recipe.clone(),
            schedule,
            step: ckpt.step,
            codebook: ckpt.codebook()?,
            images,
            perm: None,
        })
    }

    pub fn total_steps(&self) -> u64 {
        self.schedule.total
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.schedule.total
    }

    /// Dataset indices for `step`: a seeded permutation per epoch, consumed
    /// cyclically so batches larger than the dataset still work.
    pub fn batch_indices(&mut self, step: u64) -> Vec<usize> {
        let n = self.images.len() as u64;
        let b = self.recipe.batch_size as u64;
        let spe = self.recipe.steps_per_epoch(self.images.len());
        let epoch = step / spe;
        let start = (step % spe) * b;
        if self.perm.as_ref().map(|p| p.0) != Some(epoch) {
            let mut p: Vec<usize> = (0..self.images.len()).collect();
            p.shuffle(&mut SeedStreams::new(self.recipe.seed).rng(Stream::Batching, epoch));
            self.perm = Some((epoch, p));
        }
        let perm = &self.perm.as_ref().unwrap().1;
        (0..b).map(|j| perm[((start + j) % n) as usize]).collect()
    }

    pub fn batch_images(&mut self, step: u64) -> Vec<Image> {
        let streams = SeedStreams::new(self.recipe.seed);
        self.batch_indices(step)
            .into_iter()
            .enumerate()
            .map(|(j, i)| augment(&self.images[i], &self.recipe, &mut streams.rng2(Stream::Augment, step, j as u64)))
            .collect()
    }

    pub fn train_one(&mut self) -> Result<StepReport> {
        let step = self.step;
        let images = self.batch_images(step);
        let lr = self.schedule.lr(step);
        let report = train_step(&mut self.model, &mut self.opt, &self.recipe, lr, &images, step, self.codebook.as_ref())?;
        self.step += 1;
        Ok(report)
    }

    pub fn checkpoint(&self, config_hash: Option<&str>) -> Checkpoint {
        Checkpoint::from_training(
            &self.model,
            Some(&self.opt),
            &self.recipe,
            self.step,
            self.codebook.as_ref(),
            config_hash,
        )
    }
}

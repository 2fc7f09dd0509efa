use std::path::{Path, PathBuf};

use proxymim::data::LabeledImage;
use proxymim::pretrain::{load_checkpoint, save_checkpoint, Trainer};
use proxymim::{Error, Result};

use super::probe::evaluate;
use super::{csv_error, prepare_out, write_config};
use crate::config::{apply_point, expand, RunConfig, SweepAxis};

pub const LOG_HEADER: [&str; 3] = ["step", "lr", "loss"];
pub const SUMMARY_HEADER: [&str; 6] = ["axis", "value", "final_loss", "probe_accuracy", "steps", "config_hash"];

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub final_loss: f64,
    pub steps: u64,
    pub checkpoint: PathBuf,
}

/// Trains to completion, logging every step and writing periodic and final
/// checkpoints. On a numeric failure the last good state is saved as
/// `last_good.pmim` before the error is returned.
pub fn train(cfg: &RunConfig, items: &[LabeledImage], out: &Path, resume: Option<&Path>) -> Result<TrainOutcome> {
    write_config(out, cfg)?;
    let hash = cfg.hash();
    let images = items.iter().map(|i| i.image.clone()).collect();
    let mut trainer = match resume {
        Some(p) => {
            let ckpt = load_checkpoint(p)?;
            if ckpt.model != cfg.model || ckpt.recipe != cfg.recipe {
                return Err(Error::Config(format!(
                    "{} was produced by a different model or recipe configuration",
                    p.display()
                )));
            }
            Trainer::from_checkpoint(&ckpt, images)?
        }
        None => Trainer::new(&cfg.model, &cfg.recipe, images)?,
    };
    let ckpt_dir = out.join("checkpoints");
    std::fs::create_dir_all(&ckpt_dir).map_err(|e| Error::io(&ckpt_dir, e))?;
    let log_path = out.join("train_log.csv");
    let err = csv_error(&log_path);
    let mut log = if resume.is_some() && log_path.exists() {
        let f = std::fs::OpenOptions::new()
            .append(true)
            .open(&log_path)
            .map_err(|e| Error::io(&log_path, e))?;
        csv::Writer::from_writer(f)
    } else {
        let mut w = csv::Writer::from_path(&log_path).map_err(&err)?;
        w.write_record(LOG_HEADER).map_err(&err)?;
        w
    };
    let mut final_loss = f64::NAN;
    while !trainer.is_done() {
        match trainer.train_one() {
            Ok(r) => {
                final_loss = r.loss;
                log.write_record([r.step.to_string(), r.lr.to_string(), r.loss.to_string()])
                    .map_err(&err)?;
                let every = cfg.recipe.checkpoint_every;
                if every > 0 && trainer.step % every == 0 && !trainer.is_done() {
                    let p = ckpt_dir.join(format!("step_{:06}.pmim", trainer.step));
                    save_checkpoint(&p, &trainer.checkpoint(Some(&hash)))?;
                }
            }
            Err(e) => {
                log.flush().map_err(|e| Error::io(&log_path, e))?;
                save_checkpoint(&out.join("last_good.pmim"), &trainer.checkpoint(Some(&hash)))?;
                return Err(e);
            }
        }
    }
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    let checkpoint = out.join("final.pmim");
    save_checkpoint(&checkpoint, &trainer.checkpoint(Some(&hash)))?;
    Ok(TrainOutcome { final_loss, steps: trainer.step, checkpoint })
}

pub fn run(cfg: &RunConfig, items: &[LabeledImage], out: &Path, force: bool, resume: Option<&Path>) -> Result<TrainOutcome> {
    if resume.is_none() {
        prepare_out(out, force)?;
    } else {
        std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    }
    let o = train(cfg, items, out, resume)?;
    println!("trained {} steps, final loss {:.6}, checkpoint {}", o.steps, o.final_loss, o.checkpoint.display());
    Ok(o)
}

/// Trains and probes every sweep point in its own sub-directory and writes
/// `sweep_summary.csv`.
pub fn sweep(cfg: &RunConfig, items: &[LabeledImage], out: &Path, force: bool, axes: &[SweepAxis], cross: bool) -> Result<()> {
    prepare_out(out, force)?;
    write_config(out, cfg)?;
    let path = out.join("sweep_summary.csv");
    let err = csv_error(&path);
    let mut summary = csv::Writer::from_path(&path).map_err(&err)?;
    summary.write_record(SUMMARY_HEADER).map_err(&err)?;
    for point in expand(axes, cross) {
        let pcfg = apply_point(cfg, &point)?;
        let dir = out.join(point.dir_name());
        prepare_out(&dir, force)?;
        let trained = train(&pcfg, items, &dir, None)?;
        let model = proxymim::pretrain::load_checkpoint(&trained.checkpoint)?.model()?;
        let probe = evaluate(&model, items, &pcfg.probe, false, None)?;
        summary
            .write_record([
                point.axis(),
                point.value(),
                trained.final_loss.to_string(),
                probe.result.eval_accuracy.to_string(),
                trained.steps.to_string(),
                pcfg.hash(),
            ])
            .map_err(&err)?;
        summary.flush().map_err(|e| Error::io(&path, e))?;
        println!(
            "{} = {}: final loss {:.6}, probe accuracy {:.4}",
            point.axis(),
            point.value(),
            trained.final_loss,
            probe.result.eval_accuracy
        );
    }
    Ok(())
}

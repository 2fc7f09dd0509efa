pub mod analyze;
pub mod probe;
pub mod synth;
pub mod train;

use std::path::{Path, PathBuf};

use serde_json::json;

use proxymim::data::{load_dataset, LabeledImage};
use proxymim::pretrain::{load_checkpoint, Checkpoint};
use proxymim::{Error, Model, ModelConfig, Result};

use crate::config::RunConfig;

pub const OUT_ENV: &str = "PROXYMIM_OUT";

/// `$PROXYMIM_OUT/<kind>-<hash>`, or `runs/<kind>-<hash>` when unset.
pub fn default_out(kind: &str, hash: &str) -> PathBuf {
    let root = std::env::var_os(OUT_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from);
    root.join(format!("{kind}-{hash}"))
}

/// Creates `dir`, refusing a non-empty existing one unless `force`.
pub fn prepare_out(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let non_empty = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?.next().is_some();
        if non_empty && !force {
            return Err(Error::Config(format!(
                "output directory {} exists and is not empty (pass --force to write into it)",
                dir.display()
            )));
        }
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("json serializes") + "\n";
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// `config.json` beside every artifact: resolved configuration plus hash.
pub fn write_config(dir: &Path, cfg: &RunConfig) -> Result<()> {
    write_json(&dir.join("config.json"), &json!({ "config_hash": cfg.hash(), "config": cfg }))
}

pub fn open_checkpoint(path: &Path) -> Result<(Checkpoint, Model<f32>)> {
    let ckpt = load_checkpoint(path)?;
    let model = ckpt.model()?;
    Ok((ckpt, model))
}

pub fn open_dataset(dir: &Path, limit: Option<usize>) -> Result<Vec<LabeledImage>> {
    let (_, mut items) = load_dataset(dir)?;
    if let Some(n) = limit {
        items.truncate(n);
    }
    if items.is_empty() {
        return Err(Error::Data(format!("dataset {} has no images", dir.display())));
    }
    Ok(items)
}

pub fn check_compatible(model: &ModelConfig, items: &[LabeledImage]) -> Result<()> {
    let im = &items[0].image;
    if im.height != model.image_size || im.width != model.image_size || im.channels != model.channels {
        return Err(Error::Data(format!(
            "dataset images are {}x{}x{}, checkpoint model expects {s}x{s}x{}",
            im.height,
            im.width,
            im.channels,
            model.channels,
            s = model.image_size
        )));
    }
    Ok(())
}

pub fn csv_error(path: &Path) -> impl Fn(csv::Error) -> Error + '_ {
    move |e| Error::Data(format!("{}: {e}", path.display()))
}

//! On-disk dataset: `images/NNNNNN.ppm` (or `.pgm`), `labels/NNNNNN.rten`
//! patch-label grids, and an `index.json` tying them together.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::raw_tensor::{read_raw_tensor, write_raw_tensor, RawData, RawTensor};
use super::synth::{LabeledImage, ShapeKind, SynthConfig};
use crate::error::{Error, Result};
use crate::pnm;

pub const INDEX_FILE: &str = "index.json";
pub const INDEX_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IndexEntry {
    pub image: String,
    pub class_label: usize,
    #[serde(default)]
    pub patch_labels: Option<String>,
    #[serde(default)]
    pub objects: Vec<ShapeKind>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetIndex {
    pub version: u32,
    pub image_size: usize,
    pub channels: usize,
    pub patch_size: usize,
    #[serde(default)]
    pub generator: Option<SynthConfig>,
    #[serde(default)]
    pub config_hash: Option<String>,
    pub entries: Vec<IndexEntry>,
}

pub fn save_dataset(
    dir: &Path,
    items: &[LabeledImage],
    patch_size: usize,
    generator: Option<&SynthConfig>,
    config_hash: Option<&str>,
) -> Result<DatasetIndex> {
    let first = items
        .first()
        .ok_or_else(|| Error::Data("refusing to write an empty dataset".into()))?;
    let (size, channels) = (first.image.height, first.image.channels);
    for sub in ["images", "labels"] {
        let p = dir.join(sub);
        std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let ext = if channels == 1 { "pgm" } else { "ppm" };
    let side = size / patch_size;
    let mut entries = Vec::with_capacity(items.len());
    for (i, item) in items.iter().enumerate() {
        let im = &item.image;
        if im.height != size || im.width != size || im.channels != channels {
            return Err(Error::Data(format!(
                "image {i} is {}x{}x{}, expected {size}x{size}x{channels}",
                im.height, im.width, im.channels
            )));
        }
        let image = format!("images/{i:06}.{ext}");
        pnm::write(&dir.join(&image), im)?;
        let patch_labels = match &item.patch_labels {
            Some(labels) => {
                let rel = format!("labels/{i:06}.rten");
                let data = RawData::I32(labels.iter().map(|&l| l as i32).collect());
                write_raw_tensor(&dir.join(&rel), &RawTensor::new(vec![side, side], data)?)?;
                Some(rel)
            }
            None => None,
        };
        entries.push(IndexEntry {
            image,
            class_label: item.class_label,
            patch_labels,
            objects: item.object_kinds.clone(),
        });
    }
    let index = DatasetIndex {
        version: INDEX_VERSION,
        image_size: size,
        channels,
        patch_size,
        generator: generator.cloned(),
        config_hash: config_hash.map(str::to_owned),
        entries,
    };
    let path = dir.join(INDEX_FILE);
    let json = serde_json::to_string_pretty(&index).expect("index serializes");
    std::fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(index)
}

pub fn read_index(dir: &Path) -> Result<DatasetIndex> {
    let path = dir.join(INDEX_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let index: DatasetIndex = serde_json::from_str(&text)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    if index.version != INDEX_VERSION {
        return Err(Error::Data(format!(
            "{}: unsupported index version {}",
            path.display(),
            index.version
        )));
    }
    if index.patch_size == 0 || index.image_size % index.patch_size != 0 {
        return Err(Error::Data(format!(
            "{}: image_size {} is not a multiple of patch_size {}",
            path.display(),
            index.image_size,
            index.patch_size
        )));
    }
    Ok(index)
}

pub fn load_dataset(dir: &Path) -> Result<(DatasetIndex, Vec<LabeledImage>)> {
    let index = read_index(dir)?;
    let side = index.image_size / index.patch_size;
    let mut items = Vec::with_capacity(index.entries.len());
    for entry in &index.entries {
        let image = pnm::read(&dir.join(&entry.image))?;
        if image.height != index.image_size || image.width != index.image_size || image.channels != index.channels {
            return Err(Error::Data(format!(
                "{} is {}x{}x{}, index declares {s}x{s}x{}",
                entry.image,
                image.height,
                image.width,
                image.channels,
                index.channels,
                s = index.image_size
            )));
        }
        let patch_labels = match &entry.patch_labels {
            Some(rel) => {
                let t = read_raw_tensor(&dir.join(rel))?;
                let RawData::I32(v) = t.data else {
                    return Err(Error::Data(format!("{rel}: patch labels must be i32")));
                };
                if t.shape != [side, side] {
                    return Err(Error::Data(format!(
                        "{rel}: label grid {:?} does not match the {side}x{side} patch grid",
                        t.shape
                    )));
                }
                if let Some(&bad) = v.iter().find(|&&l| l < 0 || l as usize > entry.objects.len()) {
                    return Err(Error::Data(format!(
                        "{rel}: object id {bad} outside 0..={}",
                        entry.objects.len()
                    )));
                }
                Some(v.into_iter().map(|l| l as u32).collect())
            }
            None => None,
        };
        items.push(LabeledImage {
            image,
            class_label: entry.class_label,
            patch_labels,
            object_kinds: entry.objects.clone(),
            shapes: Vec::new(),
        });
    }
    Ok((index, items))
}

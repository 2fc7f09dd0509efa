//! Run configuration: JSON sections, `--set` overrides, hashing and sweeps.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use proxymim::data::SynthConfig;
use proxymim::pretrain::Recipe;
use proxymim::probe::{FeatureSpec, Pooling, ProbeConfig};
use proxymim::{Error, ModelConfig, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProbeTask {
    /// One label per patch (background or shape kind) from image tokens.
    Patch,
    /// One label per image (dominant shape kind) from pooled features.
    Image,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeSection {
    pub task: ProbeTask,
    /// Hidden-state index; `null` picks `round(depth·7/12)`.
    pub layer: Option<usize>,
    pub pooling: Pooling,
    pub normalize: bool,
    /// Leading fraction of the dataset used for training, the rest for eval.
    pub train_fraction: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub standardize: bool,
    pub seed: u64,
}

impl Default for ProbeSection {
    fn default() -> Self {
        let c = ProbeConfig::default();
        Self {
            task: ProbeTask::Patch,
            layer: None,
            pooling: Pooling::MeanImg,
            normalize: false,
            train_fraction: 0.8,
            epochs: c.epochs,
            batch_size: c.batch_size,
            lr: c.lr,
            weight_decay: c.weight_decay,
            standardize: c.standardize,
            seed: c.seed,
        }
    }
}

impl ProbeSection {
    pub fn classifier(&self) -> ProbeConfig {
        ProbeConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            weight_decay: self.weight_decay,
            standardize: self.standardize,
            seed: self.seed,
        }
    }

    pub fn features(&self, depth: usize) -> FeatureSpec {
        FeatureSpec {
            layer_index: self.layer.unwrap_or_else(|| proxymim::probe::default_layer(depth)),
            pooling: self.pooling,
            normalize: self.normalize,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisSection {
    /// Images averaged by `heatmap` and `attdist`.
    pub max_images: usize,
}

impl Default for AnalysisSection {
    fn default() -> Self {
        Self { max_images: 500 }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: SynthConfig,
    pub model: ModelConfig,
    pub recipe: Recipe,
    pub probe: ProbeSection,
    pub analysis: AnalysisSection,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.model.validate()?;
        self.recipe.validate()?;
        let (d, m) = (&self.data, &self.model);
        if (d.image_size, d.channels, d.patch_size) != (m.image_size, m.channels, m.patch_size) {
            return Err(Error::Config(format!(
                "data produces {}x{} images with {} channels and patch {}, model expects {}x{} with {} and patch {}",
                d.image_size, d.image_size, d.channels, d.patch_size, m.image_size, m.image_size, m.channels, m.patch_size
            )));
        }
        if !(self.probe.train_fraction > 0.0 && self.probe.train_fraction < 1.0) {
            return Err(Error::Config(format!(
                "probe.train_fraction {} must lie in (0, 1)",
                self.probe.train_fraction
            )));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_vec(&serde_json::to_value(self).expect("config serializes"))
            .expect("value serializes");
        hex::encode(Sha256::digest(canonical))
    }

    pub fn short_hash(&self) -> String {
        self.hash()[..12].to_string()
    }
}

fn parse_error(origin: &str, e: serde_json::Error) -> Error {
    Error::Config(format!("{origin}: line {}, column {}: {e}", e.line(), e.column()))
}

/// Loads (or defaults) the configuration, then applies `--set` overrides.
pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let base: RunConfig = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            serde_json::from_str(&text).map_err(|e| parse_error(&p.display().to_string(), e))?
        }
        None => RunConfig::default(),
    };
    let mut value = serde_json::to_value(&base).expect("config serializes");
    for o in overrides {
        apply_override(&mut value, o)?;
    }
    let cfg: RunConfig = serde_json::from_value(value).map_err(|e| Error::Config(format!("after overrides: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Short sweep/override names for the two ablation axes.
pub fn canonical_key(key: &str) -> String {
    match key {
        "proxy_count" => "model.proxy_count".into(),
        "mask_ratio" => "recipe.mask_ratio".into(),
        k => k.to_string(),
    }
}

fn parse_scalar(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// `section.key[.sub]=value`; the key must already exist in the schema.
pub fn apply_override(root: &mut Value, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {spec:?} is not of the form key=value")))?;
    set_path(root, &canonical_key(key.trim()), parse_scalar(raw.trim()))
}

pub fn set_path(root: &mut Value, path: &str, value: Value) -> Result<()> {
    let mut node = root;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("{} is not a section", parts[..i].join("."))))?;
        let child = obj
            .get_mut(*part)
            .ok_or_else(|| Error::Config(format!("unknown configuration key {path}")))?;
        if i + 1 == parts.len() {
            *child = value;
            return Ok(());
        }
        node = child;
    }
    Err(Error::Config("empty override key".into()))
}

/// One sweep axis: a configuration path and the values it takes.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepAxis {
    pub name: String,
    pub path: String,
    pub values: Vec<Value>,
}

fn fmt_number(v: f64) -> Value {
    // Round away binary noise from stepping so 0.1 + 0.1 + 0.1 prints as 0.3.
    let r = (v * 1e9).round() / 1e9;
    serde_json::Number::from_f64(r).map_or(Value::Null, Value::Number)
}

/// `name=a,b,c` or `name=lo..hi[:step]` (inclusive, default step 0.1).
pub fn parse_sweep(spec: &str) -> Result<SweepAxis> {
    let (name, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("sweep {spec:?} is not of the form key=values")))?;
    let name = name.trim().to_string();
    let values = if let Some((lo, rest)) = raw.split_once("..") {
        let (hi, step) = rest.split_once(':').unwrap_or((rest, "0.1"));
        let num = |s: &str| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| Error::Config(format!("sweep {name}: {s:?} is not a number")))
        };
        let (lo, hi, step) = (num(lo)?, num(hi)?, num(step)?);
        if !(step > 0.0) || hi < lo {
            return Err(Error::Config(format!("sweep {name}: empty range {lo}..{hi}:{step}")));
        }
        let n = ((hi - lo) / step + 1e-9).floor() as usize;
        (0..=n).map(|i| fmt_number(lo + i as f64 * step)).collect()
    } else {
        raw.split(',').map(|s| parse_scalar(s.trim())).collect::<Vec<_>>()
    };
    if values.is_empty() {
        return Err(Error::Config(format!("sweep {name} has no values")));
    }
    Ok(SweepAxis { path: canonical_key(&name), name, values })
}

/// A single run of a sweep: the overrides that define it.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub assignments: Vec<(String, String, Value)>,
}

impl SweepPoint {
    pub fn axis(&self) -> String {
        self.assignments.iter().map(|a| a.0.as_str()).collect::<Vec<_>>().join("+")
    }

    pub fn value(&self) -> String {
        self.assignments.iter().map(|a| a.2.to_string()).collect::<Vec<_>>().join("+")
    }

    pub fn dir_name(&self) -> String {
        self.assignments
            .iter()
            .map(|a| format!("{}={}", a.0, a.2))
            .collect::<Vec<_>>()
            .join("_")
    }
}

/// One point per axis value, varying a single factor around the base
/// configuration, or the full cross-product when `cross` is set.
pub fn expand(axes: &[SweepAxis], cross: bool) -> Vec<SweepPoint> {
    if !cross {
        return axes
            .iter()
            .flat_map(|a| {
                a.values.iter().map(|v| SweepPoint { assignments: vec![(a.name.clone(), a.path.clone(), v.clone())] })
            })
            .collect();
    }
    let mut points = vec![SweepPoint { assignments: vec![] }];
    for a in axes {
        points = points
            .into_iter()
            .flat_map(|p| {
                a.values.iter().map(move |v| {
                    let mut q = p.clone();
                    q.assignments.push((a.name.clone(), a.path.clone(), v.clone()));
                    q
                })
            })
            .collect();
    }
    points
}

pub fn apply_point(base: &RunConfig, point: &SweepPoint) -> Result<RunConfig> {
    let mut value = serde_json::to_value(base).expect("config serializes");
    for (_, path, v) in &point.assignments {
        set_path(&mut value, path, v.clone())?;
    }
    let cfg: RunConfig = serde_json::from_value(value)
        .map_err(|e| Error::Config(format!("sweep point {}: {e}", point.dir_name())))?;
    cfg.validate()?;
    Ok(cfg)
}

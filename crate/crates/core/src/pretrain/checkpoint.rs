//! Checkpoint files: `PMIM`, `u32` version, `u64` metadata length, JSON
//! metadata with a tensor directory, then little-endian payloads in
//! directory order.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::optim::AdamW;
use super::recipe::Recipe;
use crate::encoder::RECONSTRUCTION_TENSORS;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::nn::Params;
use crate::tensor::{DType, Mat};

pub const MAGIC: &[u8; 4] = b"PMIM";
pub const VERSION: u32 = 1;
const HEADER: usize = 16;
pub const CODEBOOK_TENSOR: &str = "target.codebook";
const ADAM_M: &str = "adam.m.";
const ADAM_V: &str = "adam.v.";

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl TensorData {
    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::F64(_) => DType::F64,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: TensorData,
}

/// Counter-based RNG position: every draw is derived from `(seed, step)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RngState {
    pub seed: u64,
    pub step: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub recipe: Recipe,
    pub model: ModelConfig,
    pub step: u64,
    pub rng: RngState,
    /// Optimizer update count, `None` for weights-only checkpoints.
    pub optimizer_steps: Option<u64>,
    pub config_hash: Option<String>,
    pub tensors: Vec<NamedTensor>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DirEntry {
    name: String,
    dtype: DType,
    shape: Vec<usize>,
    offset: u64,
    nbytes: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Metadata {
    version: u32,
    recipe: Recipe,
    model: ModelConfig,
    step: u64,
    rng: RngState,
    optimizer_steps: Option<u64>,
    config_hash: Option<String>,
    tensors: Vec<DirEntry>,
}

fn fmt_err(detail: impl Into<String>) -> Error {
    Error::format("checkpoint", detail.into())
}

fn is_reconstruction(name: &str) -> bool {
    let base = name
        .strip_prefix(ADAM_M)
        .or_else(|| name.strip_prefix(ADAM_V))
        .unwrap_or(name);
    if base.starts_with("head.") {
        return true;
    }
    let parts: Vec<&str> = base.split('.').collect();
    parts.len() >= 3 && parts[0] == "blocks" && RECONSTRUCTION_TENSORS.contains(&parts[2])
}

impl Checkpoint {
    pub fn from_training(
        model: &Model<f32>,
        opt: Option<&AdamW>,
        recipe: &Recipe,
        step: u64,
        codebook: Option<&Mat<f32>>,
        config_hash: Option<&str>,
    ) -> Self {
        let mut tensors = Vec::new();
        model.visit("", &mut |n, s, d| {
            tensors.push(NamedTensor { name: n.to_string(), shape: s.to_vec(), data: TensorData::F32(d.to_vec()) })
        });
        if let Some(o) = opt {
            for (prefix, moments) in [(ADAM_M, &o.m), (ADAM_V, &o.v)] {
                for ((n, s), d) in o.names.iter().zip(&o.shapes).zip(moments) {
                    tensors.push(NamedTensor {
                        name: format!("{prefix}{n}"),
                        shape: s.clone(),
                        data: TensorData::F32(d.clone()),
                    });
                }
            }
        }
        if let Some(cb) = codebook {
            tensors.push(NamedTensor {
                name: CODEBOOK_TENSOR.into(),
                shape: vec![cb.rows, cb.cols],
                data: TensorData::F32(cb.data.clone()),
            });
        }
        Self {
            recipe: recipe.clone(),
            model: model.config.clone(),
            step,
            rng: RngState { seed: recipe.seed, step },
            optimizer_steps: opt.map(|o| o.t),
            config_hash: config_hash.map(str::to_owned),
            tensors,
        }
    }

    pub fn tensor(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    /// Removes the pre-training plugin (reconstruction blocks, prediction
    /// head and their optimizer moments).
    pub fn strip_reconstruction(&mut self) {
        self.tensors.retain(|t| !is_reconstruction(&t.name));
    }

    pub fn has_reconstruction(&self) -> bool {
        self.tensor("head.weight").is_some()
    }

    fn f32_tensor<'a>(&'a self, name: &str, shape: &[usize]) -> Result<&'a [f32]> {
        let t = self
            .tensor(name)
            .ok_or_else(|| fmt_err(format!("missing tensor {name}")))?;
        if t.shape != shape {
            return Err(Error::Shape(format!(
                "tensor {name} has shape {:?}, model expects {shape:?}",
                t.shape
            )));
        }
        match &t.data {
            TensorData::F32(v) => Ok(v),
            TensorData::F64(_) => Err(fmt_err(format!("tensor {name} is f64, expected f32"))),
        }
    }

    /// Rebuilds the model. Every checkpoint tensor must be claimed by the
    /// model, the optimizer or the codebook.
    pub fn model(&self) -> Result<Model<f32>> {
        let mut model = Model::init(&self.model, 0)?;
        if !self.has_reconstruction() {
            model.strip_reconstruction();
        }
        let mut expected: HashSet<String> = HashSet::new();
        model.visit("", &mut |n, _, _| {
            expected.insert(n.to_string());
        });
        for t in &self.tensors {
            let base = t
                .name
                .strip_prefix(ADAM_M)
                .or_else(|| t.name.strip_prefix(ADAM_V))
                .unwrap_or(&t.name);
            if !expected.contains(base) && t.name != CODEBOOK_TENSOR {
                return Err(fmt_err(format!("unknown tensor name {}", t.name)));
            }
        }
        let mut failure = None;
        model.visit_mut("", &mut |n, s, d| {
            if failure.is_some() {
                return;
            }
            match self.f32_tensor(n, s) {
                Ok(v) => d.copy_from_slice(v),
                Err(e) => failure = Some(e),
            }
        });
        match failure {
            Some(e) => Err(e),
            None => Ok(model),
        }
    }

    pub fn optimizer(&self, model: &Model<f32>) -> Result<AdamW> {
        let r = &self.recipe;
        let mut opt = AdamW::new(model, r.adam_beta, r.adam_eps, r.weight_decay);
        let Some(t) = self.optimizer_steps else {
            return Ok(opt);
        };
        opt.t = t;
        for i in 0..opt.names.len() {
            let n = opt.names[i].clone();
            opt.m[i] = self.f32_tensor(&format!("{ADAM_M}{n}"), &opt.shapes[i])?.to_vec();
            opt.v[i] = self.f32_tensor(&format!("{ADAM_V}{n}"), &opt.shapes[i])?.to_vec();
        }
        Ok(opt)
    }

    pub fn codebook(&self) -> Result<Option<Mat<f32>>> {
        match self.tensor(CODEBOOK_TENSOR) {
            None => Ok(None),
            Some(t) if t.shape.len() == 2 => {
                let TensorData::F32(v) = &t.data else {
                    return Err(fmt_err("codebook must be f32"));
                };
                Ok(Some(Mat::from_vec(t.shape[0], t.shape[1], v.clone())))
            }
            Some(t) => Err(fmt_err(format!("codebook has rank {}, expected 2", t.shape.len()))),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut offset = 0u64;
        let tensors = self
            .tensors
            .iter()
            .map(|t| {
                let nbytes = (t.data.len() * t.data.dtype().size()) as u64;
                let e = DirEntry {
                    name: t.name.clone(),
                    dtype: t.data.dtype(),
                    shape: t.shape.clone(),
                    offset,
                    nbytes,
                };
                offset += nbytes;
                e
            })
            .collect();
        let meta = Metadata {
            version: VERSION,
            recipe: self.recipe.clone(),
            model: self.model.clone(),
            step: self.step,
            rng: self.rng,
            optimizer_steps: self.optimizer_steps,
            config_hash: self.config_hash.clone(),
            tensors,
        };
        let json = serde_json::to_vec(&meta).expect("metadata serializes");
        let mut out = Vec::with_capacity(HEADER + json.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in &self.tensors {
            match &t.data {
                TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER {
            return Err(fmt_err(format!(
                "header truncated: expected {HEADER} bytes, found {}",
                bytes.len()
            )));
        }
        if &bytes[..4] != MAGIC {
            return Err(fmt_err(format!("magic: found {:?}, expected \"PMIM\"", &bytes[..4])));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(fmt_err(format!("version: found {version}, this build reads {VERSION}")));
        }
        let json_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
        let rest = (bytes.len() - HEADER) as u64;
        if json_len > rest {
            return Err(fmt_err(format!(
                "metadata truncated: expected {json_len} bytes, found {rest}"
            )));
        }
        let json_end = HEADER + json_len as usize;
        let meta: Metadata = serde_json::from_slice(&bytes[HEADER..json_end])
            .map_err(|e| fmt_err(format!("metadata: {e}")))?;
        if meta.version != VERSION {
            return Err(fmt_err(format!(
                "metadata version {} disagrees with header version {VERSION}",
                meta.version
            )));
        }
        let payload = &bytes[json_end..];
        let mut seen = BTreeMap::new();
        let mut cursor = 0u64;
        let mut tensors = Vec::with_capacity(meta.tensors.len());
        for e in meta.tensors {
            if seen.insert(e.name.clone(), ()).is_some() {
                return Err(fmt_err(format!("tensor {} listed twice", e.name)));
            }
            let count = e
                .shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| fmt_err(format!("tensor {}: shape overflows", e.name)))?;
            let nbytes = count as u64 * e.dtype.size() as u64;
            if e.nbytes != nbytes || e.offset != cursor {
                return Err(fmt_err(format!(
                    "tensor {}: directory says {} bytes at offset {}, expected {nbytes} at {cursor}",
                    e.name, e.nbytes, e.offset
                )));
            }
            let end = cursor + nbytes;
            if end > payload.len() as u64 {
                return Err(fmt_err(format!(
                    "payload truncated in tensor {}: expected {} bytes, found {}",
                    e.name,
                    end,
                    payload.len()
                )));
            }
            let raw = &payload[cursor as usize..end as usize];
            let data = match e.dtype {
                DType::F32 => TensorData::F32(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect()),
                DType::F64 => TensorData::F64(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()),
            };
            tensors.push(NamedTensor { name: e.name, shape: e.shape, data });
            cursor = end;
        }
        if cursor != payload.len() as u64 {
            return Err(fmt_err(format!(
                "{} trailing bytes after the last tensor",
                payload.len() as u64 - cursor
            )));
        }
        Ok(Self {
            recipe: meta.recipe,
            model: meta.model,
            step: meta.step,
            rng: meta.rng,
            optimizer_steps: meta.optimizer_steps,
            config_hash: meta.config_hash,
            tensors,
        })
    }
}

/// Writes through a temporary sibling and renames, so an interrupted save
/// never clobbers the previous file.
pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, ckpt.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}

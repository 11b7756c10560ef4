//! On-disk model layout: `model.safetensors` (backbone tensors in `f32`
//! under their dotted names, head tensors in `f64`) and a `model.json`
//! sidecar.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use safetensors::tensor::TensorView;
use safetensors::{Dtype, SafeTensors};
use serde::{Deserialize, Serialize};

use super::{lookup_backbone, ClassifierModel, ParamSubset, TrainStrategy, N_CLASSES};
use crate::error::{Error, Result};

pub const HEAD_WEIGHT: &str = "head.weight";
pub const HEAD_BIAS: &str = "head.bias";
pub const WEIGHTS_FILE: &str = "model.safetensors";
pub const SIDECAR_FILE: &str = "model.json";
const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParameterHashes {
    pub backbone: String,
    pub head: String,
    pub all: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSidecar {
    pub format_version: u32,
    pub backbone: String,
    pub arch: String,
    pub strategy: TrainStrategy,
    pub input_size: u32,
    pub feature_dim: usize,
    pub seed: u64,
    /// Normalization the model was trained with.
    pub mean: [f32; 3],
    pub std: [f32; 3],
    pub hashes: ParameterHashes,
}

impl ModelSidecar {
    pub fn from_json(text: &str) -> Result<Self> {
        let s: Self = serde_json::from_str(text)?;
        if s.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format_version {}",
                s.format_version
            )));
        }
        Ok(s)
    }
}

fn bytes_f32(v: &[f32]) -> Vec<u8> {
    v.iter().flat_map(|x| x.to_le_bytes()).collect()
}

fn bytes_f64(v: &[f64]) -> Vec<u8> {
    v.iter().flat_map(|x| x.to_le_bytes()).collect()
}

fn ckpt_err(e: safetensors::SafeTensorError) -> Error {
    Error::Checkpoint(e.to_string())
}

/// Every `F32` tensor of a safetensors blob, by name. Other dtypes are
/// skipped.
pub(crate) fn read_f32_tensors(bytes: &[u8]) -> Result<HashMap<String, Vec<f32>>> {
    let st = SafeTensors::deserialize(bytes).map_err(ckpt_err)?;
    Ok(st
        .iter()
        .filter(|(_, v)| v.dtype() == Dtype::F32)
        .map(|(name, v)| {
            let vals = v
                .data()
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            (name.to_string(), vals)
        })
        .collect())
}

fn read_f64(st: &SafeTensors, name: &str, shape: &[usize]) -> Result<Vec<f64>> {
    let v = st.tensor(name).map_err(ckpt_err)?;
    if v.dtype() != Dtype::F64 || v.shape() != shape {
        return Err(Error::Checkpoint(format!(
            "{name}: expected F64 {shape:?}, found {:?} {:?}",
            v.dtype(),
            v.shape()
        )));
    }
    Ok(v.data()
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

/// Serializes the model's tensors.
pub fn checkpoint_bytes(model: &ClassifierModel) -> Result<Vec<u8>> {
    let mut owned: Vec<(String, Dtype, Vec<usize>, Vec<u8>)> = Vec::new();
    for (name, p) in model.backbone().named_params() {
        owned.push((name, Dtype::F32, p.shape.clone(), bytes_f32(&p.value)));
    }
    for (name, b) in model.backbone().named_buffers() {
        owned.push((name, Dtype::F32, b.shape.clone(), bytes_f32(&b.value)));
    }
    let (w, b) = model.head();
    owned.push((
        HEAD_WEIGHT.into(),
        Dtype::F64,
        vec![N_CLASSES, model.feature_dim()],
        bytes_f64(w),
    ));
    owned.push((HEAD_BIAS.into(), Dtype::F64, vec![N_CLASSES], bytes_f64(&b)));
    let views = owned
        .iter()
        .map(|(n, d, s, bytes)| {
            Ok((
                n.clone(),
                TensorView::new(*d, s.clone(), bytes).map_err(ckpt_err)?,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    safetensors::serialize(views, None).map_err(ckpt_err)
}

pub fn sidecar_for(model: &ClassifierModel, mean: [f32; 3], std: [f32; 3]) -> ModelSidecar {
    ModelSidecar {
        format_version: FORMAT_VERSION,
        backbone: model.spec().name.clone(),
        arch: model.spec().arch.clone(),
        strategy: model.strategy(),
        input_size: model.input_size(),
        feature_dim: model.feature_dim(),
        seed: model.seed(),
        mean,
        std,
        hashes: ParameterHashes {
            backbone: model.parameter_hash(ParamSubset::Backbone),
            head: model.parameter_hash(ParamSubset::Head),
            all: model.parameter_hash(ParamSubset::All),
        },
    }
}

/// Writes `model.safetensors` and `model.json` into `dir`.
pub fn save_checkpoint(
    model: &ClassifierModel,
    dir: &Path,
    mean: [f32; 3],
    std: [f32; 3],
) -> Result<ModelSidecar> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let weights = dir.join(WEIGHTS_FILE);
    fs::write(&weights, checkpoint_bytes(model)?).map_err(|e| Error::io(&weights, e))?;
    let sidecar = sidecar_for(model, mean, std);
    let path = dir.join(SIDECAR_FILE);
    fs::write(&path, serde_json::to_string_pretty(&sidecar)? + "\n")
        .map_err(|e| Error::io(&path, e))?;
    Ok(sidecar)
}

/// Rebuilds a model from sidecar metadata and tensor bytes, checking the
/// recorded parameter hashes.
pub fn model_from_parts(sidecar: &ModelSidecar, bytes: &[u8]) -> Result<ClassifierModel> {
    let spec = lookup_backbone(&sidecar.backbone)?;
    if spec.arch != sidecar.arch || spec.feature_dim != sidecar.feature_dim {
        return Err(Error::Checkpoint(format!(
            "sidecar describes {} with {} features; registry has {} with {}",
            sidecar.arch, sidecar.feature_dim, spec.arch, spec.feature_dim
        )));
    }
    let mut model = ClassifierModel::uninitialized(
        &spec,
        sidecar.strategy,
        Some(sidecar.input_size),
        sidecar.seed,
    )?;
    let tensors = read_f32_tensors(bytes)?;
    model
        .backbone_mut()
        .load_state(|name| tensors.get(name).map(Vec::as_slice))?;
    let st = SafeTensors::deserialize(bytes).map_err(ckpt_err)?;
    let w = read_f64(&st, HEAD_WEIGHT, &[N_CLASSES, spec.feature_dim])?;
    let b = read_f64(&st, HEAD_BIAS, &[N_CLASSES])?;
    model.set_head(&w, [b[0], b[1]])?;
    let all = model.parameter_hash(ParamSubset::All);
    if all != sidecar.hashes.all {
        return Err(Error::Checkpoint(format!(
            "parameter hash {all} does not match sidecar {}",
            sidecar.hashes.all
        )));
    }
    Ok(model)
}

/// Loads a checkpoint directory; returns the model and its sidecar.
pub fn load_checkpoint(dir: &Path) -> Result<(ClassifierModel, ModelSidecar)> {
    let path = dir.join(SIDECAR_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let sidecar = ModelSidecar::from_json(&text)?;
    let weights = dir.join(WEIGHTS_FILE);
    let bytes = fs::read(&weights).map_err(|e| Error::io(&weights, e))?;
    let model = model_from_parts(&sidecar, &bytes)?;
    Ok((model, sidecar))
}

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, VccError};
use crate::netcore::{Architecture, LayerParams, LayeredModel};

pub const MANIFEST_FILE: &str = "model.json";
pub const WEIGHTS_FILE: &str = "weights.bin";
pub const MANIFEST_FORMAT: &str = "vcc-model/1";

/// Where one layer's parameters live in the weight blob. Offsets are in
/// bytes, counts in `f32` values.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamSpan {
    pub layer: usize,
    pub weight_offset: usize,
    pub weight_count: usize,
    pub bias_offset: usize,
    pub bias_count: usize,
}

/// Architecture fields at the top level, plus layer output shapes and the
/// layout of the sidecar weight blob.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelManifest {
    pub format: String,
    #[serde(flatten)]
    pub architecture: Architecture,
    pub shapes: Vec<Vec<usize>>,
    pub weights: String,
    pub params: Vec<ParamSpan>,
    pub hash: String,
}

/// Weights and biases of every layer, concatenated as little-endian `f32`.
pub fn weight_blob(model: &LayeredModel) -> (Vec<u8>, Vec<ParamSpan>) {
    let mut blob = Vec::new();
    let mut spans = Vec::new();
    let mut at = 0;
    for (layer, p) in model.params().iter().enumerate() {
        if p.weight.is_empty() && p.bias.is_empty() {
            continue;
        }
        spans.push(ParamSpan {
            layer,
            weight_offset: 4 * at,
            weight_count: p.weight.len(),
            bias_offset: 4 * (at + p.weight.len()),
            bias_count: p.bias.len(),
        });
        at += p.weight.len() + p.bias.len();
        for v in p.weight.iter().chain(&p.bias) {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    (blob, spans)
}

pub fn save_model(model: &LayeredModel, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let (blob, params) = weight_blob(model);
    let manifest = ModelManifest {
        format: MANIFEST_FORMAT.into(),
        architecture: model.architecture().clone(),
        shapes: (0..model.layer_count())
            .map(|l| model.output_shape(l).map(<[usize]>::to_vec))
            .collect::<Result<_>>()?,
        weights: WEIGHTS_FILE.into(),
        params,
        hash: model.content_hash(),
    };
    fs::write(dir.join(WEIGHTS_FILE), blob)?;
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(())
}

pub fn load_model(dir: &Path) -> Result<LayeredModel> {
    let manifest: ModelManifest = serde_json::from_slice(&fs::read(dir.join(MANIFEST_FILE))?)?;
    let blob = fs::read(dir.join(&manifest.weights))?;
    model_from_parts(manifest, &blob)
}

pub fn model_from_parts(manifest: ModelManifest, blob: &[u8]) -> Result<LayeredModel> {
    if blob.len() % 4 != 0 {
        return Err(VccError::Format(format!("weight blob of {} bytes is not whole f32s", blob.len())));
    }
    let floats: Vec<f32> = blob
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    let slice = |off: usize, len: usize| {
        if off % 4 != 0 {
            return Err(VccError::Format(format!("byte offset {off} is not f32-aligned")));
        }
        floats
            .get(off / 4..off / 4 + len)
            .map(<[f32]>::to_vec)
            .ok_or_else(|| VccError::Format(format!("span {off}+{len} exceeds blob of {} floats", floats.len())))
    };
    let mut params = vec![LayerParams::default(); manifest.architecture.layers.len()];
    for span in &manifest.params {
        let slot = params
            .get_mut(span.layer)
            .ok_or_else(|| VccError::Format(format!("parameters for missing layer {}", span.layer)))?;
        *slot = LayerParams {
            weight: slice(span.weight_offset, span.weight_count)?,
            bias: slice(span.bias_offset, span.bias_count)?,
        };
    }
    if manifest.format != MANIFEST_FORMAT {
        return Err(VccError::Format(format!("unknown model format {:?}", manifest.format)));
    }
    let model = LayeredModel::new(manifest.architecture, params)?;
    if model.content_hash() != manifest.hash {
        return Err(VccError::Format("model hash does not match its weights".into()));
    }
    Ok(model)
}

/// Architecture of any manifest, with or without weights.
pub fn load_architecture(path: &Path) -> Result<Architecture> {
    let arch: Architecture = serde_json::from_slice(&fs::read(path)?)?;
    arch.validate()?;
    Ok(arch)
}

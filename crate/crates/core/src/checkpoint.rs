//! Checkpoint files.
//!
//! Layout: 8 magic bytes, manifest length as `u64` LE, a JSON manifest,
//! then raw little-endian tensor payloads at the offsets the manifest lists
//! (relative to the first payload byte). Adam moments are stored as extra
//! tensors named `adam.m.<param>` and `adam.v.<param>`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{DehazeModel, ModelConfig};
use crate::tensor::{DType, Element};
use crate::train::{OptimState, TrainState};

pub const MAGIC: &[u8; 8] = b"HDMBACK1";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: DType,
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub version: u32,
    pub model: ModelConfig,
    pub tensors: Vec<TensorEntry>,
    pub adam_step: Option<u64>,
    pub train: Option<TrainState>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint<T: Element> {
    pub model: DehazeModel<T>,
    pub optim: Option<OptimState<T>>,
    pub train: Option<TrainState>,
}

pub fn encode<T: Element>(model: &DehazeModel<T>, optim: Option<&OptimState<T>>, train: Option<&TrainState>) -> Result<Vec<u8>> {
    let mut tensors = Vec::new();
    let mut payload = Vec::new();
    let mut push = |name: String, shape: &[usize], data: &[T]| {
        tensors.push(TensorEntry {
            name,
            shape: shape.to_vec(),
            dtype: T::DTYPE,
            offset: payload.len() as u64,
        });
        data.iter().for_each(|v| v.write_le(&mut payload));
    };
    for p in model.params.iter() {
        push(p.name.clone(), p.value.shape(), p.value.data());
    }
    if let Some(o) = optim {
        if o.m.len() != model.params.len() {
            return Err(Error::invalid("checkpoint", "optimizer state does not match the model"));
        }
        for (p, (m, v)) in model.params.iter().zip(o.m.iter().zip(&o.v)) {
            push(format!("adam.m.{}", p.name), p.value.shape(), m);
            push(format!("adam.v.{}", p.name), p.value.shape(), v);
        }
    }
    let manifest = CheckpointManifest {
        version: VERSION,
        model: model.config.clone(),
        tensors,
        adam_step: optim.map(|o| o.t),
        train: train.cloned(),
    };
    let json = serde_json::to_vec(&manifest)?;
    let mut out = Vec::with_capacity(16 + json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn save<T: Element>(path: impl AsRef<Path>, model: &DehazeModel<T>, optim: Option<&OptimState<T>>, train: Option<&TrainState>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(model, optim, train)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn split(bytes: &[u8]) -> std::result::Result<(CheckpointManifest, &[u8]), String> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err("not a checkpoint (bad magic)".into());
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let json = bytes.get(16..16 + len).ok_or("truncated manifest")?;
    let manifest: CheckpointManifest = serde_json::from_slice(json).map_err(|e| format!("bad manifest: {e}"))?;
    if manifest.version != VERSION {
        return Err(format!("unsupported version {}", manifest.version));
    }
    Ok((manifest, &bytes[16 + len..]))
}

fn values<T: Element>(payload: &[u8], e: &TensorEntry) -> std::result::Result<Vec<T>, String> {
    let n: usize = e.shape.iter().product();
    let width = e.dtype.size_of();
    let start = e.offset as usize;
    let raw = payload
        .get(start..start + n * width)
        .ok_or_else(|| format!("tensor `{}` runs past the payload", e.name))?;
    Ok(match e.dtype {
        DType::F32 => raw.chunks_exact(4).map(|c| T::from_f64(f32::read_le(c) as f64)).collect(),
        DType::F64 => raw.chunks_exact(8).map(|c| T::from_f64(f64::read_le(c))).collect(),
    })
}

/// Reads only the manifest.
pub fn read_manifest(path: impl AsRef<Path>) -> Result<CheckpointManifest> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    split(&bytes).map(|(m, _)| m).map_err(|msg| Error::format(path, msg))
}

pub fn decode<T: Element>(bytes: &[u8]) -> std::result::Result<Checkpoint<T>, String> {
    let (manifest, payload) = split(bytes)?;
    let mut model = DehazeModel::<T>::new(manifest.model.clone(), 0).map_err(|e| e.to_string())?;
    let by_name: std::collections::HashMap<&str, &TensorEntry> = manifest.tensors.iter().map(|e| (e.name.as_str(), e)).collect();
    let fetch = |name: &str, shape: &[usize]| -> std::result::Result<Vec<T>, String> {
        let e = by_name.get(name).ok_or_else(|| format!("missing tensor `{name}`"))?;
        if e.shape != shape {
            return Err(format!("tensor `{name}` has shape {:?}, model expects {shape:?}", e.shape));
        }
        values(payload, e)
    };
    let params: Vec<(String, Vec<usize>)> = model.params.iter().map(|p| (p.name.clone(), p.value.shape().to_vec())).collect();
    let ids: Vec<_> = model.params.ids().collect();
    for (id, (name, shape)) in ids.iter().zip(&params) {
        model.params.set_data(*id, fetch(name, shape)?).map_err(|e| e.to_string())?;
    }
    let optim = match manifest.adam_step {
        Some(t) => {
            let mut m = Vec::with_capacity(params.len());
            let mut v = Vec::with_capacity(params.len());
            for (name, shape) in &params {
                m.push(fetch(&format!("adam.m.{name}"), shape)?);
                v.push(fetch(&format!("adam.v.{name}"), shape)?);
            }
            Some(OptimState { t, m, v })
        }
        None => None,
    };
    Ok(Checkpoint {
        model,
        optim,
        train: manifest.train,
    })
}

pub fn load<T: Element>(path: impl AsRef<Path>) -> Result<Checkpoint<T>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|msg| Error::format(path, msg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::TrainConfig;

    #[test]
    fn save_load_save_is_byte_identical() {
        let model = DehazeModel::<f32>::new(ModelConfig::tiny(3), 11).unwrap();
        let mut optim = OptimState::new(&model.params);
        optim.t = 7;
        optim.m[2][0] = 0.25;
        optim.v[1][3] = 1e-9;
        let state = TrainState {
            step: 7,
            config: TrainConfig {
                lr0: 3.3e-4,
                ..TrainConfig::default()
            },
        };
        let a = encode(&model, Some(&optim), Some(&state)).unwrap();
        let ck = decode::<f32>(&a).unwrap();
        assert_eq!(ck.optim.as_ref(), Some(&optim));
        assert_eq!(ck.train.as_ref(), Some(&state));
        let b = encode(&ck.model, ck.optim.as_ref(), ck.train.as_ref()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn loads_across_dtypes() {
        let model = DehazeModel::<f32>::new(ModelConfig::tiny(3), 1).unwrap();
        let ck = decode::<f64>(&encode(&model, None, None).unwrap()).unwrap();
        let (p32, p64) = (model.params.iter().nth(5).unwrap(), ck.model.params.iter().nth(5).unwrap());
        assert_eq!(p32.value.to_f64_vec(), p64.value.to_vec());
        assert!(ck.optim.is_none());
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let model = DehazeModel::<f32>::new(ModelConfig::tiny(3), 1).unwrap();
        let mut bytes = encode(&model, None, None).unwrap();
        assert!(decode::<f32>(&bytes[..bytes.len() - 4]).is_err());
        bytes[0] = b'X';
        assert!(decode::<f32>(&bytes).is_err());
    }
}

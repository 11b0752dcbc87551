//! Parameter archives: a JSON manifest naming each entry's shape, element
//! type and role, plus a little-endian `f32` payload file next to it.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::encoder::{DualEncoder, EncoderConfig, InjectionSpec};
use crate::error::{Error, Result};
use crate::model::AnPromptModel;
use crate::params::{ParamRole, ParamStore};
use crate::tensor::Matrix;

const FORMAT: &str = "anprompt-checkpoint/1";

#[derive(Clone, Debug, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: [usize; 2],
    dtype: String,
    role: ParamRole,
    /// Offset into the payload, in elements.
    offset: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    payload: String,
    encoder: EncoderConfig,
    injection: InjectionSpec,
    epsilon: f64,
    params: Vec<ManifestEntry>,
}

/// Everything needed to rebuild a model: the frozen backbone and the
/// prompt state, with the configuration they were built from.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub encoder: EncoderConfig,
    pub injection: InjectionSpec,
    pub epsilon: f64,
    pub params: ParamStore,
}

fn payload_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

impl Checkpoint {
    pub fn from_model(model: &AnPromptModel) -> Self {
        let mut params = model.encoder().backbone().clone();
        params.extend(model.state());
        Self {
            encoder: model.encoder().config().clone(),
            injection: *model.spec(),
            epsilon: model.epsilon(),
            params,
        }
    }

    /// Writes `path` (the manifest) and its `.bin` payload.
    pub fn save(&self, path: &Path) -> Result<()> {
        let payload = payload_path(path);
        let mut bytes = Vec::new();
        let mut entries = Vec::new();
        let mut offset = 0;
        for (name, e) in self.params.iter() {
            entries.push(ManifestEntry {
                name: name.to_string(),
                shape: [e.value.rows(), e.value.cols()],
                dtype: "f32".into(),
                role: e.role,
                offset,
            });
            offset += e.value.len();
            for &x in e.value.data() {
                bytes.extend_from_slice(&(x as f32).to_le_bytes());
            }
        }
        let manifest = Manifest {
            format: FORMAT.into(),
            payload: payload
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default(),
            encoder: self.encoder.clone(),
            injection: self.injection,
            epsilon: self.epsilon,
            params: entries,
        };
        let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        std::fs::write(path, json).map_err(|e| Error::io(path, e))?;
        std::fs::write(&payload, bytes).map_err(|e| Error::io(&payload, e))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Parse {
            location: format!("{}:{}:{}", path.display(), e.line(), e.column()),
            reason: e.to_string(),
        })?;
        if manifest.format != FORMAT {
            return Err(Error::Parse {
                location: path.display().to_string(),
                reason: format!("unsupported checkpoint format `{}`", manifest.format),
            });
        }
        let payload = path.with_file_name(&manifest.payload);
        let bytes = std::fs::read(&payload).map_err(|e| Error::io(&payload, e))?;
        let mut params = ParamStore::new();
        for e in manifest.params {
            if e.dtype != "f32" {
                return Err(Error::Parse {
                    location: format!("{} entry `{}`", path.display(), e.name),
                    reason: format!("unsupported element type `{}`", e.dtype),
                });
            }
            let n = e.shape[0] * e.shape[1];
            let start = e.offset * 4;
            let end = start + n * 4;
            let raw = bytes.get(start..end).ok_or_else(|| Error::Parse {
                location: format!("{} entry `{}`", payload.display(), e.name),
                reason: "payload is shorter than the manifest says".into(),
            })?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            params.insert(e.name, Matrix::from_vec(e.shape[0], e.shape[1], data)?, e.role);
        }
        Ok(Self {
            encoder: manifest.encoder,
            injection: manifest.injection,
            epsilon: manifest.epsilon,
            params,
        })
    }

    fn split(&self) -> (ParamStore, ParamStore) {
        let mut backbone = ParamStore::new();
        let mut state = ParamStore::new();
        for (name, e) in self.params.iter() {
            let target = if e.role == ParamRole::Frozen {
                &mut backbone
            } else {
                &mut state
            };
            target.insert(name, e.value.clone(), e.role);
        }
        (backbone, state)
    }

    pub fn into_model(self) -> Result<AnPromptModel> {
        let (backbone, state) = self.split();
        let encoder = Arc::new(DualEncoder::from_backbone(self.encoder.clone(), backbone)?);
        AnPromptModel::from_parts(encoder, self.injection, self.epsilon, state)
    }

    /// Names of entries with `role` whose values differ between the two
    /// archives (or exist in only one of them).
    pub fn diff(&self, other: &Checkpoint, role: ParamRole) -> Vec<String> {
        let mut out = Vec::new();
        for (name, e) in self.params.iter().filter(|(_, e)| e.role == role) {
            match other.params.entry(name) {
                Some(o) if o.role == role && o.value == e.value => {}
                _ => out.push(name.to_string()),
            }
        }
        for (name, _) in other.params.iter().filter(|(_, e)| e.role == role) {
            if self.params.entry(name).is_none_or(|e| e.role != role) {
                out.push(name.to_string());
            }
        }
        out
    }
}

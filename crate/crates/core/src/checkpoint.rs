//! Checkpoint container: a magic tag, a format version, a JSON header with the
//! model config and tensor table, then raw little-endian parameter data
//! (f32 for the frozen backbone, f64 for the trainable head).

use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::model::{build_model, BuiltModel, ModelConfig, ModelError};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CXRSEQCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}: checkpoint format version {found}, expected {expected}")]
    VersionMismatch { path: PathBuf, found: u32, expected: u32 },
    #[error("{path}: cannot decode checkpoint: {reason}")]
    Decode { path: PathBuf, reason: String },
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Frozen,
    Trainable,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dtype {
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub role: Role,
    pub shape: Vec<usize>,
    pub dtype: Dtype,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config: ModelConfig,
    pub seed: u64,
    pub trained_view: Option<String>,
    pub tensors: Vec<TensorEntry>,
}

const HEAD_NAMES: [&str; 5] = ["dense/kernel", "dense/bias", "lstm/kernel", "lstm/recurrent_kernel", "lstm/bias"];

fn head_shapes(model: &BuiltModel) -> Vec<Vec<usize>> {
    let h = &model.head;
    let mut out = vec![h.dense.weight.shape().to_vec(), h.dense.bias.shape().to_vec()];
    if let Some(l) = &h.lstm {
        out.extend([l.kernel.shape().to_vec(), l.recurrent.shape().to_vec(), l.bias.shape().to_vec()]);
    }
    out
}

fn header_of(model: &BuiltModel) -> CheckpointHeader {
    let mut tensors: Vec<TensorEntry> = model
        .backbone
        .tensors()
        .iter()
        .map(|t| TensorEntry {
            name: format!("backbone/{}", t.name),
            role: Role::Frozen,
            shape: t.shape.clone(),
            dtype: Dtype::F32,
        })
        .collect();
    tensors.extend(head_shapes(model).into_iter().zip(HEAD_NAMES).map(|(shape, name)| TensorEntry {
        name: format!("head/{name}"),
        role: Role::Trainable,
        shape,
        dtype: Dtype::F64,
    }));
    CheckpointHeader {
        config: model.config.clone(),
        seed: model.seed,
        trained_view: model.trained_view.clone(),
        tensors,
    }
}

pub fn encode_checkpoint(model: &BuiltModel) -> Vec<u8> {
    let header = serde_json::to_vec(&header_of(model)).expect("header serializes");
    let mut out = Vec::with_capacity(header.len() + 4 * model.backbone.num_parameters() + 64);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for t in model.backbone.tensors() {
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    for slice in model.head.param_slices() {
        for v in slice {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn save_checkpoint(model: &BuiltModel, path: &Path) -> Result<(), CheckpointError> {
    let io_err = |source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    };
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io_err)?;
    }
    let mut f = fs::File::create(path).map_err(io_err)?;
    f.write_all(&encode_checkpoint(model)).map_err(io_err)?;
    f.sync_all().map_err(io_err)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], CheckpointError> {
        if self.bytes.len() < n {
            return Err(CheckpointError::Decode {
                path: self.path.to_path_buf(),
                reason: format!("truncated while reading {what}"),
            });
        }
        let (head, rest) = self.bytes.split_at(n);
        self.bytes = rest;
        Ok(head)
    }
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<BuiltModel, CheckpointError> {
    let decode = |reason: String| CheckpointError::Decode {
        path: path.to_path_buf(),
        reason,
    };
    let mut cur = Cursor { bytes, path };
    if cur.take(8, "magic")? != CHECKPOINT_MAGIC {
        return Err(decode("not a checkpoint file (bad magic)".into()));
    }
    let version = u32::from_le_bytes(cur.take(4, "version")?.try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::VersionMismatch {
            path: path.to_path_buf(),
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let header_len = u64::from_le_bytes(cur.take(8, "header length")?.try_into().unwrap());
    let header_len = usize::try_from(header_len).map_err(|_| decode("header length overflows".into()))?;
    let header: CheckpointHeader =
        serde_json::from_slice(cur.take(header_len, "header")?).map_err(|e| decode(format!("header: {e}")))?;

    let mut model = build_model(&header.config, header.seed)?;
    model.trained_view = header.trained_view.clone();
    let expected = header_of(&model);
    if expected.tensors != header.tensors {
        return Err(decode("tensor table does not match the architecture in the config".into()));
    }

    for t in model.backbone.tensors_mut() {
        let raw = cur.take(4 * t.data.len(), &t.name)?;
        for (d, b) in t.data.iter_mut().zip(raw.chunks_exact(4)) {
            *d = f32::from_le_bytes(b.try_into().unwrap());
        }
    }
    for slice in model.head.param_slices_mut() {
        let raw = cur.take(8 * slice.len(), "head parameters")?;
        for (d, b) in slice.iter_mut().zip(raw.chunks_exact(8)) {
            *d = f64::from_le_bytes(b.try_into().unwrap());
        }
    }
    if !cur.bytes.is_empty() {
        return Err(decode(format!("{} trailing bytes", cur.bytes.len())));
    }
    Ok(model)
}

pub fn load_checkpoint(path: &Path) -> Result<BuiltModel, CheckpointError> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        })?;
    decode_checkpoint(&bytes, path)
}

//! Weight files: a length-prefixed JSON header (name → dtype, shape, byte
//! range) followed by little-endian tensor data, in the safetensors layout.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use safetensors::tensor::TensorView;
use safetensors::{Dtype, SafeTensors};
use serde::{Deserialize, Serialize};

use super::encoder::{EncoderConfig, EncoderState, ParamTensor};
use super::optim::AdamState;
use super::queue::NegativeQueue;
use super::train::{PretrainConfig, PretrainState};
use crate::error::{Error, Result};

/// Metadata key holding the JSON description of the file.
pub const META_KEY: &str = "constyle";
pub const ENCODER_PREFIX: &str = "encoder.";
pub const WEIGHTS_SCHEMA_VERSION: u32 = 1;

const STUDENT: &str = "student.";
const TEACHER: &str = "teacher.";
const QUEUE_KEYS: &str = "queue.keys";
const ADAM_M: &str = "optim.m.";
const ADAM_V: &str = "optim.v.";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "format", rename_all = "snake_case")]
pub enum WeightsMeta {
    Encoder {
        schema_version: u32,
        config: EncoderConfig,
    },
    Checkpoint {
        schema_version: u32,
        iter: usize,
        adam_step: u64,
        config: PretrainConfig,
    },
}

fn f32_bytes(v: &[f32]) -> Vec<u8> {
    v.iter().flat_map(|x| x.to_le_bytes()).collect()
}

fn f64_bytes(v: &[f64]) -> Vec<u8> {
    v.iter().flat_map(|x| x.to_le_bytes()).collect()
}

struct Owned {
    dtype: Dtype,
    shape: Vec<usize>,
    bytes: Vec<u8>,
}

fn write_file(path: &Path, tensors: BTreeMap<String, Owned>, meta: &WeightsMeta) -> Result<()> {
    let meta_json = serde_json::to_string(meta).expect("metadata serializes");
    let views: Vec<(String, TensorView<'_>)> = tensors
        .iter()
        .map(|(k, t)| {
            let view = TensorView::new(t.dtype, t.shape.clone(), &t.bytes)
                .map_err(|e| Error::Data(format!("tensor {k}: {e}")))?;
            Ok((k.clone(), view))
        })
        .collect::<Result<_>>()?;
    let info = HashMap::from([(META_KEY.to_string(), meta_json)]);
    let bytes = safetensors::serialize(views, Some(info))
        .map_err(|e| Error::Encode {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn decode_err(path: &Path, message: impl ToString) -> Error {
    Error::Decode {
        path: path.to_path_buf(),
        message: message.to_string(),
    }
}

fn parse_meta(path: &Path, st: &Option<HashMap<String, String>>) -> Result<WeightsMeta> {
    let text = st
        .as_ref()
        .and_then(|m| m.get(META_KEY))
        .ok_or_else(|| decode_err(path, format!("no `{META_KEY}` metadata entry")))?;
    serde_json::from_str(text).map_err(|e| Error::json(format!("{} metadata", path.display()), e))
}

fn read_f32(path: &Path, name: &str, view: &TensorView<'_>) -> Result<ParamTensor> {
    if view.dtype() != Dtype::F32 {
        return Err(decode_err(path, format!("{name}: expected F32, found {:?}", view.dtype())));
    }
    let data = view
        .data()
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
        .collect();
    ParamTensor::new(view.shape().to_vec(), data)
}

fn read_f64(path: &Path, name: &str, view: &TensorView<'_>) -> Result<Vec<f64>> {
    if view.dtype() != Dtype::F64 {
        return Err(decode_err(path, format!("{name}: expected F64, found {:?}", view.dtype())));
    }
    Ok(view
        .data()
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
        .collect())
}

fn state_tensors(prefix: &str, state: &EncoderState, out: &mut BTreeMap<String, Owned>) {
    for (name, p) in state.iter() {
        out.insert(
            format!("{prefix}{name}"),
            Owned {
                dtype: Dtype::F32,
                shape: p.shape.clone(),
                bytes: f32_bytes(&p.data),
            },
        );
    }
}

/// Writes the prompt path of `state` (conv/BN stages and projector) under
/// the `encoder.` prefix. Classifier heads are left out.
pub fn export_encoder(state: &EncoderState, config: &EncoderConfig, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    state.without_classifier().check(config)?;
    let mut tensors = BTreeMap::new();
    state_tensors(ENCODER_PREFIX, &state.without_classifier(), &mut tensors);
    let meta = WeightsMeta::Encoder {
        schema_version: WEIGHTS_SCHEMA_VERSION,
        config: config.clone(),
    };
    write_file(path, tensors, &meta)
}

/// Reads a file written by [`export_encoder`].
pub fn load_encoder(path: impl AsRef<Path>) -> Result<(EncoderState, EncoderConfig)> {
    let path = path.as_ref();
    let bytes = read_file(path)?;
    let st = SafeTensors::deserialize(&bytes).map_err(|e| decode_err(path, e))?;
    let (_, header) = SafeTensors::read_metadata(&bytes).map_err(|e| decode_err(path, e))?;
    let config = match parse_meta(path, header.metadata())? {
        WeightsMeta::Encoder { config, .. } => config,
        other => return Err(decode_err(path, format!("not an encoder file: {other:?}"))),
    };
    let mut params = BTreeMap::new();
    for (name, view) in st.tensors() {
        let key = name
            .strip_prefix(ENCODER_PREFIX)
            .ok_or_else(|| decode_err(path, format!("unexpected tensor {name}")))?;
        params.insert(key.to_string(), read_f32(path, &name, &view)?);
    }
    let state = EncoderState::from_params(params);
    state.check(&config)?;
    Ok((state, config))
}

/// Full training state: both encoders, the queue and the optimizer moments.
pub fn save_checkpoint(state: &PretrainState, config: &PretrainConfig, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut tensors = BTreeMap::new();
    state_tensors(STUDENT, &state.student, &mut tensors);
    state_tensors(TEACHER, &state.teacher, &mut tensors);
    let d = state.queue.dim();
    tensors.insert(
        QUEUE_KEYS.to_string(),
        Owned {
            dtype: Dtype::F64,
            shape: vec![state.queue.len(), d],
            bytes: f64_bytes(&state.queue.to_flat()),
        },
    );
    for (prefix, moments) in [(ADAM_M, &state.optimizer.m), (ADAM_V, &state.optimizer.v)] {
        for (name, v) in moments {
            let shape = state.student.get(name).map_or(vec![v.len()], |p| p.shape.clone());
            tensors.insert(
                format!("{prefix}{name}"),
                Owned {
                    dtype: Dtype::F64,
                    shape,
                    bytes: f64_bytes(v),
                },
            );
        }
    }
    let meta = WeightsMeta::Checkpoint {
        schema_version: WEIGHTS_SCHEMA_VERSION,
        iter: state.iter,
        adam_step: state.optimizer.step,
        config: config.clone(),
    };
    write_file(path, tensors, &meta)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(PretrainState, PretrainConfig)> {
    let path = path.as_ref();
    let bytes = read_file(path)?;
    let st = SafeTensors::deserialize(&bytes).map_err(|e| decode_err(path, e))?;
    let (_, header) = SafeTensors::read_metadata(&bytes).map_err(|e| decode_err(path, e))?;
    let (iter, adam_step, config) = match parse_meta(path, header.metadata())? {
        WeightsMeta::Checkpoint {
            iter,
            adam_step,
            config,
            ..
        } => (iter, adam_step, config),
        other => return Err(decode_err(path, format!("not a checkpoint: {other:?}"))),
    };
    let (mut student, mut teacher) = (BTreeMap::new(), BTreeMap::new());
    let mut opt = AdamState {
        step: adam_step,
        ..AdamState::default()
    };
    let mut queue = None;
    for (name, view) in st.tensors() {
        if let Some(k) = name.strip_prefix(STUDENT) {
            student.insert(k.to_string(), read_f32(path, &name, &view)?);
        } else if let Some(k) = name.strip_prefix(TEACHER) {
            teacher.insert(k.to_string(), read_f32(path, &name, &view)?);
        } else if let Some(k) = name.strip_prefix(ADAM_M) {
            opt.m.insert(k.to_string(), read_f64(path, &name, &view)?);
        } else if let Some(k) = name.strip_prefix(ADAM_V) {
            opt.v.insert(k.to_string(), read_f64(path, &name, &view)?);
        } else if name == QUEUE_KEYS {
            let flat = read_f64(path, &name, &view)?;
            queue = Some(NegativeQueue::from_flat(
                config.train.queue_capacity,
                config.encoder.latent_dim,
                &flat,
            )?);
        } else {
            return Err(decode_err(path, format!("unexpected tensor {name}")));
        }
    }
    let student = EncoderState::from_params(student);
    let teacher = EncoderState::from_params(teacher);
    student.check(&config.encoder)?;
    teacher.check(&config.encoder)?;
    let queue = queue.ok_or_else(|| decode_err(path, "checkpoint has no queue"))?;
    Ok((
        PretrainState {
            student,
            teacher,
            queue,
            optimizer: opt,
            iter,
        },
        config,
    ))
}

/// One entry of a weight-file header.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub offsets: (usize, usize),
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct WeightsSummary {
    pub meta: WeightsMeta,
    /// Sorted by byte offset.
    pub tensors: Vec<TensorEntry>,
    pub total_values: usize,
}

/// Reads only the header of a weight file.
pub fn weights_summary(path: impl AsRef<Path>) -> Result<WeightsSummary> {
    let path = path.as_ref();
    let bytes = read_file(path)?;
    let (_, header) = SafeTensors::read_metadata(&bytes).map_err(|e| decode_err(path, e))?;
    let meta = parse_meta(path, header.metadata())?;
    let mut tensors: Vec<TensorEntry> = header
        .tensors()
        .into_iter()
        .map(|(name, info)| TensorEntry {
            name,
            dtype: format!("{:?}", info.dtype),
            shape: info.shape.clone(),
            offsets: info.data_offsets,
        })
        .collect();
    tensors.sort_by_key(|t| t.offsets);
    let total_values = tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum();
    Ok(WeightsSummary {
        meta,
        tensors,
        total_values,
    })
}

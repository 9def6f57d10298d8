//! Binary checkpoints.
//!
//! Layout (integers little-endian):
//!
//! ```text
//! "SEVN-CKPT"  u32 version  u8 preset-id
//! u32 header-length  header (JSON: architecture and hyperparameters)
//! u32 tensor-count
//! repeated: u32 name-length  name  tensor snapshot
//! ```
//!
//! Tensor names are `param/…`, `buffer/…` and, when optimizer state is
//! saved, `rmsprop/…`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::arch::{ArchSpec, Preset};
use crate::error::{Result, SevenError};
use crate::model::SevenModel;
use crate::optim::RmsProp;
use crate::tensor::{ByteReader, Tensor};
use crate::train::HyperParams;

pub const CHECKPOINT_MAGIC: &[u8; 9] = b"SEVN-CKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    arch: ArchSpec,
    hyper: HyperParams,
}

/// A loaded checkpoint.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: SevenModel,
    pub hyper: HyperParams,
    pub optimizer: Option<RmsProp>,
}

impl Checkpoint {
    pub fn preset(&self) -> Preset {
        self.model.arch().preset
    }
}

pub fn to_bytes(model: &SevenModel, hyper: &HyperParams, optimizer: Option<&RmsProp>) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(&Header {
        arch: model.arch().clone(),
        hyper: hyper.clone(),
    })?;
    let mut tensors: Vec<(String, &Tensor)> = Vec::new();
    for (name, p) in model.named_params() {
        tensors.push((format!("param/{name}"), &p.value));
    }
    for (name, b) in model.named_buffers() {
        tensors.push((format!("buffer/{name}"), &b.value));
    }
    if let Some(opt) = optimizer {
        for (name, acc) in opt.accumulators() {
            tensors.push((format!("rmsprop/{name}"), acc));
        }
    }

    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.push(model.arch().preset.id());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        t.write_snapshot(&mut out);
    }
    Ok(out)
}

/// Parses a checkpoint. Nothing is built until the whole buffer has been
/// read and validated.
pub fn from_bytes(bytes: &[u8], context: &str) -> Result<Checkpoint> {
    let mut r = ByteReader::new(bytes, context);
    if r.take(CHECKPOINT_MAGIC.len()).ok() != Some(CHECKPOINT_MAGIC.as_slice()) {
        return Err(r.error_at(0, "not a checkpoint (bad magic)"));
    }
    let version = r.u32_le()?;
    if version != CHECKPOINT_VERSION {
        return Err(r.error_at(
            9,
            format!("checkpoint version {version}, this build reads {CHECKPOINT_VERSION}"),
        ));
    }
    let preset_id = r.u8()?;
    let preset = Preset::from_id(preset_id).ok_or_else(|| r.error_at(13, format!("unknown preset id {preset_id}")))?;
    let header_len = r.u32_le()? as usize;
    let header_at = r.offset();
    let header: Header = serde_json::from_slice(r.take(header_len)?)
        .map_err(|e| r.error_at(header_at, format!("bad header: {e}")))?;
    if header.arch.preset != preset {
        return Err(r.error_at(
            13,
            format!("preset id {preset_id} disagrees with header preset {:?}", header.arch.preset),
        ));
    }
    let count = r.u32_le()?;
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let at = r.offset();
        let len = r.u32_le()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| r.error_at(at, "tensor name is not utf-8"))?
            .to_string();
        let t = Tensor::read_snapshot(&mut r)?;
        if tensors.insert(name.clone(), t).is_some() {
            return Err(r.error_at(at, format!("duplicate tensor {name}")));
        }
    }
    if !r.is_empty() {
        return Err(r.error_at(r.offset(), "trailing bytes after checkpoint"));
    }

    header.hyper.validate()?;
    let mut model = SevenModel::new(header.arch, 0)?;
    let mut take = |name: String, shape: &[usize]| -> Result<Tensor> {
        let t = tensors
            .remove(&name)
            .ok_or_else(|| SevenError::format(context, 0, format!("missing tensor {name}")))?;
        if t.shape() != shape {
            return Err(SevenError::format(
                context,
                0,
                format!("tensor {name} has shape {:?}, model expects {shape:?}", t.shape()),
            ));
        }
        Ok(t)
    };
    for (name, p) in model.named_params_mut() {
        p.value = take(format!("param/{name}"), p.value.shape())?;
    }
    for (name, b) in model.named_buffers_mut() {
        b.value = take(format!("buffer/{name}"), b.value.shape())?;
    }
    let mut optimizer = None;
    let shapes: BTreeMap<String, Vec<usize>> = model
        .named_params()
        .into_iter()
        .map(|(n, p)| (n, p.value.shape().to_vec()))
        .collect();
    for (name, t) in std::mem::take(&mut tensors) {
        let Some(param) = name.strip_prefix("rmsprop/") else {
            return Err(SevenError::format(context, 0, format!("unexpected tensor {name}")));
        };
        if shapes.get(param).map(Vec::as_slice) != Some(t.shape()) {
            return Err(SevenError::format(
                context,
                0,
                format!("optimizer state {param} does not match any parameter"),
            ));
        }
        optimizer
            .get_or_insert_with(|| RmsProp::new(header.hyper.optimizer()))
            .set_accumulator(param.to_string(), t);
    }
    Ok(Checkpoint {
        model,
        hyper: header.hyper,
        optimizer,
    })
}

pub fn save_checkpoint(
    path: &Path,
    model: &SevenModel,
    hyper: &HyperParams,
    optimizer: Option<&RmsProp>,
) -> Result<()> {
    let bytes = to_bytes(model, hyper, optimizer)?;
    fs::write(path, bytes).map_err(|e| SevenError::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| SevenError::io(path, e))?;
    from_bytes(&bytes, &path.display().to_string())
}

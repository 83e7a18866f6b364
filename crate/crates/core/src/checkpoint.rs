//! Binary checkpoint container.
//!
//! | bytes | content                                   |
//! |-------|-------------------------------------------|
//! | 8     | magic `PIXCDCKP`                          |
//! | 4     | format version, u32 LE                    |
//! | 4     | header length `L`, u32 LE                 |
//! | L     | UTF-8 JSON [`CheckpointHeader`]           |
//! | rest  | tensors in header order, little-endian    |
//!
//! Tensors are stored in the header's `dtype` and converted on load, so an
//! `f32` checkpoint can be loaded into an `f64` model and vice versa.

use std::path::Path;

use ndarray::ArrayViewMutD;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::model::ModelConfig;
use crate::nn::Parameterized;
use crate::quantizer::QuantizerConfig;
use crate::{DType, Scalar};

pub const MAGIC: &[u8; 8] = b"PIXCDCKP";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Teacher,
    Student,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Non-learnable state such as batch-norm running statistics.
    pub buffer: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub kind: ModelKind,
    pub dtype: DType,
    pub model: ModelConfig,
    pub quantizer: Option<QuantizerConfig>,
    /// Free-form training settings, recorded for provenance.
    pub training: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

fn float_dtype(d: DType) -> Result<()> {
    ensure!(matches!(d, DType::F32 | DType::F64), Format, "checkpoint dtype {d:?} is not a float type");
    Ok(())
}

pub fn encode<T: Scalar, M: Parameterized<T>>(
    kind: ModelKind,
    model_config: &ModelConfig,
    quantizer: Option<&QuantizerConfig>,
    training: serde_json::Value,
    model: &M,
) -> Result<Vec<u8>> {
    let mut tensors = Vec::new();
    let mut data = Vec::new();
    let mut record = |buffer: bool, name: String, v: ndarray::ArrayViewD<'_, T>| {
        tensors.push(TensorEntry { name, shape: v.shape().to_vec(), buffer });
        for &x in v.iter() {
            x.write_le(&mut data);
        }
    };
    model.visit("", &mut |n, v| record(false, n, v));
    model.visit_buffers("", &mut |n, v| record(true, n, v));
    let header = CheckpointHeader {
        kind,
        dtype: T::DTYPE,
        model: model_config.clone(),
        quantizer: quantizer.cloned(),
        training,
        tensors,
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + json.len() + data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&data);
    Ok(out)
}

/// Parses and validates the header; returns it with the tensor payload.
pub fn decode_header(bytes: &[u8]) -> Result<(CheckpointHeader, &[u8])> {
    ensure!(bytes.len() >= 16 && &bytes[..8] == MAGIC, Format, "not a checkpoint file (bad magic)");
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    ensure!(version == VERSION, Format, "checkpoint version {version} is not supported (expected {VERSION})");
    let len = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
    ensure!(bytes.len() >= 16 + len, Format, "truncated checkpoint header");
    let header: CheckpointHeader = serde_json::from_slice(&bytes[16..16 + len])
        .map_err(|e| Error::Format(format!("invalid checkpoint header: {e}")))?;
    float_dtype(header.dtype)?;
    let payload = &bytes[16 + len..];
    let expected: usize = header.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum::<usize>() * header.dtype.size();
    ensure!(payload.len() == expected, Format, "checkpoint payload has {} bytes, header describes {expected}", payload.len());
    Ok((header, payload))
}

/// Fills `model` from a checkpoint. Every tensor of the model must be present
/// with a matching shape; extra tensors in the file are an error too.
pub fn load_into<T: Scalar, M: Parameterized<T>>(bytes: &[u8], model: &mut M) -> Result<CheckpointHeader> {
    let (header, payload) = decode_header(bytes)?;
    let size = header.dtype.size();
    let mut table = std::collections::HashMap::new();
    let mut offset = 0;
    for t in &header.tensors {
        let n: usize = t.shape.iter().product();
        table.insert((t.name.clone(), t.buffer), (t.shape.clone(), offset));
        offset += n * size;
    }
    let dtype = header.dtype;
    let mut problems = Vec::new();
    let mut used = 0usize;
    let mut fill = |buffer: bool, name: String, mut v: ArrayViewMutD<'_, T>| match table.get(&(name.clone(), buffer)) {
        Some((shape, off)) if shape.as_slice() == v.shape() => {
            used += 1;
            for (k, x) in v.iter_mut().enumerate() {
                let b = &payload[off + k * size..off + (k + 1) * size];
                *x = match dtype {
                    DType::F32 => T::lit(f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64),
                    _ => T::lit(f64::from_le_bytes(b.try_into().expect("8 bytes"))),
                };
            }
        }
        Some((shape, _)) => problems.push(format!("{name}: stored {shape:?}, model {:?}", v.shape())),
        None => problems.push(format!("{name}: missing")),
    };
    model.visit_mut("", &mut |n, v| fill(false, n, v));
    model.visit_buffers_mut("", &mut |n, v| fill(true, n, v));
    ensure!(problems.is_empty(), Format, "checkpoint does not match the model: {}", problems.join("; "));
    ensure!(used == header.tensors.len(), Format, "checkpoint holds {} tensors the model does not use", header.tensors.len() - used);
    Ok(header)
}

pub fn read_header(path: &Path) -> Result<CheckpointHeader> {
    let bytes = std::fs::read(path)?;
    Ok(decode_header(&bytes)?.0)
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, bytes)?;
    Ok(())
}

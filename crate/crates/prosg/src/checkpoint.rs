//! On-disk model format.
//!
//! Layout: an 8-byte little-endian length prefix, a UTF-8 JSON header,
//! then a raw little-endian tensor payload. The header carries the
//! format version (1 = backbone only, 2 = backbone + synthesis), the
//! element dtype, the model config, and a tensor directory mapping
//! names to shapes and byte offsets. Tensors are laid out in sorted
//! name order with no gaps, so a file is valid iff the directory tiles
//! the payload exactly.

use crate::error::{Error, Result};
use crate::model::params::BackboneParams;
use crate::model::ModelConfig;
use crate::scalar::Scalar;
use crate::synth::SynthParams;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

pub const FORMAT_BACKBONE: u32 = 1;
pub const FORMAT_FULL: u32 = 2;

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    dtype: String,
    config: ModelConfig,
    tensors: BTreeMap<String, TensorEntry>,
}

/// A loaded checkpoint; `synth` is present only for format version 2.
pub struct Checkpoint<F: Scalar> {
    pub config: ModelConfig,
    pub backbone: BackboneParams<F>,
    pub synth: Option<SynthParams<F>>,
}

fn write_file<F: Scalar>(
    path: &Path,
    version: u32,
    config: &ModelConfig,
    tensors: BTreeMap<String, Tensor<F>>,
) -> Result<()> {
    let mut directory = BTreeMap::new();
    let mut payload: Vec<u8> = Vec::new();
    for (name, t) in &tensors {
        directory.insert(
            name.clone(),
            TensorEntry {
                shape: t.shape().to_vec(),
                offset: payload.len(),
            },
        );
        F::write_le(t.data(), &mut payload);
    }
    let header = Header {
        format_version: version,
        dtype: F::DTYPE.to_string(),
        config: config.clone(),
        tensors: directory,
    };
    let header_bytes = serde_json::to_vec(&header)?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
    f.write_all(&header_bytes)?;
    f.write_all(&payload)?;
    f.flush()?;
    Ok(())
}

fn param_map<F: Scalar>(named: crate::tensor::NamedParams<F>) -> BTreeMap<String, Tensor<F>> {
    named.into_iter().map(|(n, p)| (n, p.borrow().clone())).collect()
}

/// Save a phase-1 model (backbone weights only).
pub fn save_backbone<F: Scalar>(path: &Path, backbone: &BackboneParams<F>) -> Result<()> {
    write_file(
        path,
        FORMAT_BACKBONE,
        &backbone.config,
        param_map(backbone.named_params()),
    )
}

/// Save a phase-2 model (backbone plus synthesis module).
pub fn save_full<F: Scalar>(
    path: &Path,
    backbone: &BackboneParams<F>,
    synth: &SynthParams<F>,
) -> Result<()> {
    if synth.config != backbone.config {
        return Err(Error::Checkpoint(
            "backbone and synthesis configs disagree".into(),
        ));
    }
    let mut map = param_map(backbone.named_params());
    map.extend(param_map(synth.named_params()));
    write_file(path, FORMAT_FULL, &backbone.config, map)
}

/// Load a checkpoint. The stored dtype need not match `F`; values are
/// converted elementwise (f32 -> f64 widening is exact).
pub fn load<F: Scalar>(path: &Path) -> Result<Checkpoint<F>> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut len_bytes = [0u8; 8];
    f.read_exact(&mut len_bytes)
        .map_err(|_| Error::Checkpoint("file too short for header length".into()))?;
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    if header_len > 64 << 20 {
        return Err(Error::Checkpoint(format!(
            "implausible header length {header_len}"
        )));
    }
    let mut header_bytes = vec![0u8; header_len];
    f.read_exact(&mut header_bytes)
        .map_err(|_| Error::Checkpoint("truncated header".into()))?;
    let header: Header = serde_json::from_slice(&header_bytes)
        .map_err(|e| Error::Checkpoint(format!("bad header json: {e}")))?;
    if header.format_version != FORMAT_BACKBONE && header.format_version != FORMAT_FULL {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {}",
            header.format_version
        )));
    }
    header.config.validate().map_err(|e| match e {
        Error::Config(msg) => Error::Checkpoint(format!("bad config: {msg}")),
        other => other,
    })?;
    let elem = match header.dtype.as_str() {
        "f32" => 4usize,
        "f64" => 8usize,
        other => return Err(Error::Checkpoint(format!("unknown dtype {other}"))),
    };
    let mut payload = Vec::new();
    f.read_to_end(&mut payload)?;

    // The directory must tile the payload exactly, in order.
    let mut expect_offset = 0usize;
    for (name, entry) in &header.tensors {
        if entry.offset != expect_offset {
            return Err(Error::Checkpoint(format!(
                "tensor {name}: offset {} but expected {expect_offset}",
                entry.offset
            )));
        }
        let count: usize = entry.shape.iter().product();
        if count == 0 {
            return Err(Error::Checkpoint(format!(
                "tensor {name}: zero-extent shape {:?}",
                entry.shape
            )));
        }
        expect_offset += count * elem;
    }
    if expect_offset != payload.len() {
        return Err(Error::Checkpoint(format!(
            "payload is {} bytes but directory describes {expect_offset}",
            payload.len()
        )));
    }

    let mut map: BTreeMap<String, Tensor<F>> = BTreeMap::new();
    for (name, entry) in &header.tensors {
        let count: usize = entry.shape.iter().product();
        let bytes = &payload[entry.offset..entry.offset + count * elem];
        let data: Vec<F> = if header.dtype == F::DTYPE {
            F::read_le(bytes)
        } else if header.dtype == "f32" {
            f32::read_le(bytes).into_iter().map(|v| F::from_f64(v as f64)).collect()
        } else {
            f64::read_le(bytes).into_iter().map(F::from_f64).collect()
        };
        map.insert(name.clone(), Tensor::new(entry.shape.clone(), data)?);
    }

    let backbone = BackboneParams::from_tensors(header.config.clone(), &mut map)?;
    let synth = if header.format_version == FORMAT_FULL {
        Some(SynthParams::from_tensors(header.config.clone(), &mut map)?)
    } else {
        None
    };
    if let Some((name, _)) = map.iter().next() {
        return Err(Error::Checkpoint(format!("unexpected tensor {name}")));
    }
    Ok(Checkpoint {
        config: header.config,
        backbone,
        synth,
    })
}

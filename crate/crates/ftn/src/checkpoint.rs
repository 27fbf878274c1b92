//! Bit-exact binary checkpoints.
//!
//! Layout: magic "FTNC", u16 version (little-endian), u32 config-blob
//! length + the TOML config blob, u32 parameter record count, then per
//! parameter: u16 name length + UTF-8 name, u8 rank, rank little-endian
//! u64 extents, and the float32 payload. Parameters appear in canonical
//! visit order; loading validates every name and shape against the model
//! rebuilt from the embedded config.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::io::ByteReader;
use crate::model::{FtnModel, ModelConfig};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"FTNC";
pub const CHECKPOINT_VERSION: u16 = 1;

/// Exact encoded size of a checkpoint: header + config blob + per-record
/// name/shape/payload bytes. Audited by tests against real encodings.
pub fn expected_size(config_blob_len: usize, params: &[(String, Vec<usize>)]) -> usize {
    let mut total = 4 + 2 + 4 + config_blob_len + 4;
    for (name, shape) in params {
        let numel: usize = shape.iter().product();
        total += 2 + name.len() + 1 + 8 * shape.len() + 4 * numel;
    }
    total
}

/// Serializes the model. Parameters are stored as float32 regardless of
/// the working precision; for f32 models the round trip is bit-exact.
pub fn encode<T: Scalar>(model: &FtnModel<T>) -> Result<Vec<u8>> {
    let blob = model.config.to_toml()?.into_bytes();
    let params = model.named_params();
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(blob.len() as u32).to_le_bytes());
    out.extend_from_slice(&blob);
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, tensor) in &params {
        if name.len() > u16::MAX as usize {
            return Err(Error::format(format!("parameter name too long: {name}"), None));
        }
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(tensor.rank() as u8);
        for &e in tensor.shape() {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for &v in tensor.data() {
            out.extend_from_slice(&(v.to_f64() as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn save<T: Scalar>(model: &FtnModel<T>, path: impl AsRef<Path>) -> Result<()> {
    Ok(fs::write(path, encode(model)?)?)
}

/// Rebuilds a model from checkpoint bytes, rejecting version mismatches,
/// truncation (with the byte offset), unknown names, and any shape that
/// disagrees with the configuration.
pub fn decode(buf: &[u8]) -> Result<FtnModel<f32>> {
    let mut r = ByteReader::new(buf);
    let magic = r.take(4, "magic")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::format(format!("bad checkpoint magic {magic:?}"), Some(0)));
    }
    let version = r.u16("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(
            format!("unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"),
            Some(4),
        ));
    }
    let blob_len = r.u32("config length")? as usize;
    let blob = r.take(blob_len, "config blob")?;
    let config = ModelConfig::from_toml(
        std::str::from_utf8(blob)
            .map_err(|_| Error::format("config blob is not UTF-8".to_string(), Some(10)))?,
    )?;
    let mut model = FtnModel::<f32>::new(&config, 0)?;

    let count = r.u32("parameter count")? as usize;
    let mut records: Vec<(String, Tensor<f32>)> = Vec::with_capacity(count);
    for i in 0..count {
        let name_len = r.u16("name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|_| Error::format(format!("record {i}: name is not UTF-8"), Some(r.position())))?
            .to_string();
        let rank = r.u8("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64("extent")? as usize);
        }
        let numel: usize = shape.iter().product();
        let data = r.f32_slice(numel, &format!("payload of {name}"))?;
        records.push((name, Tensor::from_vec(data, &shape)?));
    }
    if !r.finished() {
        return Err(Error::format(
            format!("{} trailing bytes", buf.len() as u64 - r.position()),
            Some(r.position()),
        ));
    }

    // Walk the freshly built model in canonical order and substitute.
    let mut idx = 0usize;
    let mut failure: Option<Error> = None;
    model.visit_params(&mut |name, tensor| {
        if failure.is_some() {
            return;
        }
        let Some((rec_name, rec)) = records.get(idx) else {
            failure = Some(Error::format(
                format!("missing parameter record for {name}"),
                None,
            ));
            return;
        };
        if rec_name != name {
            failure = Some(Error::format(
                format!("parameter order mismatch: file has {rec_name}, model expects {name}"),
                None,
            ));
        } else if rec.shape() != tensor.shape() {
            failure = Some(Error::format(
                format!(
                    "shape mismatch for {name}: file {:?}, config implies {:?}",
                    rec.shape(),
                    tensor.shape()
                ),
                None,
            ));
        } else {
            *tensor = Tensor::param(rec.data().to_vec(), rec.shape()).expect("validated shape");
        }
        idx += 1;
    });
    if let Some(err) = failure {
        return Err(err);
    }
    if idx != records.len() {
        return Err(Error::format(
            format!("{} extra parameter records", records.len() - idx),
            None,
        ));
    }
    Ok(model)
}

pub fn load(path: impl AsRef<Path>) -> Result<FtnModel<f32>> {
    decode(&fs::read(path)?)
}

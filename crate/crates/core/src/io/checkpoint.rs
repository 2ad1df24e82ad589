//! `HDWM` parameter checkpoints.
//!
//! Layout: magic, format version, 32-byte config digest, block count, then
//! per block the name, rank, dimensions and a little-endian `f32` payload.
//! A SHA-256 of everything before it closes the file.

use std::path::Path;

use sha2::{Digest, Sha256};

use super::codec::{read_file, write_file, Decoder, Encoder};
use crate::denoiser::{DenoiserConfig, DenoiserParams};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"HDWM";
pub const CHECKPOINT_VERSION: u32 = 1;

/// SHA-256 of the canonical TOML rendering of the architecture.
pub fn config_digest(config: &DenoiserConfig) -> [u8; 32] {
    let text = toml::to_string(config).expect("denoiser config serializes");
    Sha256::digest(text.as_bytes()).into()
}

pub fn encode_checkpoint(params: &DenoiserParams) -> Result<Vec<u8>> {
    let mut e = Encoder::default();
    e.bytes(CHECKPOINT_MAGIC);
    e.u32(CHECKPOINT_VERSION);
    e.bytes(&config_digest(&params.config));
    e.len(params.tensors.len())?;
    for (name, t) in params.names().iter().zip(&params.tensors) {
        e.str(name)?;
        e.len(t.shape().len())?;
        for &d in t.shape() {
            e.u64(d as u64);
        }
        e.f32s(t.data());
    }
    let sum: [u8; 32] = Sha256::digest(&e.buf).into();
    e.bytes(&sum);
    Ok(e.buf)
}

pub fn save_checkpoint(path: &Path, params: &DenoiserParams) -> Result<()> {
    write_file(path, &encode_checkpoint(params)?)
}

/// Parses a checkpoint for `config`. The stored digest must match unless
/// `allow_config_mismatch`; names and shapes must always match.
pub fn decode_checkpoint(bytes: &[u8], path: &Path, config: &DenoiserConfig, allow_config_mismatch: bool) -> Result<DenoiserParams> {
    let fail = |reason: String| Error::Format {
        path: path.to_path_buf(),
        reason,
    };
    if bytes.len() < 32 {
        return Err(fail("file shorter than its checksum".into()));
    }
    let (body, stored) = bytes.split_at(bytes.len() - 32);
    let actual: [u8; 32] = Sha256::digest(body).into();
    if actual.as_slice() != stored {
        return Err(fail("checksum mismatch".into()));
    }
    let mut d = Decoder::new(body, path);
    d.magic(CHECKPOINT_MAGIC)?;
    let version = d.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(d.fail(format!("unsupported version {version}")));
    }
    let digest = d.take(32)?;
    if !allow_config_mismatch && digest != config_digest(config).as_slice() {
        return Err(Error::config(format!(
            "checkpoint {} was written for a different model configuration",
            path.display()
        )));
    }
    let specs = config.param_specs();
    let count = d.len()?;
    if count != specs.len() {
        return Err(d.fail(format!("{count} parameter blocks, configuration expects {}", specs.len())));
    }
    let mut tensors = Vec::with_capacity(count);
    for spec in &specs {
        let name = d.str()?;
        if name != spec.name {
            return Err(d.fail(format!("block `{name}` where `{}` was expected", spec.name)));
        }
        let rank = d.len()?;
        let shape = (0..rank).map(|_| d.u64().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
        if shape != spec.shape {
            return Err(d.fail(format!("block `{name}` has shape {shape:?}, expected {:?}", spec.shape)));
        }
        let data = d.f32s(shape.iter().product())?;
        tensors.push(Tensor::new(shape, data).map_err(|e| d.fail(e.to_string()))?);
    }
    d.finish()?;
    DenoiserParams::from_tensors(config, tensors)
}

pub fn load_checkpoint(path: &Path, config: &DenoiserConfig, allow_config_mismatch: bool) -> Result<DenoiserParams> {
    decode_checkpoint(&read_file(path)?, path, config, allow_config_mismatch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::RngState;

    fn params() -> DenoiserParams {
        let cfg = DenoiserConfig {
            d_model: 16,
            heads: 2,
            ..DenoiserConfig::default()
        };
        let mut rng = RngState::new(1);
        let mut p = DenoiserParams::init(&cfg, &mut rng).unwrap();
        for t in p.tensors.iter_mut() {
            *t = rng.normal_tensor(t.shape().to_vec(), 1.0);
        }
        p
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.hdwm");
        let p = params();
        save_checkpoint(&path, &p).unwrap();
        let q = load_checkpoint(&path, &p.config, false).unwrap();
        assert_eq!(p, q);
        assert_eq!(std::fs::read(&path).unwrap(), encode_checkpoint(&q).unwrap());
        assert_eq!(&std::fs::read(&path).unwrap()[..4], b"HDWM");
    }

    #[test]
    fn corruption_is_detected() {
        let p = params();
        let mut bytes = encode_checkpoint(&p).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 1;
        let err = decode_checkpoint(&bytes, Path::new("x"), &p.config, false).unwrap_err();
        assert!(err.to_string().contains("checksum"), "{err}");
        let short = &encode_checkpoint(&p).unwrap()[..10];
        assert!(decode_checkpoint(short, Path::new("x"), &p.config, false).is_err());
    }

    #[test]
    fn digest_guards_configuration() {
        let p = params();
        let bytes = encode_checkpoint(&p).unwrap();
        let other = DenoiserConfig {
            action_max_period: 50.0,
            ..p.config.clone()
        };
        assert!(matches!(decode_checkpoint(&bytes, Path::new("x"), &other, false), Err(Error::Config(_))));
        let q = decode_checkpoint(&bytes, Path::new("x"), &other, true).unwrap();
        assert_eq!(q.tensors, p.tensors);
        let wider = DenoiserConfig {
            d_model: 32,
            ..p.config.clone()
        };
        assert!(decode_checkpoint(&bytes, Path::new("x"), &wider, true).is_err());
    }

    #[test]
    fn missing_file_reports_path() {
        let err = load_checkpoint(Path::new("/nonexistent/m.hdwm"), &params().config, false).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/m.hdwm"));
    }
}

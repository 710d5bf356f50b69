//! Binary checkpoint format.
//!
//! ```text
//! "SODAMDL1" | u64 LE header length | JSON header | payload
//! ```
//!
//! The header is `{"config": ModelConfig, "tensors": [{name, dtype, shape,
//! byte_offset, byte_len}]}`. Offsets are relative to the first payload byte
//! and 64-byte aligned; tensor data is little-endian, zero padded between
//! tensors.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelWeights};
use crate::error::{Error, FormatError, Result};
use crate::tensor::{Dtype, Scalar, Tensor};

pub const MAGIC: &[u8; 8] = b"SODAMDL1";
const ALIGN: u64 = 64;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    dtype: Dtype,
    shape: Vec<usize>,
    byte_offset: u64,
    byte_len: u64,
}

fn align_up(x: u64) -> u64 {
    x.div_ceil(ALIGN) * ALIGN
}

impl<F: Scalar> ModelWeights<F> {
    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let mut entries = Vec::new();
        let mut payload = Vec::new();
        for (name, t) in self.named_tensors() {
            let offset = align_up(payload.len() as u64);
            payload.resize(offset as usize, 0);
            for &x in t.data() {
                x.write_le(&mut payload);
            }
            entries.push(TensorEntry {
                name,
                dtype: F::DTYPE,
                shape: t.shape().to_vec(),
                byte_offset: offset,
                byte_len: payload.len() as u64 - offset,
            });
        }
        let header = Header {
            config: self.config.clone(),
            tensors: entries,
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(16 + json.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        out
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, payload) = parse_header(bytes)?;
        let payload_start = bytes.len() as u64 - payload.len() as u64;
        let expected = header.config.tensor_shapes();
        // Validate every declaration before touching the payload.
        // Payloads are converted to `F` on load, but a file must use one dtype throughout.
        let stored = header.tensors.first().map_or(F::DTYPE, |t| t.dtype);
        let mut plan = Vec::with_capacity(expected.len());
        for (name, shape) in &expected {
            let entry = header
                .tensors
                .iter()
                .find(|e| &e.name == name)
                .ok_or_else(|| FormatError::MissingTensor(name.clone()))?;
            if entry.dtype != stored {
                return Err(FormatError::DtypeMismatch {
                    name: name.clone(),
                    found: entry.dtype.to_string(),
                    expected: stored.to_string(),
                }
                .into());
            }
            let numel: usize = entry.shape.iter().product();
            let needed = (numel * entry.dtype.size()) as u64;
            if entry.byte_len != needed {
                return Err(FormatError::TensorLength {
                    name: name.clone(),
                    shape: entry.shape.clone(),
                    declared: entry.byte_len,
                    expected: needed,
                }
                .into());
            }
            if &entry.shape != shape {
                return Err(FormatError::ShapeMismatch {
                    name: name.clone(),
                    found: entry.shape.clone(),
                    expected: shape.clone(),
                }
                .into());
            }
            if entry.byte_offset % ALIGN != 0 {
                return Err(FormatError::Misaligned(name.clone()).into());
            }
            let end = entry.byte_offset.checked_add(entry.byte_len);
            if end.is_none_or(|e| e > payload.len() as u64) {
                return Err(FormatError::Truncated {
                    offset: payload_start + entry.byte_offset,
                    needed: entry.byte_len,
                    available: (payload.len() as u64).saturating_sub(entry.byte_offset),
                }
                .into());
            }
            plan.push(entry);
        }
        let size = stored.size();
        let decode = |b: &[u8]| match stored {
            Dtype::F32 => F::of(f32::read_le(b) as f64),
            Dtype::F64 => F::of(f64::read_le(b)),
        };
        let mut tensors = Vec::with_capacity(plan.len());
        for entry in plan {
            let start = entry.byte_offset as usize;
            let raw = &payload[start..start + entry.byte_len as usize];
            let data: Vec<F> = raw.chunks_exact(size).map(decode).collect();
            let t = Tensor::from_vec(entry.shape.clone(), data)?;
            if !t.is_finite() {
                return Err(FormatError::NonFinite(entry.name.clone()).into());
            }
            tensors.push(t);
        }
        ModelWeights::from_ordered(header.config, tensors)
    }
}

fn parse_header(bytes: &[u8]) -> Result<(Header, &[u8])> {
    if bytes.len() < MAGIC.len() {
        if !MAGIC.starts_with(bytes) {
            return Err(FormatError::BadMagic(bytes.to_vec()).into());
        }
        return Err(FormatError::Truncated {
            offset: 0,
            needed: MAGIC.len() as u64,
            available: bytes.len() as u64,
        }
        .into());
    }
    if &bytes[..8] != MAGIC {
        return Err(FormatError::BadMagic(bytes[..8].to_vec()).into());
    }
    let Some(len_bytes) = bytes.get(8..16) else {
        return Err(FormatError::Truncated {
            offset: 8,
            needed: 8,
            available: bytes.len() as u64 - 8,
        }
        .into());
    };
    let header_len = u64::from_le_bytes(len_bytes.try_into().expect("8 bytes"));
    let available = bytes.len() as u64 - 16;
    if header_len > available {
        return Err(FormatError::Truncated {
            offset: 16,
            needed: header_len,
            available,
        }
        .into());
    }
    let header_end = 16 + header_len as usize;
    let header: Header = serde_json::from_slice(&bytes[16..header_end])
        .map_err(|e| FormatError::Header(e.to_string()))?;
    header
        .config
        .validate()
        .map_err(|e| FormatError::Header(e.to_string()))?;
    Ok((header, &bytes[header_end..]))
}

/// Payload precision recorded in a checkpoint, read from the header only.
pub fn read_checkpoint_dtype(path: impl AsRef<Path>) -> Result<Dtype> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (header, _) = parse_header(&bytes)?;
    Ok(header.tensors.first().map_or(Dtype::F32, |t| t.dtype))
}

pub fn save_checkpoint<F: Scalar>(weights: &ModelWeights<F>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, weights.to_checkpoint_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<F: Scalar>(path: impl AsRef<Path>) -> Result<ModelWeights<F>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    ModelWeights::from_checkpoint_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_random;

    fn small() -> ModelWeights<f32> {
        let cfg = ModelConfig {
            vocab_size: 16,
            d_model: 8,
            n_heads: 2,
            d_ff: 16,
            max_seq_len: 8,
            ..ModelConfig::default()
        };
        init_random(&cfg, 11).unwrap()
    }

    fn corrupt_header(bytes: &[u8], edit: impl FnOnce(&mut serde_json::Value)) -> Vec<u8> {
        let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let mut header: serde_json::Value = serde_json::from_slice(&bytes[16..16 + len]).unwrap();
        edit(&mut header);
        let json = serde_json::to_vec(&header).unwrap();
        let mut out = MAGIC.to_vec();
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&bytes[16 + len..]);
        out
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let (p1, p2) = (dir.path().join("a.bin"), dir.path().join("b.bin"));
        let w = small();
        save_checkpoint(&w, &p1).unwrap();
        let back: ModelWeights<f32> = load_checkpoint(&p1).unwrap();
        assert_eq!(back, w);
        save_checkpoint(&back, &p2).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
        assert_eq!(read_checkpoint_dtype(&p1).unwrap(), Dtype::F32);
    }

    #[test]
    fn offsets_are_aligned() {
        let bytes = small().to_checkpoint_bytes();
        let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let header: Header = serde_json::from_slice(&bytes[16..16 + len]).unwrap();
        assert!(header.tensors.iter().all(|t| t.byte_offset % 64 == 0));
    }

    #[test]
    fn bad_magic_rejected() {
        let mut bytes = small().to_checkpoint_bytes();
        bytes[0] = b'X';
        let err = ModelWeights::<f32>::from_checkpoint_bytes(&bytes).unwrap_err();
        assert!(matches!(err, Error::Format(FormatError::BadMagic(_))));
    }

    #[test]
    fn wrong_declared_length_rejected_before_payload() {
        let bytes = small().to_checkpoint_bytes();
        let bad = corrupt_header(&bytes, |h| {
            h["tensors"][0]["byte_len"] = serde_json::json!(12);
        });
        // drop the payload entirely: the header check must fire first
        let len = u64::from_le_bytes(bad[8..16].try_into().unwrap()) as usize;
        let err = ModelWeights::<f32>::from_checkpoint_bytes(&bad[..16 + len]).unwrap_err();
        assert!(
            matches!(err, Error::Format(FormatError::TensorLength { .. })),
            "{err}"
        );
    }

    #[test]
    fn truncated_payload_rejected() {
        let bytes = small().to_checkpoint_bytes();
        let err =
            ModelWeights::<f32>::from_checkpoint_bytes(&bytes[..bytes.len() - 3]).unwrap_err();
        assert!(matches!(err, Error::Format(FormatError::Truncated { .. })));
        let err = ModelWeights::<f32>::from_checkpoint_bytes(&bytes[..12]).unwrap_err();
        assert!(matches!(err, Error::Format(FormatError::Truncated { .. })));
    }

    #[test]
    fn loads_across_precisions() {
        let w = small();
        let wide = ModelWeights::<f64>::from_checkpoint_bytes(&w.to_checkpoint_bytes()).unwrap();
        let back = ModelWeights::<f32>::from_checkpoint_bytes(&wide.to_checkpoint_bytes()).unwrap();
        assert_eq!(back.to_checkpoint_bytes(), w.to_checkpoint_bytes());
    }

    #[test]
    fn dtype_and_shape_mismatch_are_distinct() {
        let bytes = small().to_checkpoint_bytes();
        let mixed = corrupt_header(&bytes, |h| {
            h["tensors"][1]["dtype"] = serde_json::json!("f64");
        });
        let err = ModelWeights::<f32>::from_checkpoint_bytes(&mixed).unwrap_err();
        assert!(matches!(
            err,
            Error::Format(FormatError::DtypeMismatch { .. })
        ));

        let bad = corrupt_header(&bytes, |h| {
            // same element count, different shape
            h["tensors"][0]["shape"] = serde_json::json!([16, 8]);
        });
        let err = ModelWeights::<f32>::from_checkpoint_bytes(&bad).unwrap_err();
        assert!(matches!(
            err,
            Error::Format(FormatError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn garbage_header_rejected() {
        let mut bytes = MAGIC.to_vec();
        bytes.extend_from_slice(&4u64.to_le_bytes());
        bytes.extend_from_slice(b"{{{{");
        let err = ModelWeights::<f32>::from_checkpoint_bytes(&bytes).unwrap_err();
        assert!(matches!(err, Error::Format(FormatError::Header(_))));
    }
}

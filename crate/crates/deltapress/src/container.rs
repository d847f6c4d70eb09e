//! Binary tensor container: an 8-byte little-endian header length, a UTF-8
//! JSON header mapping tensor name to {dtype, shape, data_offsets}, then the
//! raw little-endian payload. Offsets tile the payload exactly, names and
//! JSON keys serialize sorted with no whitespace, so identical contents
//! always produce identical bytes.

use std::collections::BTreeMap;
use std::path::Path;

use half::{bf16, f16};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F16,
    Bf16,
    /// Opaque packed bytes; shape is logical, data_offsets declare the byte length.
    U8Packed,
}

impl Dtype {
    pub fn name(self) -> &'static str {
        match self {
            Dtype::F32 => "f32",
            Dtype::F16 => "f16",
            Dtype::Bf16 => "bf16",
            Dtype::U8Packed => "u8-packed",
        }
    }

    pub fn from_name(s: &str) -> Option<Dtype> {
        match s {
            "f32" => Some(Dtype::F32),
            "f16" => Some(Dtype::F16),
            "bf16" => Some(Dtype::Bf16),
            "u8-packed" => Some(Dtype::U8Packed),
            _ => None,
        }
    }

    /// Bytes per element; None for u8-packed (length declared by offsets).
    pub fn elem_size(self) -> Option<usize> {
        match self {
            Dtype::F32 => Some(4),
            Dtype::F16 | Dtype::Bf16 => Some(2),
            Dtype::U8Packed => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    pub data: Vec<u8>,
}

impl Tensor {
    pub fn elem_count(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_2d(&self) -> bool {
        self.shape.len() == 2
    }

    /// Decode to f32, upcasting f16/bf16. Errors on u8-packed.
    pub fn to_f32_vec(&self, name: &str) -> Result<Vec<f32>> {
        let n = self.elem_count();
        match self.dtype {
            Dtype::F32 => {
                let mut out = Vec::with_capacity(n);
                for c in self.data.chunks_exact(4) {
                    out.push(f32::from_le_bytes([c[0], c[1], c[2], c[3]]));
                }
                Ok(out)
            }
            Dtype::F16 => {
                let mut out = Vec::with_capacity(n);
                for c in self.data.chunks_exact(2) {
                    out.push(f16::from_le_bytes([c[0], c[1]]).to_f32());
                }
                Ok(out)
            }
            Dtype::Bf16 => {
                let mut out = Vec::with_capacity(n);
                for c in self.data.chunks_exact(2) {
                    out.push(bf16::from_le_bytes([c[0], c[1]]).to_f32());
                }
                Ok(out)
            }
            Dtype::U8Packed => Err(Error::tensor(name, "u8-packed tensor has no float view")),
        }
    }

    pub fn to_matrix(&self, name: &str) -> Result<Matrix> {
        if !self.is_2d() {
            return Err(Error::tensor(name, format!("expected 2-D shape, got {:?}", self.shape)));
        }
        let v = self.to_f32_vec(name)?;
        Ok(Matrix::from_vec(self.shape[0], self.shape[1], v))
    }

    pub fn from_f32_slice(shape: Vec<usize>, values: &[f32], dtype: Dtype) -> Tensor {
        assert_eq!(shape.iter().product::<usize>(), values.len());
        let data = match dtype {
            Dtype::F32 => values.iter().flat_map(|v| v.to_le_bytes()).collect(),
            Dtype::F16 => values.iter().flat_map(|&v| f16::from_f32(v).to_le_bytes()).collect(),
            Dtype::Bf16 => values.iter().flat_map(|&v| bf16::from_f32(v).to_le_bytes()).collect(),
            Dtype::U8Packed => panic!("u8-packed tensors are constructed from raw bytes"),
        };
        Tensor { dtype, shape, data }
    }

    pub fn from_matrix(m: &Matrix, dtype: Dtype) -> Tensor {
        Tensor::from_f32_slice(vec![m.rows, m.cols], &m.data, dtype)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TensorContainer {
    pub tensors: BTreeMap<String, Tensor>,
}

#[derive(Serialize, Deserialize)]
struct TensorMeta {
    // field order is the sorted key order in the emitted JSON
    data_offsets: [u64; 2],
    dtype: String,
    shape: Vec<usize>,
}

impl TensorContainer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut metas: BTreeMap<&str, TensorMeta> = BTreeMap::new();
        let mut offset = 0u64;
        for (name, t) in &self.tensors {
            let end = offset + t.data.len() as u64;
            metas.insert(
                name,
                TensorMeta {
                    data_offsets: [offset, end],
                    dtype: t.dtype.name().to_string(),
                    shape: t.shape.clone(),
                },
            );
            offset = end;
        }
        let header = serde_json::to_string(&metas).expect("header serialization");
        let mut out = Vec::with_capacity(8 + header.len() + offset as usize);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        for t in self.tensors.values() {
            out.extend_from_slice(&t.data);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &str) -> Result<TensorContainer> {
        if bytes.len() < 8 {
            return Err(Error::container(origin, format!("file is {} bytes, need at least 8", bytes.len())));
        }
        let header_len = u64::from_le_bytes(bytes[0..8].try_into().unwrap()) as usize;
        if header_len > bytes.len() - 8 {
            return Err(Error::container(
                origin,
                format!("header length {} exceeds file size {} - 8", header_len, bytes.len()),
            ));
        }
        let header = &bytes[8..8 + header_len];
        let payload = &bytes[8 + header_len..];
        let metas: BTreeMap<String, TensorMeta> = serde_json::from_slice(header)
            .map_err(|e| Error::container(origin, format!("malformed JSON header: {e}")))?;

        // validate that offsets are sorted, non-overlapping, and tile the payload
        let mut spans: Vec<(&String, u64, u64)> =
            metas.iter().map(|(n, m)| (n, m.data_offsets[0], m.data_offsets[1])).collect();
        spans.sort_by_key(|&(_, b, _)| b);
        let mut cursor = 0u64;
        for (name, begin, end) in &spans {
            if *begin != cursor {
                return Err(Error::container(
                    origin,
                    format!("tensor {name}: offset {begin} does not tile payload (expected {cursor})"),
                ));
            }
            if end < begin {
                return Err(Error::container(origin, format!("tensor {name}: negative span [{begin}, {end})")));
            }
            cursor = *end;
        }
        if cursor != payload.len() as u64 {
            return Err(Error::container(
                origin,
                format!("payload is {} bytes but offsets cover {}", payload.len(), cursor),
            ));
        }

        let mut tensors = BTreeMap::new();
        for (name, meta) in metas {
            let dtype = Dtype::from_name(&meta.dtype)
                .ok_or_else(|| Error::container(origin, format!("tensor {name}: unsupported dtype {}", meta.dtype)))?;
            let [begin, end] = meta.data_offsets;
            let span = (end - begin) as usize;
            if let Some(sz) = dtype.elem_size() {
                let expect = meta.shape.iter().product::<usize>() * sz;
                if expect != span {
                    return Err(Error::container(
                        origin,
                        format!(
                            "tensor {name}: span {span} bytes at offset {begin} does not match shape {:?} ({} bytes)",
                            meta.shape, expect
                        ),
                    ));
                }
            }
            tensors.insert(
                name,
                Tensor { dtype, shape: meta.shape, data: payload[begin as usize..end as usize].to_vec() },
            );
        }
        Ok(TensorContainer { tensors })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<TensorContainer> {
        let path = path.as_ref();
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes, &path.display().to_string())
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    /// SHA-256 of the serialized container, hex-encoded.
    pub fn digest(&self) -> String {
        sha256_hex(&self.to_bytes())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    let out = h.finalize();
    let mut s = String::with_capacity(64);
    for b in out {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

/// CR = original / stored, both in 16-bit-equivalent parameter counts.
/// Factorized storage charges each kept U entry, each kept V entry, and one
/// 16-bit σ per kept column; quantized entries count at bits/16.
pub fn compression_ratio(original_param_count: f64, stored_equiv_16bit: f64) -> f64 {
    assert!(stored_equiv_16bit > 0.0, "stored count must be positive");
    original_param_count / stored_equiv_16bit
}

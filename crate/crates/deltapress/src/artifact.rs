//! On-disk delta artifact: an 8-byte little-endian manifest length, a compact
//! JSON manifest (sorted tensor names), and a concatenated binary payload.
//! Mask positions are never written — every decoder regenerates them from the
//! stored 16-bit singular values and the per-tensor salt, then cross-checks
//! entry counts and the allocation-plan digest recorded at compress time.

use std::collections::BTreeMap;

use half::f16;
use serde::{Deserialize, Serialize};

use crate::container::{sha256_hex, Dtype, Tensor, TensorContainer};
use crate::delta::{passes_filter, raw_delta};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::packing::{pack, packed_len, unpack};
use crate::par_map;
use crate::quant::{quantize_artifact, resolve_bits, ColumnCodes, GroupSpec, QuantConfig, QuantizedFactors};
use crate::rng::Factor;
use crate::sparsify::{
    allocate_with_target, dare_mask, dare_sparsify, per_factor_target, regen_mask, sparsify_tensor,
    DareSparse, SparseColumn, SparseFactors, SparsifyConfig,
};
use crate::svd::{reconstruct, svd, truncate_lowrank, SvdFactors};

pub const FORMAT_VERSION: u32 = 1;

pub const METHOD_IMPART: &str = "impart";
pub const METHOD_IMPART_QT: &str = "impart-qt";
pub const METHOD_DARE: &str = "dare";
pub const METHOD_LOWRANK: &str = "lowrank";
pub const METHOD_RAW: &str = "raw";

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct TensorRecord {
    pub method: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    /// payload-relative [start, end)
    pub data_offsets: [u64; 2],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c: Option<f64>,
    /// uniform drop probability (dare)
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub drop_p: Option<f64>,
    /// retained rank (lowrank)
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rank: Option<usize>,
    /// σ-rank bit grouping (impart-qt)
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group_bits: Option<Vec<GroupSpec>>,
    /// SHA-256 of the allocation plan's p vector (little-endian f64s)
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plan_digest: Option<String>,
    /// mask-seed salt; defaults to the tensor name
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub salt: Option<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    /// digest of the base checkpoint's canonical container bytes
    pub base_digest: String,
    pub tensors: BTreeMap<String, TensorRecord>,
}

/// Which per-tensor method `compress_to_artifact` applies to filtered 2-D
/// tensors. Everything else passes through as a raw delta.
#[derive(Clone, Debug)]
pub enum MethodChoice {
    Impart,
    ImpartQt(QuantConfig),
    Dare { p: f64 },
    Lowrank,
    Raw,
}

#[derive(Clone, Debug)]
pub struct CompressConfig {
    pub method: MethodChoice,
    pub alpha: f64,
    pub beta: f64,
    pub c: f64,
    /// substring filter for 2-D tensors; non-matching tensors go raw
    pub filter: Option<String>,
}

impl CompressConfig {
    pub fn new(method: MethodChoice, alpha: f64) -> Self {
        CompressConfig { method, alpha, beta: 0.6, c: 1.0, filter: None }
    }
}

// ---------------------------------------------------------------- varints --

pub fn put_varint(out: &mut Vec<u8>, mut v: u64) {
    loop {
        let byte = (v & 0x7f) as u8;
        v >>= 7;
        if v != 0 {
            out.push(byte | 0x80);
        } else {
            out.push(byte);
            break;
        }
    }
}

pub fn read_varint(bytes: &[u8], pos: &mut usize) -> Result<u64> {
    let mut v = 0u64;
    let mut shift = 0u32;
    loop {
        let &b = bytes
            .get(*pos)
            .ok_or_else(|| Error::container("artifact", "truncated varint"))?;
        *pos += 1;
        if shift == 63 && b > 1 {
            return Err(Error::container("artifact", "varint overflows u64"));
        }
        v |= ((b & 0x7f) as u64) << shift;
        if b & 0x80 == 0 {
            return Ok(v);
        }
        shift += 7;
        if shift > 63 {
            return Err(Error::container("artifact", "varint overflows u64"));
        }
    }
}

fn put_f16(out: &mut Vec<u8>, v: f16) {
    out.extend_from_slice(&v.to_bits().to_le_bytes());
}

fn read_f16(bytes: &[u8], pos: &mut usize) -> Result<f16> {
    let end = *pos + 2;
    let s = bytes
        .get(*pos..end)
        .ok_or_else(|| Error::container("artifact", "truncated f16 value"))?;
    *pos = end;
    Ok(f16::from_bits(u16::from_le_bytes([s[0], s[1]])))
}

fn read_slice<'a>(bytes: &'a [u8], pos: &mut usize, len: usize, what: &str) -> Result<&'a [u8]> {
    let end = *pos + len;
    let s = bytes
        .get(*pos..end)
        .ok_or_else(|| Error::container("artifact", format!("truncated {what}")))?;
    *pos = end;
    Ok(s)
}

/// SHA-256 over the plan's p vector as little-endian f64 bytes.
pub fn plan_digest(p: &[f64]) -> String {
    let mut bytes = Vec::with_capacity(p.len() * 8);
    for &v in p {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    sha256_hex(&bytes)
}

// --------------------------------------------------------- method codecs --

fn encode_impart(sf: &SparseFactors) -> Vec<u8> {
    let mut out = Vec::new();
    let stored = sf.plan.r.min(sf.sigma_stored.len());
    put_varint(&mut out, stored as u64);
    for k in 0..stored {
        put_f16(&mut out, sf.sigma_stored[k]);
    }
    for slot in 0..sf.kept.len() {
        for col in [&sf.cols_u[slot], &sf.cols_v[slot]] {
            put_varint(&mut out, col.values.len() as u64);
            for &v in &col.values {
                put_f16(&mut out, f16::from_f32(v));
            }
        }
    }
    out
}

struct ImpartParams<'a> {
    alpha: f64,
    beta: f64,
    c: f64,
    salt: &'a str,
    plan_digest: Option<&'a str>,
}

/// Rebuild the sparse factors: recompute the plan from the stored σ (the
/// allocation reads only the first r values and the spectrum length),
/// cross-check its digest, regenerate every mask, and validate entry counts.
fn decode_impart(
    payload: &[u8],
    name: &str,
    m: usize,
    n: usize,
    prm: &ImpartParams,
) -> Result<SparseFactors> {
    let q = m.min(n);
    let mut pos = 0usize;
    let stored = read_varint(payload, &mut pos)? as usize;
    if stored > q {
        return Err(Error::tensor(name, format!("{stored} stored σ exceed the spectrum length {q}")));
    }
    let mut sigma16 = vec![f16::from_f64(0.0); q];
    for s in sigma16.iter_mut().take(stored) {
        *s = read_f16(payload, &mut pos)?;
    }
    let sigma_full: Vec<f64> = sigma16.iter().map(|s| s.to_f64()).collect();
    let plan = allocate_with_target(
        &sigma_full,
        per_factor_target(prm.alpha, m, n),
        prm.beta,
        prm.c,
        prm.alpha == 0.0,
    );
    let expect_stored = plan.r.min(if plan.is_empty() { 0 } else { q });
    if stored != expect_stored {
        return Err(Error::tensor(
            name,
            format!("stored σ count {stored} does not match the plan boundary {expect_stored}"),
        ));
    }
    if let Some(expected) = prm.plan_digest {
        let actual = plan_digest(&plan.p);
        if actual != expected {
            return Err(Error::tensor(
                name,
                format!("allocation plan digest mismatch: recorded {expected}, derived {actual}"),
            ));
        }
    }
    let mut kept = Vec::new();
    let mut cols_u = Vec::new();
    let mut cols_v = Vec::new();
    for k in 0..plan.p.len() {
        let p = plan.p[k];
        if p >= 1.0 {
            continue;
        }
        let mut read_col = |which: Factor, len: usize| -> Result<SparseColumn> {
            let count = read_varint(payload, &mut pos)? as usize;
            let indices = regen_mask(sigma16[k], prm.salt, which, len, p);
            if indices.len() != count {
                return Err(Error::tensor(
                    name,
                    format!(
                        "column {k} stores {count} entries but its mask regenerates {}",
                        indices.len()
                    ),
                ));
            }
            let mut values = Vec::with_capacity(count);
            for _ in 0..count {
                values.push(read_f16(payload, &mut pos)?.to_f32());
            }
            Ok(SparseColumn { indices, values })
        };
        cols_u.push(read_col(Factor::U, m)?);
        cols_v.push(read_col(Factor::V, n)?);
        kept.push(k);
    }
    if pos != payload.len() {
        return Err(Error::tensor(name, format!("{} trailing payload bytes", payload.len() - pos)));
    }
    Ok(SparseFactors {
        m,
        n,
        sigma_stored: sigma16,
        plan,
        kept,
        cols_u,
        cols_v,
        salt: prm.salt.to_string(),
    })
}

fn encode_quant(qf: &QuantizedFactors) -> Vec<u8> {
    let mut out = Vec::new();
    let stored = qf.plan.r.min(qf.sigma_stored.len());
    put_varint(&mut out, stored as u64);
    for k in 0..stored {
        put_f16(&mut out, qf.sigma_stored[k]);
    }
    for slot in 0..qf.kept.len() {
        for qc in [&qf.u_cols[slot], &qf.v_cols[slot]] {
            match &qc.codes {
                ColumnCodes::Raw16(vals) => {
                    put_varint(&mut out, vals.len() as u64);
                    for &v in vals {
                        put_f16(&mut out, v);
                    }
                }
                ColumnCodes::Packed { bits, scale, codes } => {
                    put_varint(&mut out, codes.len() as u64);
                    put_f16(&mut out, *scale);
                    out.extend_from_slice(&pack(codes, *bits));
                }
            }
        }
    }
    out
}

/// Decode quantized factors straight to sparse factors (decoded values in
/// place of the original f16 entries).
fn decode_quant(
    payload: &[u8],
    name: &str,
    m: usize,
    n: usize,
    prm: &ImpartParams,
    groups: &[GroupSpec],
) -> Result<SparseFactors> {
    let q = m.min(n);
    let mut pos = 0usize;
    let stored = read_varint(payload, &mut pos)? as usize;
    if stored > q {
        return Err(Error::tensor(name, format!("{stored} stored σ exceed the spectrum length {q}")));
    }
    let mut sigma16 = vec![f16::from_f64(0.0); q];
    for s in sigma16.iter_mut().take(stored) {
        *s = read_f16(payload, &mut pos)?;
    }
    let sigma_full: Vec<f64> = sigma16.iter().map(|s| s.to_f64()).collect();
    let plan = allocate_with_target(
        &sigma_full,
        per_factor_target(prm.alpha, m, n),
        prm.beta,
        prm.c,
        prm.alpha == 0.0,
    );
    if let Some(expected) = prm.plan_digest {
        let actual = plan_digest(&plan.p);
        if actual != expected {
            return Err(Error::tensor(
                name,
                format!("allocation plan digest mismatch: recorded {expected}, derived {actual}"),
            ));
        }
    }
    let bits_by_rank = resolve_bits(plan.r, groups)?;
    let mut kept = Vec::new();
    let mut cols_u = Vec::new();
    let mut cols_v = Vec::new();
    for k in 0..plan.p.len() {
        let p = plan.p[k];
        if p >= 1.0 {
            continue;
        }
        let bits = bits_by_rank[k];
        let mut read_col = |which: Factor, len: usize| -> Result<SparseColumn> {
            let count = read_varint(payload, &mut pos)? as usize;
            let indices = regen_mask(sigma16[k], prm.salt, which, len, p);
            if indices.len() != count {
                return Err(Error::tensor(
                    name,
                    format!(
                        "column {k} stores {count} entries but its mask regenerates {}",
                        indices.len()
                    ),
                ));
            }
            let values: Vec<f32> = if bits == 16 {
                let mut vals = Vec::with_capacity(count);
                for _ in 0..count {
                    vals.push(read_f16(payload, &mut pos)?.to_f32());
                }
                vals
            } else {
                let scale = read_f16(payload, &mut pos)?.to_f64();
                let raw = read_slice(payload, &mut pos, packed_len(count, bits), "packed codes")?;
                unpack(raw, bits, count).into_iter().map(|c| (c as f64 * scale) as f32).collect()
            };
            Ok(SparseColumn { indices, values })
        };
        cols_u.push(read_col(Factor::U, m)?);
        cols_v.push(read_col(Factor::V, n)?);
        kept.push(k);
    }
    if pos != payload.len() {
        return Err(Error::tensor(name, format!("{} trailing payload bytes", payload.len() - pos)));
    }
    Ok(SparseFactors {
        m,
        n,
        sigma_stored: sigma16,
        plan,
        kept,
        cols_u,
        cols_v,
        salt: prm.salt.to_string(),
    })
}

fn encode_dare(d: &DareSparse) -> Vec<u8> {
    let mut out = Vec::new();
    put_varint(&mut out, d.values.len() as u64);
    for &v in &d.values {
        put_f16(&mut out, f16::from_f32(v));
    }
    out
}

fn decode_dare(payload: &[u8], name: &str, m: usize, n: usize, p: f64, salt: &str) -> Result<DareSparse> {
    let mut pos = 0usize;
    let count = read_varint(payload, &mut pos)? as usize;
    let indices = dare_mask(salt, m * n, p);
    if indices.len() != count {
        return Err(Error::tensor(
            name,
            format!("{count} stored entries but the mask regenerates {}", indices.len()),
        ));
    }
    let mut values = Vec::with_capacity(count);
    for _ in 0..count {
        values.push(read_f16(payload, &mut pos)?.to_f32());
    }
    if pos != payload.len() {
        return Err(Error::tensor(name, format!("{} trailing payload bytes", payload.len() - pos)));
    }
    Ok(DareSparse { m, n, p, indices, values, salt: salt.to_string() })
}

fn encode_lowrank(f: &SvdFactors) -> Vec<u8> {
    let (m, n) = f.shape();
    let r = f.sigma.len();
    let mut out = Vec::new();
    put_varint(&mut out, r as u64);
    for &s in &f.sigma {
        put_f16(&mut out, f16::from_f64(s.min(65504.0)));
    }
    for k in 0..r {
        for i in 0..m {
            put_f16(&mut out, f16::from_f32(f.u.get(i, k)));
        }
        for j in 0..n {
            put_f16(&mut out, f16::from_f32(f.v.get(j, k)));
        }
    }
    out
}

fn decode_lowrank(payload: &[u8], name: &str, m: usize, n: usize, rank: Option<usize>) -> Result<SvdFactors> {
    let mut pos = 0usize;
    let r = read_varint(payload, &mut pos)? as usize;
    if let Some(expect) = rank {
        if r != expect {
            return Err(Error::tensor(name, format!("payload rank {r} does not match recorded rank {expect}")));
        }
    }
    if r > m.min(n) {
        return Err(Error::tensor(name, format!("rank {r} exceeds min({m}, {n})")));
    }
    let mut sigma = Vec::with_capacity(r);
    for _ in 0..r {
        sigma.push(read_f16(payload, &mut pos)?.to_f64());
    }
    let mut u = Matrix::zeros(m, r);
    let mut v = Matrix::zeros(n, r);
    for k in 0..r {
        for i in 0..m {
            u.set(i, k, read_f16(payload, &mut pos)?.to_f32());
        }
        for j in 0..n {
            v.set(j, k, read_f16(payload, &mut pos)?.to_f32());
        }
    }
    if pos != payload.len() {
        return Err(Error::tensor(name, format!("{} trailing payload bytes", payload.len() - pos)));
    }
    Ok(SvdFactors { u, sigma, v })
}

// ----------------------------------------------------------- compression --

fn finite_delta(name: &str, base: &Matrix, ft: &Matrix) -> Result<Matrix> {
    let d = ft.sub(base);
    for (idx, v) in d.data.iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::tensor(name, format!("non-finite delta at flat index {idx}")));
        }
    }
    Ok(d)
}

fn compress_one(
    name: &str,
    base_t: &Tensor,
    ft_t: &Tensor,
    cfg: &CompressConfig,
) -> Result<(TensorRecord, Vec<u8>)> {
    if base_t.shape != ft_t.shape {
        return Err(Error::tensor(
            name,
            format!("shape mismatch: base {:?} vs finetuned {:?}", base_t.shape, ft_t.shape),
        ));
    }
    let mk_record = |method: &str| TensorRecord {
        method: method.to_string(),
        dtype: ft_t.dtype.name().to_string(),
        shape: ft_t.shape.clone(),
        data_offsets: [0, 0],
        alpha: None,
        beta: None,
        c: None,
        drop_p: None,
        rank: None,
        group_bits: None,
        plan_digest: None,
        salt: None,
    };

    if !passes_filter(name, ft_t, cfg.filter.as_deref()) || matches!(cfg.method, MethodChoice::Raw) {
        let raw = raw_delta(name, base_t, ft_t)?;
        let mut rec = mk_record(METHOD_RAW);
        rec.dtype = raw.dtype.name().to_string();
        return Ok((rec, raw.data));
    }

    let bm = base_t.to_matrix(name)?;
    let fm = ft_t.to_matrix(name)?;
    let delta = finite_delta(name, &bm, &fm)?;

    match &cfg.method {
        MethodChoice::Raw => unreachable!("handled above"),
        MethodChoice::Impart => {
            let sf = sparsify_tensor(&delta, &SparsifyConfig::new(cfg.alpha, cfg.beta, cfg.c, name))?;
            let mut rec = mk_record(METHOD_IMPART);
            rec.alpha = Some(cfg.alpha);
            rec.beta = Some(cfg.beta);
            rec.c = Some(cfg.c);
            rec.plan_digest = Some(plan_digest(&sf.plan.p));
            rec.salt = Some(name.to_string());
            Ok((rec, encode_impart(&sf)))
        }
        MethodChoice::ImpartQt(qcfg) => {
            let sf = sparsify_tensor(&delta, &SparsifyConfig::new(cfg.alpha, cfg.beta, cfg.c, name))?;
            let qf = quantize_artifact(&sf, qcfg)?;
            let mut rec = mk_record(METHOD_IMPART_QT);
            rec.alpha = Some(cfg.alpha);
            rec.beta = Some(cfg.beta);
            rec.c = Some(cfg.c);
            rec.group_bits = Some(qcfg.group_bits.clone());
            rec.plan_digest = Some(plan_digest(&sf.plan.p));
            rec.salt = Some(name.to_string());
            Ok((rec, encode_quant(&qf)))
        }
        MethodChoice::Dare { p } => {
            let d = dare_sparsify(&delta, *p, name);
            let mut rec = mk_record(METHOD_DARE);
            rec.drop_p = Some(*p);
            rec.salt = Some(name.to_string());
            Ok((rec, encode_dare(&d)))
        }
        MethodChoice::Lowrank => {
            let f = svd(&delta, Some(name))?;
            let tf = truncate_lowrank(&f, cfg.alpha)?;
            let mut rec = mk_record(METHOD_LOWRANK);
            rec.alpha = Some(cfg.alpha);
            rec.rank = Some(tf.sigma.len());
            Ok((rec, encode_lowrank(&tf)))
        }
    }
}

/// Compress a fine-tuned checkpoint against its base into artifact bytes.
/// Per-tensor work runs in parallel; assembly order is the sorted tensor
/// names, so output bytes are deterministic.
pub fn compress_to_artifact(
    base: &TensorContainer,
    finetuned: &TensorContainer,
    cfg: &CompressConfig,
) -> Result<Vec<u8>> {
    let entries: Vec<(&String, &Tensor)> = finetuned.tensors.iter().collect();
    let results = par_map(&entries, |(name, ft_t)| -> Result<(String, TensorRecord, Vec<u8>)> {
        let base_t = base
            .get(name)
            .ok_or_else(|| Error::tensor(name.as_str(), "missing from base checkpoint"))?;
        let (rec, payload) = compress_one(name, base_t, ft_t, cfg)?;
        Ok(((*name).clone(), rec, payload))
    });

    let mut tensors = BTreeMap::new();
    let mut payload = Vec::new();
    for r in results {
        let (name, mut rec, bytes) = r?;
        let start = payload.len() as u64;
        payload.extend_from_slice(&bytes);
        rec.data_offsets = [start, payload.len() as u64];
        tensors.insert(name, rec);
    }
    let manifest = Manifest { format_version: FORMAT_VERSION, base_digest: base.digest(), tensors };
    let header = serde_json::to_vec(&manifest)
        .map_err(|e| Error::container("artifact", format!("manifest serialization: {e}")))?;
    let mut out = Vec::with_capacity(8 + header.len() + payload.len());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    Ok(out)
}

// --------------------------------------------------------- decompression --

/// Split artifact bytes into a validated manifest and the payload slice.
pub fn parse_artifact(bytes: &[u8]) -> Result<(Manifest, &[u8])> {
    if bytes.len() < 8 {
        return Err(Error::container("artifact", format!("{} bytes is smaller than the 8-byte header", bytes.len())));
    }
    let header_len = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
    let rest = &bytes[8..];
    if header_len > rest.len() {
        return Err(Error::container(
            "artifact",
            format!("manifest length {header_len} exceeds remaining {} bytes", rest.len()),
        ));
    }
    let manifest: Manifest = serde_json::from_slice(&rest[..header_len])
        .map_err(|e| Error::container("artifact", format!("manifest parse: {e}")))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::container(
            "artifact",
            format!("unsupported format version {}", manifest.format_version),
        ));
    }
    let payload = &rest[header_len..];
    let mut last_end = 0u64;
    for (name, rec) in &manifest.tensors {
        let [s, e] = rec.data_offsets;
        if s < last_end || e < s || e > payload.len() as u64 {
            return Err(Error::container(
                "artifact",
                format!("tensor '{name}' offsets [{s}, {e}) are out of order or out of bounds"),
            ));
        }
        last_end = e;
    }
    Ok((manifest, payload))
}

/// A decoded per-tensor delta: dense for 2-D methods, original-dtype tensor
/// for raw pass-through.
pub enum DecodedDelta {
    Dense(Matrix),
    Raw(Tensor),
}

fn record_2d(name: &str, rec: &TensorRecord) -> Result<(usize, usize)> {
    if rec.shape.len() != 2 {
        return Err(Error::tensor(name, format!("method {} requires a 2-D shape, got {:?}", rec.method, rec.shape)));
    }
    Ok((rec.shape[0], rec.shape[1]))
}

fn need<T: Copy>(name: &str, field: Option<T>, what: &str) -> Result<T> {
    field.ok_or_else(|| Error::tensor(name, format!("record is missing {what}")))
}

/// Decode one tensor's delta from its manifest record and payload slice.
pub fn decode_delta(name: &str, rec: &TensorRecord, payload: &[u8]) -> Result<DecodedDelta> {
    let slice = payload
        .get(rec.data_offsets[0] as usize..rec.data_offsets[1] as usize)
        .ok_or_else(|| Error::tensor(name, "payload offsets out of bounds"))?;
    match rec.method.as_str() {
        METHOD_IMPART | METHOD_IMPART_QT => {
            let (m, n) = record_2d(name, rec)?;
            let prm = ImpartParams {
                alpha: need(name, rec.alpha, "alpha")?,
                beta: need(name, rec.beta, "beta")?,
                c: need(name, rec.c, "c")?,
                salt: rec.salt.as_deref().unwrap_or(name),
                plan_digest: rec.plan_digest.as_deref(),
            };
            let sf = if rec.method == METHOD_IMPART {
                decode_impart(slice, name, m, n, &prm)?
            } else {
                let groups = rec
                    .group_bits
                    .as_deref()
                    .ok_or_else(|| Error::tensor(name, "record is missing group_bits"))?;
                decode_quant(slice, name, m, n, &prm, groups)?
            };
            Ok(DecodedDelta::Dense(crate::sparsify::reconstruct_sparse(&sf)))
        }
        METHOD_DARE => {
            let (m, n) = record_2d(name, rec)?;
            let p = need(name, rec.drop_p, "drop_p")?;
            let d = decode_dare(slice, name, m, n, p, rec.salt.as_deref().unwrap_or(name))?;
            Ok(DecodedDelta::Dense(crate::sparsify::reconstruct_dare(&d)))
        }
        METHOD_LOWRANK => {
            let (m, n) = record_2d(name, rec)?;
            let f = decode_lowrank(slice, name, m, n, rec.rank)?;
            Ok(DecodedDelta::Dense(reconstruct(&f)))
        }
        METHOD_RAW => {
            let dtype = Dtype::from_name(&rec.dtype)
                .ok_or_else(|| Error::tensor(name, format!("unknown dtype '{}'", rec.dtype)))?;
            let elem = dtype
                .elem_size()
                .ok_or_else(|| Error::tensor(name, "raw delta cannot use a packed dtype"))?;
            let expect = rec.shape.iter().product::<usize>() * elem;
            if slice.len() != expect {
                return Err(Error::tensor(
                    name,
                    format!("raw payload is {} bytes, shape implies {expect}", slice.len()),
                ));
            }
            Ok(DecodedDelta::Raw(Tensor { dtype, shape: rec.shape.clone(), data: slice.to_vec() }))
        }
        other => Err(Error::tensor(name, format!("unknown method '{other}'"))),
    }
}

/// Reconstruct the fine-tuned checkpoint: base + decoded deltas, cast back to
/// each tensor's recorded dtype. `force` skips the base-digest check.
pub fn decompress_artifact(bytes: &[u8], base: &TensorContainer, force: bool) -> Result<TensorContainer> {
    let (manifest, payload) = parse_artifact(bytes)?;
    let actual = base.digest();
    if manifest.base_digest != actual && !force {
        return Err(Error::DigestMismatch { expected: manifest.base_digest.clone(), actual });
    }
    let entries: Vec<(&String, &TensorRecord)> = manifest.tensors.iter().collect();
    let results = par_map(&entries, |(name, rec)| -> Result<(String, Tensor)> {
        let base_t = base
            .get(name)
            .ok_or_else(|| Error::tensor(name.as_str(), "missing from base checkpoint"))?;
        if base_t.shape != rec.shape {
            return Err(Error::tensor(
                name.as_str(),
                format!("shape mismatch: base {:?} vs artifact {:?}", base_t.shape, rec.shape),
            ));
        }
        let dtype = Dtype::from_name(&rec.dtype)
            .ok_or_else(|| Error::tensor(name.as_str(), format!("unknown dtype '{}'", rec.dtype)))?;
        let tensor = match decode_delta(name, rec, payload)? {
            DecodedDelta::Dense(delta) => {
                let w = base_t.to_matrix(name)?.add(&delta);
                Tensor::from_matrix(&w, dtype)
            }
            DecodedDelta::Raw(delta_t) => {
                let b = base_t.to_f32_vec(name)?;
                let d = delta_t.to_f32_vec(name)?;
                let w: Vec<f32> =
                    b.iter().zip(&d).map(|(&x, &y)| ((x as f64) + (y as f64)) as f32).collect();
                Tensor::from_f32_slice(rec.shape.clone(), &w, dtype)
            }
        };
        Ok(((*name).clone(), tensor))
    });
    let mut out = TensorContainer::new();
    for r in results {
        let (name, t) = r?;
        out.insert(name, t);
    }
    Ok(out)
}

// ------------------------------------------------------------------ stats --

#[derive(Clone, Debug, Serialize)]
pub struct TensorStats {
    pub name: String,
    pub method: String,
    pub shape: Vec<usize>,
    pub payload_bytes: u64,
    pub params: u64,
    /// dense-f16 bytes over stored payload bytes
    pub cr_vs_f16: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct ArtifactStats {
    pub format_version: u32,
    pub base_digest: String,
    pub file_bytes: u64,
    pub manifest_bytes: u64,
    pub payload_bytes: u64,
    pub total_params: u64,
    pub overall_cr_vs_f16: f64,
    pub tensors: Vec<TensorStats>,
}

pub fn artifact_stats(bytes: &[u8]) -> Result<ArtifactStats> {
    let (manifest, payload) = parse_artifact(bytes)?;
    let mut tensors = Vec::new();
    let mut total_params = 0u64;
    let mut total_payload = 0u64;
    for (name, rec) in &manifest.tensors {
        let params = rec.shape.iter().product::<usize>() as u64;
        let pb = rec.data_offsets[1] - rec.data_offsets[0];
        total_params += params;
        total_payload += pb;
        tensors.push(TensorStats {
            name: name.clone(),
            method: rec.method.clone(),
            shape: rec.shape.clone(),
            payload_bytes: pb,
            params,
            cr_vs_f16: if pb > 0 { (params * 2) as f64 / pb as f64 } else { f64::INFINITY },
        });
    }
    Ok(ArtifactStats {
        format_version: manifest.format_version,
        base_digest: manifest.base_digest.clone(),
        file_bytes: bytes.len() as u64,
        manifest_bytes: (bytes.len() - payload.len()) as u64,
        payload_bytes: total_payload,
        total_params,
        overall_cr_vs_f16: if total_payload > 0 {
            (total_params * 2) as f64 / total_payload as f64
        } else {
            f64::INFINITY
        },
        tensors,
    })
}

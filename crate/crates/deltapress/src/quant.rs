//! Mixed-precision quantization of sparse singular factors: symmetric
//! per-column RTN as the inner step, greedy column-wise error propagation
//! through the inverse-Hessian Cholesky structure (sparse-aware GPTQ), σ-rank
//! bit grouping, and the binary search mapping a combined compression-ratio
//! target back to a sparsity ratio.

use half::f16;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::sparsify::{allocate_with_target, SparseFactors, SparsityPlan};

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq)]
pub struct GroupSpec {
    /// column count; None means "all remaining"
    pub count: Option<usize>,
    pub bits: u8,
}

impl GroupSpec {
    pub fn some(count: usize, bits: u8) -> Self {
        GroupSpec { count: Some(count), bits }
    }
    pub fn rest(bits: u8) -> Self {
        GroupSpec { count: None, bits }
    }
}

#[derive(Clone, Debug)]
pub enum Calibration {
    /// identity Hessian: no cross-column propagation, GPTQ collapses to RTN
    Identity,
    /// sampled layer inputs, one column per sample, row dimension = input dim
    Samples(Matrix),
}

#[derive(Clone, Debug)]
pub struct QuantConfig {
    /// bit widths by σ-descending rank, truncated at the plan boundary r
    pub group_bits: Vec<GroupSpec>,
    pub blocksize: usize,
    /// Hessian ridge as a fraction of the mean diagonal
    pub damping: f64,
    pub calibration: Calibration,
}

impl Default for QuantConfig {
    fn default() -> Self {
        QuantConfig {
            group_bits: vec![GroupSpec::some(2, 8), GroupSpec::some(32, 3), GroupSpec::rest(2)],
            blocksize: 128,
            damping: 0.01,
            calibration: Calibration::Identity,
        }
    }
}

pub const VALID_BITS: [u8; 5] = [2, 3, 4, 8, 16];

/// Per-column bit widths for the first `r` columns under the group rule.
pub fn resolve_bits(r: usize, groups: &[GroupSpec]) -> Result<Vec<u8>> {
    for g in groups {
        if !VALID_BITS.contains(&g.bits) {
            return Err(Error::Config(format!("unsupported bit width {}", g.bits)));
        }
        if matches!(g.count, Some(0)) {
            return Err(Error::Config("bit group with zero count".into()));
        }
    }
    let mut out = Vec::with_capacity(r);
    for g in groups {
        let take = match g.count {
            Some(cnt) => cnt.min(r - out.len()),
            None => r - out.len(),
        };
        out.extend(std::iter::repeat(g.bits).take(take));
        if out.len() == r {
            return Ok(out);
        }
    }
    if out.len() < r {
        return Err(Error::Config(format!(
            "bit groups cover only {} of {} columns; add a rest group",
            out.len(),
            r
        )));
    }
    Ok(out)
}

/// Upper-triangular Cholesky factor R of H⁻¹ (H⁻¹ = RᵀR), the structure the
/// column-wise error propagation walks. Row-major storage.
#[derive(Clone, Debug)]
pub struct HessianFactor {
    pub dim: usize,
    data: Vec<f64>,
}

impl HessianFactor {
    pub fn identity(dim: usize) -> Self {
        let mut data = vec![0.0; dim * dim];
        for i in 0..dim {
            data[i * dim + i] = 1.0;
        }
        HessianFactor { dim, data }
    }

    pub fn from_upper(dim: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), dim * dim);
        HessianFactor { dim, data }
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.dim + j]
    }
}

/// H = 2XXᵀ + λI with λ = damping · mean(diag(2XXᵀ)); returns the Cholesky
/// factor of H⁻¹. Not-positive-definite surfaces as an error suggesting more
/// damping.
pub fn build_hessian_inverse(x: &Matrix, damping: f64) -> Result<HessianFactor> {
    let dim = x.rows;
    let samples = x.cols;
    let mut h = DMatrix::<f64>::zeros(dim, dim);
    for i in 0..dim {
        for j in i..dim {
            let mut acc = 0.0f64;
            for s in 0..samples {
                acc += x.get(i, s) as f64 * x.get(j, s) as f64;
            }
            h[(i, j)] = 2.0 * acc;
            h[(j, i)] = 2.0 * acc;
        }
    }
    let mean_diag = (0..dim).map(|i| h[(i, i)]).sum::<f64>() / dim as f64;
    let lambda = damping * mean_diag;
    for i in 0..dim {
        h[(i, i)] += lambda;
    }
    let chol = nalgebra::Cholesky::new(h).ok_or(Error::HessianNotPd { damping })?;
    let h_inv = chol.inverse();
    let chol_inv = nalgebra::Cholesky::new(h_inv).ok_or(Error::HessianNotPd { damping })?;
    let l = chol_inv.l();
    let mut data = vec![0.0; dim * dim];
    for i in 0..dim {
        for j in 0..=i {
            // transpose the lower factor into the upper layout
            data[j * dim + i] = l[(i, j)];
        }
    }
    Ok(HessianFactor { dim, data })
}

pub fn hessian_for_calibration(calib: &Calibration, dim: usize, damping: f64) -> Result<HessianFactor> {
    match calib {
        Calibration::Identity => Ok(HessianFactor::identity(dim)),
        Calibration::Samples(x) => {
            if x.rows != dim {
                return Err(Error::Config(format!(
                    "calibration rows {} do not match weight input dimension {dim}",
                    x.rows
                )));
            }
            build_hessian_inverse(x, damping)
        }
    }
}

/// Symmetric round-to-nearest on the kept entries of one column:
/// scale = max_kept|w| / (2^{bits-1}-1) stored as f16, codes clamped to the
/// symmetric range, masked entries coded 0.
pub fn rtn_quantize(w: &[f64], bits: u8, mask: &[bool]) -> (Vec<i8>, f16) {
    assert!(matches!(bits, 2 | 3 | 4 | 8), "rtn needs a packed width, got {bits}");
    assert_eq!(w.len(), mask.len());
    let qmax = ((1i16 << (bits - 1)) - 1) as f64;
    let amax = w
        .iter()
        .zip(mask)
        .filter(|&(_, &m)| m)
        .map(|(&v, _)| v.abs())
        .fold(0.0f64, f64::max);
    let scale16 = f16::from_f64(amax / qmax);
    let sw = scale16.to_f64();
    if sw == 0.0 {
        return (vec![0; w.len()], f16::from_f64(0.0));
    }
    let codes = w
        .iter()
        .zip(mask)
        .map(|(&v, &m)| {
            if !m {
                0
            } else {
                (v / sw).round().clamp(-qmax, qmax) as i8
            }
        })
        .collect();
    (codes, scale16)
}

pub fn decode_codes(codes: &[i8], scale: f16) -> Vec<f64> {
    let s = scale.to_f64();
    codes.iter().map(|&c| c as f64 * s).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub enum ColumnCodes {
    Packed { bits: u8, scale: f16, codes: Vec<i8> },
    /// 16-bit group: values stored as f16 directly, no codes
    Raw16(Vec<f16>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedColumns {
    /// full-length codes per column (masked positions are zero)
    pub cols: Vec<ColumnCodes>,
}

impl QuantizedColumns {
    pub fn decode(&self, idx: usize) -> Vec<f64> {
        match &self.cols[idx] {
            ColumnCodes::Packed { scale, codes, .. } => decode_codes(codes, *scale),
            ColumnCodes::Raw16(vals) => vals.iter().map(|v| v.to_f64()).collect(),
        }
    }
}

/// Column-blocked GPTQ on sparse weights: quantize column j of the masked
/// working matrix, push the scaled residual into the columns to its right
/// through rows of the inverse-Hessian factor, flush the accumulated block
/// error into the remainder after each block. An identity factor has no
/// off-diagonals and collapses to per-column RTN exactly.
pub fn gptq_sparse(
    w_cols: &[Vec<f64>],
    masks: &[Vec<bool>],
    r_factor: &HessianFactor,
    bits: &[u8],
    blocksize: usize,
) -> Result<QuantizedColumns> {
    let k_total = w_cols.len();
    assert_eq!(masks.len(), k_total);
    assert_eq!(bits.len(), k_total);
    assert!(r_factor.dim >= k_total, "hessian factor smaller than column count");
    assert!(blocksize >= 1);
    let d = w_cols.first().map_or(0, Vec::len);

    let mut w: Vec<Vec<f64>> = w_cols.to_vec();
    let mut out: Vec<ColumnCodes> = Vec::with_capacity(k_total);
    let mut block_start = 0;
    while block_start < k_total {
        let block_end = (block_start + blocksize).min(k_total);
        let mut errs: Vec<Vec<f64>> = Vec::with_capacity(block_end - block_start);
        for j in block_start..block_end {
            let rjj = r_factor.get(j, j);
            if rjj == 0.0 {
                return Err(Error::ZeroPivot { col: j });
            }
            let wt: Vec<f64> =
                w[j].iter().zip(&masks[j]).map(|(&v, &m)| if m { v } else { 0.0 }).collect();
            let (qv, col) = if bits[j] == 16 {
                let vals: Vec<f16> = wt.iter().map(|&v| f16::from_f64(v)).collect();
                let qv: Vec<f64> = vals
                    .iter()
                    .zip(&masks[j])
                    .map(|(v, &m)| if m { v.to_f64() } else { 0.0 })
                    .collect();
                (qv, ColumnCodes::Raw16(vals))
            } else {
                let (codes, scale) = rtn_quantize(&wt, bits[j], &masks[j]);
                let qv = decode_codes(&codes, scale);
                (qv, ColumnCodes::Packed { bits: bits[j], scale, codes })
            };
            out.push(col);
            let e: Vec<f64> = wt.iter().zip(&qv).map(|(&a, &b)| (a - b) / rjj).collect();
            for l in (j + 1)..block_end {
                let rjl = r_factor.get(j, l);
                if rjl != 0.0 {
                    for i in 0..d {
                        w[l][i] -= e[i] * rjl;
                    }
                }
            }
            errs.push(e);
        }
        for l in block_end..k_total {
            for (j, e) in (block_start..block_end).zip(&errs) {
                let rjl = r_factor.get(j, l);
                if rjl != 0.0 {
                    for i in 0..d {
                        w[l][i] -= e[i] * rjl;
                    }
                }
            }
        }
        block_start = block_end;
    }
    Ok(QuantizedColumns { cols: out })
}

/// GPTQ across the shared input dimension for a group of factor rows whose
/// quantization scales are fixed up front (each row keeps its own symmetric
/// scale). Rows propagate their own residuals independently through the same
/// factor. Returns full-length codes per row.
pub fn gptq_rows_fixed_scale(
    rows: &[Vec<f64>],
    masks: &[Vec<bool>],
    r_factor: &HessianFactor,
    bits: u8,
    scales: &[f16],
) -> Result<Vec<Vec<i8>>> {
    let n = rows.first().map_or(0, Vec::len);
    assert!(r_factor.dim >= n);
    let qmax = ((1i16 << (bits - 1)) - 1) as f64;
    let mut w: Vec<Vec<f64>> = rows.to_vec();
    let mut codes: Vec<Vec<i8>> = vec![vec![0; n]; rows.len()];
    for j in 0..n {
        let rjj = r_factor.get(j, j);
        if rjj == 0.0 {
            return Err(Error::ZeroPivot { col: j });
        }
        for (ri, row) in w.iter_mut().enumerate() {
            let kept = masks[ri][j];
            let wt = if kept { row[j] } else { 0.0 };
            let s = scales[ri].to_f64();
            let q = if !kept || s == 0.0 { 0.0 } else { (wt / s).round().clamp(-qmax, qmax) * s };
            if kept && s != 0.0 {
                codes[ri][j] = (wt / s).round().clamp(-qmax, qmax) as i8;
            }
            let e = (wt - q) / rjj;
            if e != 0.0 {
                for l in (j + 1)..n {
                    let rjl = r_factor.get(j, l);
                    if rjl != 0.0 {
                        row[l] -= e * rjl;
                    }
                }
            }
        }
    }
    Ok(codes)
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuantColumn {
    /// kept-entry payload, positions regenerate from the mask seed
    pub codes: ColumnCodes,
}

#[derive(Clone, Debug)]
pub struct QuantizedFactors {
    pub m: usize,
    pub n: usize,
    pub sigma_stored: Vec<f16>,
    pub plan: SparsityPlan,
    pub kept: Vec<usize>,
    pub bits_per_kept: Vec<u8>,
    pub u_cols: Vec<QuantColumn>,
    pub v_cols: Vec<QuantColumn>,
    pub salt: String,
}

fn dense_from_sparse(indices: &[u32], values: &[f32], len: usize) -> (Vec<f64>, Vec<bool>) {
    let mut w = vec![0.0f64; len];
    let mut mask = vec![false; len];
    for (&i, &v) in indices.iter().zip(values) {
        w[i as usize] = v as f64;
        mask[i as usize] = true;
    }
    (w, mask)
}

fn subset<T: Copy>(full: &[T], indices: &[u32]) -> Vec<T> {
    indices.iter().map(|&i| full[i as usize]).collect()
}

/// Quantize a sparse artifact's factor entries. σ-rank bit groups truncate at
/// the plan boundary; U always quantizes against the identity Hessian (its
/// inputs are unavailable without a forward pass), V against the calibration
/// Hessian when samples are provided. Codes store kept entries only.
pub fn quantize_artifact(sparse: &SparseFactors, cfg: &QuantConfig) -> Result<QuantizedFactors> {
    let kept = sparse.kept.clone();
    let r = sparse.plan.r;
    let bits_by_rank = resolve_bits(r, &cfg.group_bits)?;
    let bits_per_kept: Vec<u8> = kept.iter().map(|&k| bits_by_rank[k]).collect();

    // U factor: identity Hessian, per-column RTN on kept entries
    let mut u_cols = Vec::with_capacity(kept.len());
    for (slot, _) in kept.iter().enumerate() {
        let col = &sparse.cols_u[slot];
        let bits = bits_per_kept[slot];
        let codes = if bits == 16 {
            ColumnCodes::Raw16(col.values.iter().map(|&v| f16::from_f32(v)).collect())
        } else {
            let w: Vec<f64> = col.values.iter().map(|&v| v as f64).collect();
            let mask = vec![true; w.len()];
            let (codes, scale) = rtn_quantize(&w, bits, &mask);
            ColumnCodes::Packed { bits, scale, codes }
        };
        u_cols.push(QuantColumn { codes });
    }

    // V factor: calibrated GPTQ per bit group when samples exist, RTN otherwise
    let mut v_cols: Vec<Option<QuantColumn>> = vec![None; kept.len()];
    match &cfg.calibration {
        Calibration::Identity => {
            for (slot, _) in kept.iter().enumerate() {
                let col = &sparse.cols_v[slot];
                let bits = bits_per_kept[slot];
                let codes = if bits == 16 {
                    ColumnCodes::Raw16(col.values.iter().map(|&v| f16::from_f32(v)).collect())
                } else {
                    let w: Vec<f64> = col.values.iter().map(|&v| v as f64).collect();
                    let mask = vec![true; w.len()];
                    let (codes, scale) = rtn_quantize(&w, bits, &mask);
                    ColumnCodes::Packed { bits, scale, codes }
                };
                v_cols[slot] = Some(QuantColumn { codes });
            }
        }
        calib @ Calibration::Samples(_) => {
            let r_factor = hessian_for_calibration(calib, sparse.n, cfg.damping)?;
            let mut by_bits: Vec<(u8, Vec<usize>)> = Vec::new();
            for (slot, &b) in bits_per_kept.iter().enumerate() {
                match by_bits.last_mut() {
                    Some((bb, slots)) if *bb == b => slots.push(slot),
                    _ => by_bits.push((b, vec![slot])),
                }
            }
            for (bits, slots) in by_bits {
                if bits == 16 {
                    for &slot in &slots {
                        let col = &sparse.cols_v[slot];
                        v_cols[slot] = Some(QuantColumn {
                            codes: ColumnCodes::Raw16(
                                col.values.iter().map(|&v| f16::from_f32(v)).collect(),
                            ),
                        });
                    }
                    continue;
                }
                let mut rows = Vec::with_capacity(slots.len());
                let mut masks = Vec::with_capacity(slots.len());
                let mut scales = Vec::with_capacity(slots.len());
                let qmax = ((1i16 << (bits - 1)) - 1) as f64;
                for &slot in &slots {
                    let col = &sparse.cols_v[slot];
                    let (w, mask) = dense_from_sparse(&col.indices, &col.values, sparse.n);
                    let amax = col.values.iter().map(|&v| (v as f64).abs()).fold(0.0, f64::max);
                    scales.push(f16::from_f64(amax / qmax));
                    rows.push(w);
                    masks.push(mask);
                }
                let codes = gptq_rows_fixed_scale(&rows, &masks, &r_factor, bits, &scales)?;
                for (gi, &slot) in slots.iter().enumerate() {
                    let col = &sparse.cols_v[slot];
                    v_cols[slot] = Some(QuantColumn {
                        codes: ColumnCodes::Packed {
                            bits,
                            scale: scales[gi],
                            codes: subset(&codes[gi], &col.indices),
                        },
                    });
                }
            }
        }
    }

    Ok(QuantizedFactors {
        m: sparse.m,
        n: sparse.n,
        sigma_stored: sparse.sigma_stored.clone(),
        plan: sparse.plan.clone(),
        kept,
        bits_per_kept,
        u_cols,
        v_cols: v_cols.into_iter().map(Option::unwrap).collect(),
        salt: sparse.salt.clone(),
    })
}

/// Decode quantized factors back to sparse factors (kept positions from the
/// original sparse artifact's indices).
pub fn dequantize_artifact(qf: &QuantizedFactors, sparse: &SparseFactors) -> SparseFactors {
    let mut out = sparse.clone();
    let decode_col = |qc: &QuantColumn| -> Vec<f32> {
        match &qc.codes {
            ColumnCodes::Packed { scale, codes, .. } => {
                decode_codes(codes, *scale).into_iter().map(|v| v as f32).collect()
            }
            ColumnCodes::Raw16(vals) => vals.iter().map(|v| v.to_f32()).collect(),
        }
    };
    for slot in 0..qf.kept.len() {
        out.cols_u[slot].values = decode_col(&qf.u_cols[slot]);
        out.cols_v[slot].values = decode_col(&qf.v_cols[slot]);
    }
    out
}

#[derive(Clone, Copy, Debug)]
pub struct CrProbe {
    pub alpha: f64,
    pub alpha_qt: f64,
    pub cr: f64,
}

#[derive(Clone, Debug)]
pub struct CrSolve {
    pub alpha: f64,
    pub alpha_qt: f64,
    pub achieved_cr: f64,
    pub trajectory: Vec<CrProbe>,
}

pub const CR_REL_TOL: f64 = 0.02;

/// Stored fraction of one factor's 16-bit-equivalent entries under a plan and
/// bit grouping: f = (1/q)·Σ_kept (bits_k/16)(1-p_k). The combined ratio
/// charges both factors: CR = 1/(2f); the quantized sparsity is α_qt = 1-f.
pub fn quantized_fraction(plan: &SparsityPlan, groups: &[GroupSpec]) -> Result<f64> {
    let q = plan.p.len();
    if q == 0 {
        return Ok(0.0);
    }
    let bits = resolve_bits(plan.r, groups)?;
    let mut f = 0.0f64;
    for (k, &p) in plan.p.iter().enumerate() {
        if p < 1.0 {
            f += bits[k] as f64 / 16.0 * (1.0 - p);
        }
    }
    Ok(f / q as f64)
}

/// Binary search for the sparsity α whose post-quantization combined
/// compression ratio meets `target_cr` (square-matrix two-factor accounting).
/// Never under-compresses: returns the high end of the final bracket; errors
/// when the best achievable ratio misses the target by more than 2%.
pub fn solve_alpha_for_cr(
    sigma: &[f64],
    target_cr: f64,
    cfg: &QuantConfig,
    beta: f64,
    c: f64,
    tol: f64,
) -> Result<CrSolve> {
    if target_cr < 1.0 {
        return Err(Error::Config(format!("target compression ratio {target_cr} below 1")));
    }
    let mut trajectory = Vec::new();
    let mut probe = |alpha: f64| -> Result<CrProbe> {
        let plan = allocate_with_target(sigma, (1.0 + alpha) / 2.0, beta, c, alpha == 0.0);
        let f = quantized_fraction(&plan, &cfg.group_bits)?;
        let cr = if f > 0.0 { 1.0 / (2.0 * f) } else { f64::INFINITY };
        let p = CrProbe { alpha, alpha_qt: 1.0 - f, cr };
        trajectory.push(p);
        Ok(p)
    };

    let floor = probe(0.0)?;
    if floor.cr >= target_cr {
        // α = 0 already at or above the target: only acceptable if it is the target
        if (floor.cr - target_cr).abs() / target_cr <= CR_REL_TOL {
            return Ok(CrSolve {
                alpha: 0.0,
                alpha_qt: floor.alpha_qt,
                achieved_cr: floor.cr,
                trajectory,
            });
        }
        return Err(Error::UnreachableCr { target: target_cr, best: floor.cr });
    }

    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    let mut hi_probe: Option<CrProbe> = None;
    while hi - lo > tol {
        let mid = 0.5 * (lo + hi);
        let p = probe(mid)?;
        if p.cr >= target_cr {
            hi = mid;
            hi_probe = Some(p);
        } else {
            lo = mid;
        }
    }
    let best = match hi_probe {
        Some(p) => p,
        // bracket never moved: everything below 1.0 under-compresses except the
        // degenerate all-pruned end
        None => probe(hi)?,
    };
    if !best.cr.is_finite() || (best.cr - target_cr).abs() / target_cr > CR_REL_TOL {
        return Err(Error::UnreachableCr { target: target_cr, best: best.cr });
    }
    Ok(CrSolve { alpha: best.alpha, alpha_qt: best.alpha_qt, achieved_cr: best.cr, trajectory })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;
    use crate::sparsify::{sparsify, SparsifyConfig};
    use crate::svd::svd;

    #[test]
    fn hessian_2x2_identity_samples() {
        // X = I, λ = 0: H = 2I, H⁻¹ = diag(1/2, 1/2)
        let x = Matrix::from_vec(2, 2, vec![1., 0., 0., 1.]);
        let r = build_hessian_inverse(&x, 0.0).unwrap();
        // RᵀR must equal diag(0.5)
        for i in 0..2 {
            for j in 0..2 {
                let mut acc = 0.0;
                for k in 0..2 {
                    acc += r.get(k, i) * r.get(k, j);
                }
                let expect = if i == j { 0.5 } else { 0.0 };
                assert!((acc - expect).abs() < 1e-12, "H^-1[{i}{j}] = {acc}");
            }
        }
    }

    #[test]
    fn ridge_dominance_approaches_identity_scale() {
        let mut rng = SplitMix64::new(8);
        let x = Matrix::from_fn(4, 6, |_, _| rng.next_gaussian() as f32);
        let r = build_hessian_inverse(&x, 1e6).unwrap();
        let d0 = r.get(0, 0);
        for i in 1..4 {
            assert!((r.get(i, i) - d0).abs() / d0 < 1e-3);
        }
        for i in 0..4 {
            for j in (i + 1)..4 {
                assert!(r.get(i, j).abs() < d0 * 1e-2, "off-diagonal {} at ({i},{j})", r.get(i, j));
            }
        }
    }

    #[test]
    fn degenerate_hessian_rejected() {
        let x = Matrix::zeros(3, 2);
        assert!(matches!(build_hessian_inverse(&x, 0.0), Err(Error::HessianNotPd { .. })));
    }

    #[test]
    fn rtn_examples() {
        let (codes, s) = rtn_quantize(&[0.0, 0.0], 8, &[true, true]);
        assert_eq!(codes, vec![0, 0]);
        assert_eq!(s.to_f64(), 0.0);

        let (codes, s) = rtn_quantize(&[1.0, -1.0], 8, &[true, true]);
        assert_eq!(codes, vec![127, -127]);
        assert!((s.to_f64() - 1.0 / 127.0).abs() < 1e-4);

        // masked entry never contributes to the scale
        let (codes, s) = rtn_quantize(&[100.0, 0.5], 8, &[false, true]);
        assert_eq!(codes[0], 0);
        assert!((s.to_f64() - 0.5 / 127.0).abs() < 1e-5);
        assert_eq!(codes[1], 127);

        let (codes, _) = rtn_quantize(&[1.0, 2.0], 8, &[false, false]);
        assert_eq!(codes, vec![0, 0]);
    }

    #[test]
    fn gptq_identity_collapses_to_rtn() {
        let mut rng = SplitMix64::new(77);
        let d = 12;
        let k = 6;
        let w: Vec<Vec<f64>> = (0..k).map(|_| (0..d).map(|_| rng.next_gaussian()).collect()).collect();
        let masks: Vec<Vec<bool>> =
            (0..k).map(|_| (0..d).map(|_| rng.next_u64() % 4 != 0).collect()).collect();
        let bits = vec![4u8; k];
        let got = gptq_sparse(&w, &masks, &HessianFactor::identity(k), &bits, 3).unwrap();
        for j in 0..k {
            let wt: Vec<f64> =
                w[j].iter().zip(&masks[j]).map(|(&v, &m)| if m { v } else { 0.0 }).collect();
            let (codes, scale) = rtn_quantize(&wt, 4, &masks[j]);
            match &got.cols[j] {
                ColumnCodes::Packed { codes: gc, scale: gs, .. } => {
                    assert_eq!(gc, &codes);
                    assert_eq!(gs, &scale);
                }
                _ => panic!("expected packed codes"),
            }
        }
    }

    #[test]
    fn gptq_1x2_propagation_oracle() {
        // straight-line execution of the blocked loop on one row, two columns,
        // upper factor [[1.0, 0.5], [0, 1.0]]
        let w = vec![vec![1.3f64], vec![0.4f64]];
        let masks = vec![vec![true], vec![true]];
        let r = HessianFactor::from_upper(2, vec![1.0, 0.5, 0.0, 1.0]);
        let got = gptq_sparse(&w, &masks, &r, &[8, 8], 2).unwrap();

        // column 1: rtn(1.3)
        let qmax = 127.0f64;
        let s1 = f16::from_f64(1.3 / qmax);
        let c1 = (1.3 / s1.to_f64()).round().clamp(-qmax, qmax);
        let q1 = c1 * s1.to_f64();
        let e = (1.3 - q1) / 1.0;
        // column 2 absorbs e scaled by the off-diagonal 0.5
        let w2 = 0.4 - e * 0.5;
        let s2 = f16::from_f64(w2.abs() / qmax);
        let c2 = (w2 / s2.to_f64()).round().clamp(-qmax, qmax);
        match (&got.cols[0], &got.cols[1]) {
            (
                ColumnCodes::Packed { codes: a, scale: sa, .. },
                ColumnCodes::Packed { codes: b, scale: sb, .. },
            ) => {
                assert_eq!(a[0] as f64, c1);
                assert_eq!(*sa, s1);
                assert_eq!(b[0] as f64, c2);
                assert_eq!(*sb, s2);
            }
            _ => panic!("expected packed codes"),
        }
    }

    #[test]
    fn masked_positions_decode_to_zero() {
        let mut rng = SplitMix64::new(5);
        let w: Vec<Vec<f64>> = (0..4).map(|_| (0..8).map(|_| rng.next_gaussian()).collect()).collect();
        let masks: Vec<Vec<bool>> =
            (0..4).map(|_| (0..8).map(|_| rng.next_u64() % 2 == 0).collect()).collect();
        let r = HessianFactor::identity(4);
        let got = gptq_sparse(&w, &masks, &r, &[3, 3, 3, 3], 2).unwrap();
        for j in 0..4 {
            let dec = got.decode(j);
            for i in 0..8 {
                if !masks[j][i] {
                    assert_eq!(dec[i], 0.0);
                }
            }
        }
    }

    #[test]
    fn grouping_arithmetic() {
        let groups = [GroupSpec::some(2, 8), GroupSpec::some(32, 3), GroupSpec::rest(2)];
        let bits = resolve_bits(40, &groups).unwrap();
        assert_eq!(bits.iter().filter(|&&b| b == 8).count(), 2);
        assert_eq!(bits.iter().filter(|&&b| b == 3).count(), 32);
        assert_eq!(bits.iter().filter(|&&b| b == 2).count(), 6);
        // truncation below the first two groups
        let bits = resolve_bits(20, &groups).unwrap();
        assert_eq!(bits.iter().filter(|&&b| b == 3).count(), 18);
        // missing rest group errors when exhausted
        let short = [GroupSpec::some(2, 8)];
        assert!(resolve_bits(3, &short).is_err());
    }

    #[test]
    fn printed_weights_arithmetic() {
        // groups (2, 32, rest) at 8/4/2 bits reproduce per-entry weights 1/2, 1/4, 1/8
        let groups = [GroupSpec::some(2, 8), GroupSpec::some(32, 4), GroupSpec::rest(2)];
        let p: Vec<f64> = (0..64).map(|k| k as f64 / 64.0).collect();
        let plan = SparsityPlan { p: p.clone(), gamma: 1.0, r: 64, alpha_factor: 0.5, all_pruned: false };
        let f = quantized_fraction(&plan, &groups).unwrap();
        let mut expect = 0.0;
        for (k, &pk) in p.iter().enumerate() {
            let w = if k < 2 {
                0.5
            } else if k < 34 {
                0.25
            } else {
                0.125
            };
            expect += w * (1.0 - pk);
        }
        expect /= 64.0;
        assert!((f - expect).abs() < 1e-12);
    }

    #[test]
    fn solve_alpha_all_16bit_degenerates_to_pure_sparsity() {
        let sigma: Vec<f64> = (1..=256).map(|k| (k as f64).powf(-1.0)).collect();
        let cfg = QuantConfig {
            group_bits: vec![GroupSpec::rest(16)],
            ..QuantConfig::default()
        };
        let solve = solve_alpha_for_cr(&sigma, 32.0, &cfg, 0.6, 1.0, 1e-4).unwrap();
        // all-16-bit: CR accounting reduces to 2·Σ(1-p_k)/q = 1/32
        let plan = allocate_with_target(&sigma, (1.0 + solve.alpha) / 2.0, 0.6, 1.0, false);
        let stored: f64 = plan.p.iter().filter(|&&p| p < 1.0).map(|&p| 1.0 - p).sum::<f64>()
            / sigma.len() as f64;
        assert!((2.0 * stored - 1.0 / 32.0).abs() / (1.0 / 32.0) < 0.02, "2Σ(1-p)/q = {}", 2.0 * stored);
        assert!((solve.achieved_cr - 32.0).abs() / 32.0 <= CR_REL_TOL);
    }

    #[test]
    fn solve_alpha_monotone_and_unreachable() {
        let sigma: Vec<f64> = (1..=512).map(|k| (k as f64).powf(-1.2)).collect();
        let cfg = QuantConfig::default();
        let solve = solve_alpha_for_cr(&sigma, 64.0, &cfg, 0.6, 1.0, 1e-4).unwrap();
        for a in &solve.trajectory {
            for b in &solve.trajectory {
                if a.alpha < b.alpha {
                    assert!(
                        a.alpha_qt <= b.alpha_qt + 1e-12 && a.cr <= b.cr,
                        "monotonicity broke between α={} and α={}",
                        a.alpha,
                        b.alpha
                    );
                }
            }
        }
        // a target below the α=0 floor cannot be reached by adding sparsity
        assert!(matches!(
            solve_alpha_for_cr(&sigma, 2.0, &cfg, 0.6, 1.0, 1e-4),
            Err(Error::UnreachableCr { .. })
        ));
    }

    fn small_sparse(seed: u64, m: usize, n: usize, alpha: f64) -> SparseFactors {
        let mut rng = SplitMix64::new(seed);
        let d = Matrix::from_fn(m, n, |_, _| rng.next_gaussian() as f32);
        let f = svd(&d, None).unwrap();
        let cfg = SparsifyConfig::new(alpha, 0.6, 1.0, "qtest");
        let sigma_rounded: Vec<f64> =
            crate::sparsify::f16_sigma(&f.sigma).iter().map(|s| s.to_f64()).collect();
        let plan = allocate_with_target(
            &sigma_rounded,
            crate::sparsify::per_factor_target(alpha, m, n),
            cfg.beta,
            cfg.c,
            false,
        );
        sparsify(&f, &plan, &cfg.seed_salt)
    }

    #[test]
    fn empty_sparse_empty_quantized() {
        let sf = crate::sparsify::sparsify_tensor(&Matrix::zeros(6, 6), &SparsifyConfig::new(0.9, 0.6, 1.0, "z")).unwrap();
        let qf = quantize_artifact(&sf, &QuantConfig::default()).unwrap();
        assert!(qf.kept.is_empty());
        assert!(qf.u_cols.is_empty());
    }

    #[test]
    fn eight_bit_only_reconstruction_close() {
        let sf = small_sparse(11, 64, 64, 0.7);
        let cfg = QuantConfig { group_bits: vec![GroupSpec::rest(8)], ..QuantConfig::default() };
        let qf = quantize_artifact(&sf, &cfg).unwrap();
        let dq = dequantize_artifact(&qf, &sf);
        let a = crate::sparsify::reconstruct_sparse(&sf);
        let b = crate::sparsify::reconstruct_sparse(&dq);
        let rel = b.sub(&a).frob_norm() / a.frob_norm();
        // symmetric 8-bit RTN: RMS step ≈ amax/(127·√12) with amax ≈ 3σ on
        // 64-sample Gaussian columns → ≈0.7% relative error
        assert!(rel < 0.01, "8-bit quantization noise {rel}");
    }

    #[test]
    fn calibrated_v_path_runs_and_stays_close() {
        let sf = small_sparse(13, 32, 24, 0.6);
        let mut rng = SplitMix64::new(99);
        let x = Matrix::from_fn(24, 64, |_, _| rng.next_gaussian() as f32);
        let cfg = QuantConfig {
            group_bits: vec![GroupSpec::rest(8)],
            calibration: Calibration::Samples(x),
            ..QuantConfig::default()
        };
        let qf = quantize_artifact(&sf, &cfg).unwrap();
        let dq = dequantize_artifact(&qf, &sf);
        let a = crate::sparsify::reconstruct_sparse(&sf);
        let b = crate::sparsify::reconstruct_sparse(&dq);
        let rel = b.sub(&a).frob_norm() / a.frob_norm();
        assert!(rel < 0.02, "calibrated 8-bit noise {rel}");
        // masked positions still decode to zero through the artifact subset rule
        for slot in 0..qf.kept.len() {
            match &qf.v_cols[slot].codes {
                ColumnCodes::Packed { codes, .. } => {
                    assert_eq!(codes.len(), sf.cols_v[slot].indices.len());
                }
                _ => panic!(),
            }
        }
    }
}

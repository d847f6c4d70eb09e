//! Thin SVD with descending order and a sign convention that makes
//! factorizations reproducible: the largest-magnitude entry of each U column
//! is non-negative (first index wins ties). Backed by nalgebra in f64; the
//! tolerances, not the backend, are the contract.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::matrix::Matrix;

#[derive(Clone, Debug)]
pub struct SvdFactors {
    /// m×q, columns orthonormal
    pub u: Matrix,
    /// length q, non-increasing, non-negative
    pub sigma: Vec<f64>,
    /// n×q, columns orthonormal
    pub v: Matrix,
}

impl SvdFactors {
    pub fn q(&self) -> usize {
        self.sigma.len()
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.u.rows, self.v.rows)
    }
}

const SVD_MAX_ITER: usize = 10_000;

pub fn svd(delta: &Matrix, name: Option<&str>) -> Result<SvdFactors> {
    let (m, n) = delta.shape();
    let a = DMatrix::<f64>::from_fn(m, n, |i, j| delta.get(i, j) as f64);
    let decomp = a
        .try_svd(true, true, f64::EPSILON, SVD_MAX_ITER)
        .ok_or_else(|| Error::SvdNonConvergence { name: name.map(str::to_string) })?;
    let u = decomp.u.expect("u requested");
    let vt = decomp.v_t.expect("v_t requested");
    let q = decomp.singular_values.len();

    // descending order (stable; nalgebra already sorts, kept as our own guarantee)
    let mut order: Vec<usize> = (0..q).collect();
    order.sort_by(|&i, &j| {
        decomp.singular_values[j]
            .partial_cmp(&decomp.singular_values[i])
            .unwrap()
            .then(i.cmp(&j))
    });

    let mut um = Matrix::zeros(m, q);
    let mut vm = Matrix::zeros(n, q);
    let mut sigma = Vec::with_capacity(q);
    for (k, &src) in order.iter().enumerate() {
        sigma.push(decomp.singular_values[src]);
        // sign canonicalization: largest-|entry| of the U column non-negative
        let mut best = 0usize;
        let mut best_abs = 0.0f64;
        for i in 0..m {
            let a = u[(i, src)].abs();
            if a > best_abs {
                best_abs = a;
                best = i;
            }
        }
        let flip = if u[(best, src)] < 0.0 { -1.0 } else { 1.0 };
        for i in 0..m {
            um.set(i, k, (u[(i, src)] * flip) as f32);
        }
        for j in 0..n {
            vm.set(j, k, (vt[(src, j)] * flip) as f32);
        }
    }
    Ok(SvdFactors { u: um, sigma, v: vm })
}

/// Rank for the LowRank baseline at sparsity α: the σ, U, and V storage of r
/// components must fit the (1-α)·m·n entry budget. α = 0 asks for no
/// compression and passes the full rank through.
pub fn lowrank_rank(alpha: f64, m: usize, n: usize) -> Result<usize> {
    let q = m.min(n);
    if alpha == 0.0 {
        return Ok(q);
    }
    let r = ((1.0 - alpha) * (m as f64) * (n as f64) / ((m + n + 1) as f64)).floor() as usize;
    if r == 0 {
        return Err(Error::RankUnderflow { alpha, rows: m, cols: n });
    }
    Ok(r.min(q))
}

pub fn truncate_lowrank(f: &SvdFactors, alpha: f64) -> Result<SvdFactors> {
    let (m, n) = f.shape();
    let r = lowrank_rank(alpha, m, n)?;
    let mut u = Matrix::zeros(m, r);
    let mut v = Matrix::zeros(n, r);
    for k in 0..r {
        for i in 0..m {
            u.set(i, k, f.u.get(i, k));
        }
        for j in 0..n {
            v.set(j, k, f.v.get(j, k));
        }
    }
    Ok(SvdFactors { u, sigma: f.sigma[..r].to_vec(), v })
}

/// Dense U·diag(σ)·Vᵀ, accumulated in f64, emitted f32.
pub fn reconstruct(f: &SvdFactors) -> Matrix {
    let (m, n) = f.shape();
    let q = f.q();
    let mut acc = vec![0.0f64; m * n];
    for k in 0..q {
        let s = f.sigma[k];
        if s == 0.0 {
            continue;
        }
        for i in 0..m {
            let us = f.u.get(i, k) as f64 * s;
            if us == 0.0 {
                continue;
            }
            let row = &mut acc[i * n..(i + 1) * n];
            for j in 0..n {
                row[j] += us * f.v.get(j, k) as f64;
            }
        }
    }
    Matrix { rows: m, cols: n, data: acc.into_iter().map(|v| v as f32).collect() }
}

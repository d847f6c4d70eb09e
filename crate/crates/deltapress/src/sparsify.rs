//! Importance-aware sparsity allocation over singular-vector columns, the
//! Bernoulli masking with 1/(1-p) rescale, and the DARE weight-space
//! baseline. All masks regenerate from seeds derived from the stored 16-bit
//! σ values plus the tensor-name salt; nothing random is persisted.

use half::f16;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::matrix::Matrix;
use crate::rng::{dare_seed, keep_draw, mask_seed, Factor, SplitMix64};
use crate::svd::{svd, SvdFactors};

pub const BETA_PRESETS: [f64; 3] = [0.6, 0.7, 0.8];
pub const C_PRESETS: [f64; 2] = [0.5, 1.0];

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SparsifyConfig {
    /// overall target sparsity in [0, 1)
    pub alpha: f64,
    /// pre-prune ratio in [0, 1)
    pub beta: f64,
    /// regularization exponent > 0
    pub c: f64,
    /// mask-seed salt, conventionally the tensor name
    pub seed_salt: String,
}

impl SparsifyConfig {
    pub fn new(alpha: f64, beta: f64, c: f64, seed_salt: impl Into<String>) -> Self {
        SparsifyConfig { alpha, beta, c, seed_salt: seed_salt.into() }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SparsityPlan {
    /// per-column sparsity ratios, length q
    pub p: Vec<f64>,
    pub gamma: f64,
    /// pre-prune boundary ⌊q(1-β)⌋
    pub r: usize,
    /// per-factor target the plan was solved for
    pub alpha_factor: f64,
    /// true when the budget forced every column to p = 1 (nothing survives)
    pub all_pruned: bool,
}

impl SparsityPlan {
    pub fn empty(alpha_factor: f64) -> Self {
        SparsityPlan { p: Vec::new(), gamma: 0.0, r: 0, alpha_factor, all_pruned: false }
    }

    pub fn is_empty(&self) -> bool {
        self.p.is_empty()
    }

    /// Indices of columns that survive (p < 1), ascending.
    pub fn kept(&self) -> Vec<usize> {
        (0..self.p.len()).filter(|&k| self.p[k] < 1.0).collect()
    }

    pub fn expected_kept_entries(&self, m: usize, n: usize) -> f64 {
        self.p.iter().filter(|&&p| p < 1.0).map(|&p| (1.0 - p) * (m + n) as f64).sum()
    }
}

/// Per-factor sparsity target for an m×n matrix: solves
/// Σ(1-p_k)(m+n) = (1-α)mn at a uniform rate. Equals (1+α)/2 when m = n.
pub fn per_factor_target(alpha: f64, m: usize, n: usize) -> f64 {
    let q = m.min(n) as f64;
    1.0 - (1.0 - alpha) * (m as f64) * (n as f64) / (q * ((m + n) as f64))
}

/// Sparsity allocation over a descending spectrum against the square-matrix
/// per-factor target (1+α)/2.
pub fn allocate_sparsity(sigma: &[f64], cfg: &SparsifyConfig) -> SparsityPlan {
    allocate_with_target(sigma, (1.0 + cfg.alpha) / 2.0, cfg.beta, cfg.c, cfg.alpha == 0.0)
}

/// The allocation core. `zero_alpha` short-circuits to the all-zero identity
/// plan (no sparsification requested).
pub fn allocate_with_target(
    sigma: &[f64],
    alpha_factor: f64,
    beta: f64,
    c: f64,
    zero_alpha: bool,
) -> SparsityPlan {
    let q = sigma.len();
    if q == 0 || sigma[0] <= 0.0 {
        return SparsityPlan::empty(alpha_factor);
    }
    if zero_alpha {
        return SparsityPlan { p: vec![0.0; q], gamma: 0.0, r: q, alpha_factor, all_pruned: false };
    }

    let r = ((q as f64) * (1.0 - beta)).floor() as usize;
    let mut p = vec![1.0f64; q];
    let mut gamma = 0.0f64;
    if r >= 1 {
        let s1 = sigma[0];
        let t: Vec<f64> = sigma[..r].iter().map(|&s| 1.0 - (s / s1).powf(c)).collect();
        let t_sum: f64 = t.iter().sum();
        let need = (alpha_factor - beta) / (1.0 - beta) * (r as f64);
        let g1 = if t_sum > 0.0 { need / t_sum } else { f64::INFINITY };
        let t_r = t[r - 1];
        let g2 = if t_r > 0.0 { 1.0 / t_r } else { f64::INFINITY };
        gamma = g1.min(g2);
        for k in 0..r {
            p[k] = if t[k] == 0.0 { 0.0 } else { (t[k] * gamma).clamp(0.0, 1.0) };
        }
    }

    // boundary shift against the exact overall budget
    loop {
        let total: f64 = p.iter().sum();
        if total / (q as f64) >= alpha_factor {
            break;
        }
        match (0..q).rev().find(|&k| p[k] < 1.0) {
            Some(k) => p[k] = 1.0,
            None => break,
        }
    }

    let all_pruned = p.iter().all(|&v| v >= 1.0);
    SparsityPlan { p, gamma, r, alpha_factor, all_pruned }
}

/// One masked factor column: kept entry positions (ascending) and rescaled
/// values. Values are rounded through f16, the storage precision.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseColumn {
    pub indices: Vec<u32>,
    pub values: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SparseFactors {
    pub m: usize,
    pub n: usize,
    /// σ rounded to storage precision; the artifact persists the first r of
    /// these (all the allocation ever reads)
    pub sigma_stored: Vec<f16>,
    pub plan: SparsityPlan,
    /// surviving column indices, ascending
    pub kept: Vec<usize>,
    /// one per kept column
    pub cols_u: Vec<SparseColumn>,
    pub cols_v: Vec<SparseColumn>,
    pub salt: String,
}

impl SparseFactors {
    pub fn empty(m: usize, n: usize, plan: SparsityPlan, salt: &str) -> Self {
        SparseFactors {
            m,
            n,
            sigma_stored: Vec::new(),
            plan,
            kept: Vec::new(),
            cols_u: Vec::new(),
            cols_v: Vec::new(),
            salt: salt.to_string(),
        }
    }

    pub fn stored_entry_count(&self) -> usize {
        self.cols_u.iter().map(|c| c.values.len()).sum::<usize>()
            + self.cols_v.iter().map(|c| c.values.len()).sum::<usize>()
    }

    /// Stored size in 16-bit-equivalent parameter counts: kept entries plus
    /// one σ per kept column.
    pub fn stored_equiv_16bit(&self) -> f64 {
        (self.stored_entry_count() + self.kept.len()) as f64
    }
}

pub fn f16_sigma(sigma: &[f64]) -> Vec<f16> {
    sigma.iter().map(|&s| f16::from_f64(s.min(65504.0))).collect()
}

/// Regenerate one column's keep mask from its seed. Returns ascending indices.
pub fn regen_mask(sigma_stored: f16, salt: &str, which: Factor, len: usize, p: f64) -> Vec<u32> {
    let mut rng = SplitMix64::new(mask_seed(sigma_stored, salt, which));
    let mut out = Vec::new();
    for i in 0..len {
        let draw = rng.next_u64();
        if keep_draw(draw, p) {
            out.push(i as u32);
        }
    }
    out
}

/// Mask and rescale factor columns per the plan. Columns with p = 1 are
/// dropped entirely; survivors keep entry i iff the seeded draw lands below
/// (1-p)·2^64, scaled by 1/(1-p). `rescale = false` is the ablation of that
/// scale (biased estimator, kept for tests and ablation runs).
pub fn sparsify_with_options(
    f: &SvdFactors,
    plan: &SparsityPlan,
    salt: &str,
    rescale: bool,
) -> SparseFactors {
    let (m, n) = f.shape();
    if plan.is_empty() {
        return SparseFactors::empty(m, n, plan.clone(), salt);
    }
    let q = f.q();
    assert_eq!(plan.p.len(), q, "plan length must match q");
    let sigma16 = f16_sigma(&f.sigma);
    let sigma_stored = sigma16.clone();

    let mut kept = Vec::new();
    let mut cols_u = Vec::new();
    let mut cols_v = Vec::new();
    for k in 0..q {
        let p = plan.p[k];
        if p >= 1.0 {
            continue;
        }
        let scale = if rescale { 1.0 / (1.0 - p) } else { 1.0 };
        let build = |which: Factor, len: usize, get: &dyn Fn(usize) -> f32| -> SparseColumn {
            let indices = regen_mask(sigma16[k], salt, which, len, p);
            let values = indices
                .iter()
                .map(|&i| f16::from_f64(get(i as usize) as f64 * scale).to_f32())
                .collect();
            SparseColumn { indices, values }
        };
        cols_u.push(build(Factor::U, m, &|i| f.u.get(i, k)));
        cols_v.push(build(Factor::V, n, &|j| f.v.get(j, k)));
        kept.push(k);
    }
    SparseFactors { m, n, sigma_stored, plan: plan.clone(), kept, cols_u, cols_v, salt: salt.to_string() }
}

pub fn sparsify(f: &SvdFactors, plan: &SparsityPlan, salt: &str) -> SparseFactors {
    sparsify_with_options(f, plan, salt, true)
}

/// Dense ΔŴ = Σ_kept σ_k · û_k v̂_kᵀ from sparse columns, f64 accumulation.
pub fn reconstruct_sparse(sf: &SparseFactors) -> Matrix {
    let mut acc = vec![0.0f64; sf.m * sf.n];
    for (slot, &k) in sf.kept.iter().enumerate() {
        let s = sf.sigma_stored[k].to_f64();
        if s == 0.0 {
            continue;
        }
        let cu = &sf.cols_u[slot];
        let cv = &sf.cols_v[slot];
        for (ui, &uv) in cu.indices.iter().zip(&cu.values) {
            let us = uv as f64 * s;
            if us == 0.0 {
                continue;
            }
            let row = &mut acc[*ui as usize * sf.n..(*ui as usize + 1) * sf.n];
            for (vi, &vv) in cv.indices.iter().zip(&cv.values) {
                row[*vi as usize] += us * vv as f64;
            }
        }
    }
    Matrix { rows: sf.m, cols: sf.n, data: acc.into_iter().map(|v| v as f32).collect() }
}

/// svd → f16 σ → allocate (shape-aware target) → mask. The plan is computed
/// from the f16-rounded σ the artifact will store, so compress and decompress
/// derive identical masks.
pub fn sparsify_tensor(delta: &Matrix, cfg: &SparsifyConfig) -> Result<SparseFactors> {
    let (m, n) = delta.shape();
    let f = svd(delta, Some(&cfg.seed_salt))?;
    let sigma_rounded: Vec<f64> = f16_sigma(&f.sigma).iter().map(|s| s.to_f64()).collect();
    let target = per_factor_target(cfg.alpha, m, n);
    let plan = allocate_with_target(&sigma_rounded, target, cfg.beta, cfg.c, cfg.alpha == 0.0);
    Ok(sparsify(&f, &plan, &cfg.seed_salt))
}

/// DARE: drop delta entries uniformly at random with probability p, rescale
/// survivors by 1/(1-p). Kept values round through f16 like all stored data.
#[derive(Clone, Debug, PartialEq)]
pub struct DareSparse {
    pub m: usize,
    pub n: usize,
    pub p: f64,
    /// flat row-major positions of survivors, ascending
    pub indices: Vec<u32>,
    pub values: Vec<f32>,
    pub salt: String,
}

pub fn dare_mask(salt: &str, len: usize, p: f64) -> Vec<u32> {
    let mut rng = SplitMix64::new(dare_seed(salt));
    let mut out = Vec::new();
    for i in 0..len {
        let draw = rng.next_u64();
        if keep_draw(draw, p) {
            out.push(i as u32);
        }
    }
    out
}

pub fn dare_sparsify(delta: &Matrix, p: f64, salt: &str) -> DareSparse {
    assert!((0.0..1.0).contains(&p), "drop rate must be in [0, 1)");
    let scale = 1.0 / (1.0 - p);
    let indices = dare_mask(salt, delta.data.len(), p);
    let values = indices
        .iter()
        .map(|&i| f16::from_f64(delta.data[i as usize] as f64 * scale).to_f32())
        .collect();
    DareSparse { m: delta.rows, n: delta.cols, p, indices, values, salt: salt.to_string() }
}

pub fn reconstruct_dare(d: &DareSparse) -> Matrix {
    let mut out = Matrix::zeros(d.m, d.n);
    for (&i, &v) in d.indices.iter().zip(&d.values) {
        out.data[i as usize] = v;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    fn cfg(alpha: f64, beta: f64, c: f64) -> SparsifyConfig {
        SparsifyConfig::new(alpha, beta, c, "t")
    }

    #[test]
    fn worked_allocation_example() {
        let plan = allocate_sparsity(&[8.0, 4.0, 2.0, 1.0], &cfg(0.5, 0.5, 1.0));
        assert_eq!(plan.alpha_factor, 0.75);
        assert_eq!(plan.r, 2);
        assert_eq!(plan.gamma, 2.0);
        assert_eq!(plan.p, vec![0.0, 1.0, 1.0, 1.0]);
        assert!(!plan.all_pruned);
    }

    #[test]
    fn zero_alpha_identity() {
        let plan = allocate_sparsity(&[5.0, 3.0, 1.0], &cfg(0.0, 0.0, 1.0));
        assert_eq!(plan.gamma, 0.0);
        assert_eq!(plan.p, vec![0.0; 3]);
    }

    #[test]
    fn p1_zero_and_monotone() {
        let sigma: Vec<f64> = (1..=32).map(|k| (k as f64).powf(-1.2)).collect();
        for &beta in &BETA_PRESETS {
            for &c in &C_PRESETS {
                let plan = allocate_sparsity(&sigma, &cfg(0.8, beta, c));
                assert_eq!(plan.p[0], 0.0);
                for w in plan.p[..plan.r.max(1)].windows(2) {
                    assert!(w[0] <= w[1] + 1e-15, "p not monotone: {:?}", w);
                }
                for k in plan.r..sigma.len() {
                    assert_eq!(plan.p[k], 1.0);
                }
                let total: f64 = plan.p.iter().sum();
                assert!(total / sigma.len() as f64 >= plan.alpha_factor - 1e-12);
            }
        }
    }

    #[test]
    fn boundary_shift_can_prune_everything() {
        // γ cap binds hard: the loop walks left until even column 1 flips
        let plan = allocate_sparsity(&[8.0, 4.0, 2.0, 1.0], &cfg(0.99, 0.5, 1.0));
        assert!(plan.all_pruned);
        assert_eq!(plan.p, vec![1.0; 4]);
    }

    #[test]
    fn zero_sigma_empty_plan() {
        let plan = allocate_sparsity(&[0.0, 0.0], &cfg(0.5, 0.5, 1.0));
        assert!(plan.is_empty());
    }

    #[test]
    fn equal_sigmas_get_p_zero() {
        // all t_k = 0 within the window: γ is unbounded, p stays 0, flips fill from the right
        let plan = allocate_sparsity(&[2.0, 2.0, 2.0, 2.0, 2.0, 2.0, 2.0, 2.0], &cfg(0.5, 0.5, 1.0));
        assert_eq!(&plan.p[..2], &[0.0, 0.0]);
        assert_eq!(&plan.p[2..], &[1.0; 6]);
    }

    #[test]
    fn per_factor_target_square_matches_footnote() {
        for &alpha in &[0.0, 0.5, 0.9, 0.96875] {
            let t = per_factor_target(alpha, 64, 64);
            assert!((t - (1.0 + alpha) / 2.0).abs() < 1e-12);
        }
        // rectangular: budget identity Σ(1-p)(m+n) = (1-α)mn at the uniform rate
        let (m, n, alpha) = (96usize, 32usize, 0.9);
        let t = per_factor_target(alpha, m, n);
        let q = m.min(n) as f64;
        let lhs = (1.0 - t) * q * (m + n) as f64;
        assert!((lhs - (1.0 - alpha) * (m * n) as f64).abs() < 1e-6);
    }

    fn random_factors(m: usize, n: usize, seed: u64) -> SvdFactors {
        let mut r = SplitMix64::new(seed);
        let d = Matrix::from_fn(m, n, |_, _| r.next_gaussian() as f32);
        svd(&d, None).unwrap()
    }

    #[test]
    fn p_zero_column_kept_dense() {
        let f = random_factors(12, 8, 5);
        let q = f.q();
        let mut p = vec![1.0; q];
        p[0] = 0.0;
        let plan = SparsityPlan { p, gamma: 1.0, r: 1, alpha_factor: 0.9, all_pruned: false };
        let sf = sparsify(&f, &plan, "t");
        assert_eq!(sf.kept, vec![0]);
        assert_eq!(sf.cols_u[0].indices.len(), 12);
        assert_eq!(sf.cols_v[0].indices.len(), 8);
        for (i, &v) in sf.cols_u[0].values.iter().enumerate() {
            assert_eq!(v, f16::from_f64(f.u.get(i, 0) as f64).to_f32());
        }
    }

    #[test]
    fn p_one_column_dropped() {
        let f = random_factors(6, 6, 9);
        let plan = SparsityPlan { p: vec![1.0; 6], gamma: 1.0, r: 0, alpha_factor: 0.9, all_pruned: true };
        let sf = sparsify(&f, &plan, "t");
        assert!(sf.kept.is_empty());
        assert_eq!(reconstruct_sparse(&sf).data, vec![0.0; 36]);
    }

    #[test]
    fn sparsify_is_deterministic() {
        let f = random_factors(20, 14, 11);
        let sigma_rounded: Vec<f64> = f16_sigma(&f.sigma).iter().map(|s| s.to_f64()).collect();
        let plan = allocate_with_target(&sigma_rounded, 0.9, 0.6, 1.0, false);
        let a = sparsify(&f, &plan, "layer.w");
        let b = sparsify(&f, &plan, "layer.w");
        assert_eq!(a, b);
        let c = sparsify(&f, &plan, "other.w");
        assert_ne!(a, c);
    }

    #[test]
    fn realized_budget_within_binomial() {
        let (m, n) = (64, 48);
        let f = random_factors(m, n, 21);
        let sigma_rounded: Vec<f64> = f16_sigma(&f.sigma).iter().map(|s| s.to_f64()).collect();
        let plan = allocate_with_target(&sigma_rounded, per_factor_target(0.9, m, n), 0.6, 1.0, false);
        let sf = sparsify(&f, &plan, "w");
        let expect = plan.expected_kept_entries(m, n);
        let var: f64 = plan
            .p
            .iter()
            .filter(|&&p| p < 1.0)
            .map(|&p| (m + n) as f64 * p * (1.0 - p))
            .sum();
        let got = sf.stored_entry_count() as f64;
        assert!(
            (got - expect).abs() <= 4.0 * var.sqrt() + 1.0,
            "kept {got} expected {expect} (4σ = {})",
            4.0 * var.sqrt()
        );
    }

    #[test]
    fn storage_counting_at_cr32() {
        // synthetic orthonormal factors at 1024², identity U/V, power-law σ
        let q = 1024usize;
        let mut u = Matrix::zeros(q, q);
        for i in 0..q {
            u.set(i, i, 1.0);
        }
        let sigma: Vec<f64> = (1..=q).map(|k| (k as f64).powf(-1.0)).collect();
        let f = SvdFactors { u: u.clone(), sigma, v: u };
        let alpha = 0.96875;
        let sigma_rounded: Vec<f64> = f16_sigma(&f.sigma).iter().map(|s| s.to_f64()).collect();
        let plan = allocate_with_target(&sigma_rounded, per_factor_target(alpha, q, q), 0.6, 1.0, false);
        let sf = sparsify(&f, &plan, "big");
        let budget = (1.0 - alpha) * (q * q) as f64;
        assert!(
            (sf.stored_entry_count() as f64) <= budget + q as f64,
            "stored {} budget {budget}",
            sf.stored_entry_count()
        );
    }

    #[test]
    fn zero_delta_empty_artifact() {
        let sf = sparsify_tensor(&Matrix::zeros(8, 8), &cfg(0.9, 0.6, 1.0)).unwrap();
        assert!(sf.kept.is_empty());
        assert!(sf.plan.is_empty());
    }

    #[test]
    fn rank1_keeps_top_direction_dense_and_beats_dare() {
        let mut wins = 0;
        let trials = 50;
        for t in 0..trials {
            let mut r = SplitMix64::new(1000 + t);
            let u: Vec<f64> = (0..32).map(|_| r.next_gaussian()).collect();
            let v: Vec<f64> = (0..32).map(|_| r.next_gaussian()).collect();
            let d = Matrix::from_fn(32, 32, |i, j| (u[i] * v[j]) as f32);
            let c = SparsifyConfig::new(0.9, 0.6, 1.0, format!("t{t}"));
            let sf = sparsify_tensor(&d, &c).unwrap();
            assert_eq!(sf.plan.p[0], 0.0);
            assert_eq!(sf.cols_u[0].indices.len(), 32, "top direction stays dense");
            let ie = reconstruct_sparse(&sf).rel_frob_err(&d);
            let da = dare_sparsify(&d, 0.9, &format!("t{t}"));
            let de = reconstruct_dare(&da).rel_frob_err(&d);
            if ie <= de {
                wins += 1;
            }
        }
        assert!(wins >= 40, "impart beat dare only {wins}/{trials}");
    }

    #[test]
    fn dare_identity_and_counts() {
        let mut r = SplitMix64::new(3);
        let d = Matrix::from_fn(20, 20, |_, _| r.next_gaussian() as f32);
        let id = dare_sparsify(&d, 0.0, "w");
        assert_eq!(id.indices.len(), 400);
        let rec = reconstruct_dare(&id);
        for (a, b) in rec.data.iter().zip(&d.data) {
            assert_eq!(*a, f16::from_f64(*b as f64).to_f32());
        }
        let p = 0.7;
        let sp = dare_sparsify(&d, p, "w");
        let expect = 400.0 * (1.0 - p);
        let sd = (400.0 * p * (1.0 - p)).sqrt();
        let got = sp.indices.len() as f64;
        assert!((got - expect).abs() <= 4.0 * sd + 1.0, "kept {got} expected {expect}");
        assert_eq!(dare_sparsify(&d, p, "w"), sp);
    }
}

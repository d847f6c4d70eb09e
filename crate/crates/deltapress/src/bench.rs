//! Synthetic benchmark harness: seeded low-rank-plus-noise deltas with a
//! controllable spectral decay, swept over sizes × decays × target ratios ×
//! methods, reporting achieved ratio and relative reconstruction error as
//! CSV or JSON. Every cell derives its own seed from the run seed and the
//! cell label, so rows are independent of sweep order and fully reproducible.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::quant::{solve_alpha_for_cr, ColumnCodes, QuantConfig, QuantizedFactors};
use crate::rng::{fnv1a64, mix, SplitMix64};
use crate::sparsify::{
    dare_sparsify, reconstruct_dare, reconstruct_sparse, sparsify_tensor, SparsifyConfig,
};
use crate::svd::{reconstruct, svd, truncate_lowrank};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum BenchMethod {
    Impart,
    ImpartQt,
    Dare,
    Lowrank,
}

impl BenchMethod {
    pub fn label(self) -> &'static str {
        match self {
            BenchMethod::Impart => "impart",
            BenchMethod::ImpartQt => "impart-qt",
            BenchMethod::Dare => "dare",
            BenchMethod::Lowrank => "lowrank",
        }
    }

    pub const ALL: [BenchMethod; 4] =
        [BenchMethod::Impart, BenchMethod::ImpartQt, BenchMethod::Dare, BenchMethod::Lowrank];
}

#[derive(Clone, Debug)]
pub struct BenchConfig {
    pub sizes: Vec<(usize, usize)>,
    /// spectral decays a: σ_k = (k+1)^(-a)
    pub decays: Vec<f64>,
    pub crs: Vec<f64>,
    pub methods: Vec<BenchMethod>,
    pub trials: usize,
    /// Frobenius-relative dense noise mixed into the synthetic delta
    pub noise: f64,
    pub seed: u64,
    pub beta: f64,
    pub c: f64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            sizes: vec![(96, 96), (128, 64)],
            decays: vec![0.5, 1.5],
            crs: vec![4.0, 8.0, 16.0, 32.0],
            methods: BenchMethod::ALL.to_vec(),
            trials: 2,
            noise: 0.01,
            seed: 7,
            beta: 0.6,
            c: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchRow {
    pub m: usize,
    pub n: usize,
    pub decay: f64,
    pub trial: usize,
    pub method: &'static str,
    pub cr_target: f64,
    /// achieved ratio in 16-bit-equivalent parameter counts
    pub cr_achieved: Option<f64>,
    pub rel_err: Option<f64>,
    pub equiv16: Option<f64>,
    pub millis: f64,
    pub status: String,
}

/// Rank-q synthetic delta: QR-orthonormalized Gaussian factors around a
/// power-law spectrum, plus a Frobenius-relative Gaussian noise floor.
pub fn synthetic_delta(m: usize, n: usize, decay: f64, noise: f64, seed: u64) -> Matrix {
    let q = m.min(n);
    let mut rng = SplitMix64::new(seed);
    let a = nalgebra::DMatrix::<f64>::from_fn(m, q, |_, _| rng.next_gaussian());
    let b = nalgebra::DMatrix::<f64>::from_fn(n, q, |_, _| rng.next_gaussian());
    let qu = a.qr().q();
    let qv = b.qr().q();
    let mut w = vec![0.0f64; m * n];
    for k in 0..q {
        let s = ((k + 1) as f64).powf(-decay);
        for i in 0..m {
            let us = qu[(i, k)] * s;
            if us == 0.0 {
                continue;
            }
            let row = &mut w[i * n..(i + 1) * n];
            for (j, slot) in row.iter_mut().enumerate() {
                *slot += us * qv[(j, k)];
            }
        }
    }
    if noise > 0.0 {
        let g: Vec<f64> = (0..m * n).map(|_| rng.next_gaussian()).collect();
        let wn = w.iter().map(|v| v * v).sum::<f64>().sqrt();
        let gn = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        if gn > 0.0 {
            let scale = noise * wn / gn;
            for (slot, gv) in w.iter_mut().zip(&g) {
                *slot += scale * gv;
            }
        }
    }
    Matrix { rows: m, cols: n, data: w.into_iter().map(|v| v as f32).collect() }
}

/// Stored 16-bit-equivalent parameter count of a quantized artifact: one σ
/// per kept column, bits-weighted code counts, one scale word per packed run.
pub fn quantized_equiv16(qf: &QuantizedFactors) -> f64 {
    let mut total = qf.kept.len() as f64;
    for qc in qf.u_cols.iter().chain(&qf.v_cols) {
        total += match &qc.codes {
            ColumnCodes::Raw16(vals) => vals.len() as f64,
            ColumnCodes::Packed { bits, codes, .. } => {
                codes.len() as f64 * (*bits as f64) / 16.0 + 1.0
            }
        };
    }
    total
}

fn run_method(
    delta: &Matrix,
    method: BenchMethod,
    cr: f64,
    salt: &str,
    cfg: &BenchConfig,
) -> Result<(f64, Matrix)> {
    let (m, n) = delta.shape();
    let alpha = 1.0 - 1.0 / cr;
    match method {
        BenchMethod::Impart => {
            let sf = sparsify_tensor(delta, &SparsifyConfig::new(alpha, cfg.beta, cfg.c, salt))?;
            Ok((sf.stored_equiv_16bit(), reconstruct_sparse(&sf)))
        }
        BenchMethod::ImpartQt => {
            let f = svd(delta, Some(salt))?;
            let sigma16: Vec<f64> =
                crate::sparsify::f16_sigma(&f.sigma).iter().map(|s| s.to_f64()).collect();
            let qcfg = QuantConfig::default();
            let solved = solve_alpha_for_cr(&sigma16, cr, &qcfg, cfg.beta, cfg.c, 1e-4)?;
            let sf =
                sparsify_tensor(delta, &SparsifyConfig::new(solved.alpha, cfg.beta, cfg.c, salt))?;
            let qf = crate::quant::quantize_artifact(&sf, &qcfg)?;
            let dq = crate::quant::dequantize_artifact(&qf, &sf);
            Ok((quantized_equiv16(&qf), reconstruct_sparse(&dq)))
        }
        BenchMethod::Dare => {
            let p = 1.0 - 1.0 / cr;
            let d = dare_sparsify(delta, p, salt);
            Ok((d.values.len() as f64, reconstruct_dare(&d)))
        }
        BenchMethod::Lowrank => {
            let f = svd(delta, Some(salt))?;
            let tf = truncate_lowrank(&f, alpha)?;
            let r = tf.sigma.len();
            Ok(((r * (m + n + 1)) as f64, reconstruct(&tf)))
        }
    }
}

pub fn cell_seed(seed: u64, label: &str) -> u64 {
    mix(seed ^ fnv1a64(label.as_bytes()))
}

pub fn run_bench(cfg: &BenchConfig) -> Result<Vec<BenchRow>> {
    if cfg.sizes.is_empty() || cfg.decays.is_empty() || cfg.crs.is_empty() || cfg.methods.is_empty()
    {
        return Err(Error::Config("bench sweep axes must all be non-empty".into()));
    }
    if cfg.trials == 0 {
        return Err(Error::Config("bench needs at least one trial".into()));
    }
    if let Some(&bad) = cfg.crs.iter().find(|&&c| c < 1.0) {
        return Err(Error::Config(format!("target compression ratio {bad} below 1")));
    }
    let mut rows = Vec::new();
    for &(m, n) in &cfg.sizes {
        for &decay in &cfg.decays {
            for trial in 0..cfg.trials {
                let label = format!("{m}x{n}/a{decay}/t{trial}");
                let delta = synthetic_delta(m, n, decay, cfg.noise, cell_seed(cfg.seed, &label));
                let dn = delta.frob_norm();
                for &cr in &cfg.crs {
                    for &method in &cfg.methods {
                        let salt = format!("{label}/{}/cr{cr}", method.label());
                        let start = std::time::Instant::now();
                        let outcome = run_method(&delta, method, cr, &salt, cfg);
                        let millis = start.elapsed().as_secs_f64() * 1e3;
                        let row = match outcome {
                            Ok((equiv, rec)) => {
                                let err = rec.sub(&delta).frob_norm() / dn.max(f64::MIN_POSITIVE);
                                BenchRow {
                                    m,
                                    n,
                                    decay,
                                    trial,
                                    method: method.label(),
                                    cr_target: cr,
                                    cr_achieved: Some(if equiv > 0.0 {
                                        (m * n) as f64 / equiv
                                    } else {
                                        f64::INFINITY
                                    }),
                                    rel_err: Some(err),
                                    equiv16: Some(equiv),
                                    millis,
                                    status: "ok".into(),
                                }
                            }
                            Err(e) => BenchRow {
                                m,
                                n,
                                decay,
                                trial,
                                method: method.label(),
                                cr_target: cr,
                                cr_achieved: None,
                                rel_err: None,
                                equiv16: None,
                                millis,
                                status: e.to_string(),
                            },
                        };
                        rows.push(row);
                    }
                }
            }
        }
    }
    Ok(rows)
}

fn csv_field_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn csv_quote(s: &str) -> String {
    format!("\"{}\"", s.replace('"', "\"\""))
}

pub fn rows_to_csv(rows: &[BenchRow]) -> String {
    let mut out =
        String::from("m,n,decay,trial,method,cr_target,cr_achieved,rel_err,equiv16,millis,status\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{}\n",
            r.m,
            r.n,
            r.decay,
            r.trial,
            r.method,
            r.cr_target,
            csv_field_opt(r.cr_achieved),
            csv_field_opt(r.rel_err),
            csv_field_opt(r.equiv16),
            r.millis,
            csv_quote(&r.status),
        ));
    }
    out
}

pub fn rows_to_json(rows: &[BenchRow]) -> String {
    serde_json::to_string_pretty(rows).expect("bench rows serialize")
}

//! Multi-task delta merging: task-arithmetic summation, trim/elect-sign/
//! disjoint-mean merging, optional seeded pre-sparsification of each task
//! vector, and a two-stage hyperparameter grid search.

use std::collections::BTreeSet;

use serde::Serialize;

use crate::artifact::{decode_delta, parse_artifact, DecodedDelta};
use crate::container::{Tensor, TensorContainer};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::sparsify::dare_mask;

pub const LAMBDA_GRID: [f64; 5] = [0.4, 0.6, 0.8, 1.0, 1.2];
pub const RETAIN_GRID: [f64; 3] = [0.4, 0.6, 0.8];
pub const PRESPARSIFY_GRID: [f64; 5] = [0.1, 0.3, 0.5, 0.7, 0.9];

// ------------------------------------------------------------- flat cores --

/// λ · Σ_t Δ_t, f64 accumulation.
pub fn ta_combine(deltas: &[&[f32]], lambda: f64) -> Vec<f32> {
    let len = deltas.first().map_or(0, |d| d.len());
    let mut acc = vec![0.0f64; len];
    for d in deltas {
        assert_eq!(d.len(), len, "task deltas must share a shape");
        for (a, &v) in acc.iter_mut().zip(*d) {
            *a += v as f64;
        }
    }
    acc.into_iter().map(|v| (v * lambda) as f32).collect()
}

/// Zero all but the ⌈retain·len⌉ largest-magnitude entries (ties broken by
/// lower index first).
pub fn ties_trim(delta: &[f32], retain: f64) -> Vec<f32> {
    let len = delta.len();
    let k = ((retain * len as f64).ceil().max(0.0) as usize).min(len);
    if k == len {
        return delta.to_vec();
    }
    let mut idx: Vec<usize> = (0..len).collect();
    idx.sort_unstable_by(|&a, &b| {
        delta[b].abs().total_cmp(&delta[a].abs()).then_with(|| a.cmp(&b))
    });
    let mut out = vec![0.0f32; len];
    for &i in &idx[..k] {
        out[i] = delta[i];
    }
    out
}

fn sgn(v: f64) -> i8 {
    if v > 0.0 {
        1
    } else if v < 0.0 {
        -1
    } else {
        0
    }
}

/// Trim each task, elect the per-coordinate sign by summed trimmed mass, and
/// average the agreeing nonzero entries (zeros join neither side). Returns
/// λ · merged delta.
pub fn ties_combine(deltas: &[&[f32]], lambda: f64, retain: f64) -> Vec<f32> {
    let len = deltas.first().map_or(0, |d| d.len());
    let trimmed: Vec<Vec<f32>> = deltas
        .iter()
        .map(|d| {
            assert_eq!(d.len(), len, "task deltas must share a shape");
            ties_trim(d, retain)
        })
        .collect();
    let mut out = vec![0.0f32; len];
    for j in 0..len {
        let total: f64 = trimmed.iter().map(|t| t[j] as f64).sum();
        let elected = sgn(total);
        if elected == 0 {
            continue;
        }
        let mut acc = 0.0f64;
        let mut count = 0usize;
        for t in &trimmed {
            let v = t[j] as f64;
            if v != 0.0 && sgn(v) == elected {
                acc += v;
                count += 1;
            }
        }
        if count > 0 {
            out[j] = (lambda * acc / count as f64) as f32;
        }
    }
    out
}

/// Seeded uniform drop with 1/(1-p) rescale, in place, full precision (the
/// merge-time counterpart of the storage-level DARE codec).
pub fn presparsify_flat(delta: &mut [f32], p: f64, salt: &str) {
    if p <= 0.0 {
        return;
    }
    let kept: BTreeSet<u32> = dare_mask(salt, delta.len(), p).into_iter().collect();
    let scale = 1.0 / (1.0 - p);
    for (i, v) in delta.iter_mut().enumerate() {
        if kept.contains(&(i as u32)) {
            *v = (*v as f64 * scale) as f32;
        } else {
            *v = 0.0;
        }
    }
}

// ----------------------------------------------------------- matrix layer --

/// W = base + λ Σ_t Δ_t.
pub fn merge_ta(base: &Matrix, deltas: &[Matrix], lambda: f64) -> Matrix {
    let flats: Vec<&[f32]> = deltas.iter().map(|d| d.data.as_slice()).collect();
    let merged = ta_combine(&flats, lambda);
    add_flat(base, &merged)
}

/// W = base + λ · ties(Δ_1..Δ_T; retain).
pub fn merge_ties(base: &Matrix, deltas: &[Matrix], lambda: f64, retain: f64) -> Matrix {
    let flats: Vec<&[f32]> = deltas.iter().map(|d| d.data.as_slice()).collect();
    let merged = ties_combine(&flats, lambda, retain);
    add_flat(base, &merged)
}

fn add_flat(base: &Matrix, delta: &[f32]) -> Matrix {
    assert_eq!(base.data.len(), delta.len());
    Matrix {
        rows: base.rows,
        cols: base.cols,
        data: base
            .data
            .iter()
            .zip(delta)
            .map(|(&b, &d)| ((b as f64) + (d as f64)) as f32)
            .collect(),
    }
}

// ------------------------------------------------------------ grid search --

#[derive(Clone, Debug)]
pub struct GridConfig {
    pub lambdas: Vec<f64>,
    pub retains: Vec<f64>,
    pub presparsify: Vec<f64>,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            lambdas: LAMBDA_GRID.to_vec(),
            retains: RETAIN_GRID.to_vec(),
            presparsify: PRESPARSIFY_GRID.to_vec(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct GridTrial {
    pub lambda: f64,
    pub retain: f64,
    /// None: tasks merged as decoded; Some(p): seeded drop applied first
    pub presparsify: Option<f64>,
    pub score: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GridOutcome {
    pub best: GridTrial,
    pub trials: Vec<GridTrial>,
}

/// Two-stage search: stage one scans λ × retain on the decoded task deltas;
/// stage two fixes the winner and scans pre-sparsification ratios, keeping
/// the stage-one result unless a ratio strictly improves the score. Ties keep
/// the earliest grid cell, so the outcome is deterministic.
pub fn grid_search(
    base: &Matrix,
    deltas: &[Matrix],
    grid: &GridConfig,
    salt: &str,
    eval: impl Fn(&Matrix) -> f64,
) -> GridOutcome {
    assert!(!grid.lambdas.is_empty() && !grid.retains.is_empty(), "grid must be non-empty");
    let mut trials = Vec::new();
    let mut best: Option<GridTrial> = None;
    for &lambda in &grid.lambdas {
        for &retain in &grid.retains {
            let merged = merge_ties(base, deltas, lambda, retain);
            let score = eval(&merged);
            let trial = GridTrial { lambda, retain, presparsify: None, score };
            trials.push(trial);
            if best.map_or(true, |b| score < b.score) {
                best = Some(trial);
            }
        }
    }
    let mut best = best.expect("non-empty grid");

    for &ratio in &grid.presparsify {
        let dropped: Vec<Matrix> = deltas
            .iter()
            .enumerate()
            .map(|(t, d)| {
                let mut flat = d.data.clone();
                presparsify_flat(&mut flat, ratio, &format!("{salt}/task{t}"));
                Matrix { rows: d.rows, cols: d.cols, data: flat }
            })
            .collect();
        let merged = merge_ties(base, &dropped, best.lambda, best.retain);
        let score = eval(&merged);
        let trial =
            GridTrial { lambda: best.lambda, retain: best.retain, presparsify: Some(ratio), score };
        trials.push(trial);
        if score < best.score {
            best = trial;
        }
    }
    GridOutcome { best, trials }
}

// ------------------------------------------------------- checkpoint layer --

#[derive(Clone, Debug)]
pub enum MergeMethod {
    Ta,
    Ties { retain: f64 },
}

#[derive(Clone, Debug)]
pub struct MergeOptions {
    pub method: MergeMethod,
    pub lambda: f64,
    /// seeded per-task drop ratio applied before combining
    pub presparsify: Option<f64>,
    /// skip the artifact-vs-base digest checks
    pub force: bool,
}

/// Merge task artifacts onto a base checkpoint. Each artifact must be built
/// against this base (digest-checked unless forced). Tensors absent from an
/// artifact contribute a zero delta for that task.
pub fn merge_artifacts(
    base: &TensorContainer,
    artifacts: &[Vec<u8>],
    opt: &MergeOptions,
) -> Result<TensorContainer> {
    if artifacts.is_empty() {
        return Err(Error::Config("merge needs at least one artifact".into()));
    }
    let base_digest = base.digest();
    let mut parsed = Vec::with_capacity(artifacts.len());
    for bytes in artifacts {
        let (manifest, payload) = parse_artifact(bytes)?;
        if manifest.base_digest != base_digest && !opt.force {
            return Err(Error::DigestMismatch {
                expected: manifest.base_digest.clone(),
                actual: base_digest.clone(),
            });
        }
        parsed.push((manifest, payload));
    }

    let mut names: BTreeSet<&String> = BTreeSet::new();
    for (manifest, _) in &parsed {
        names.extend(manifest.tensors.keys());
    }

    let mut out = TensorContainer::new();
    for name in names {
        let base_t = base
            .get(name)
            .ok_or_else(|| Error::tensor(name.as_str(), "missing from base checkpoint"))?;
        let len = base_t.elem_count();
        let mut task_deltas: Vec<Vec<f32>> = Vec::with_capacity(parsed.len());
        let mut dtype = base_t.dtype;
        for (t, (manifest, payload)) in parsed.iter().enumerate() {
            let mut flat = match manifest.tensors.get(name) {
                None => vec![0.0f32; len],
                Some(rec) => {
                    if rec.shape != base_t.shape {
                        return Err(Error::tensor(
                            name.as_str(),
                            format!(
                                "shape mismatch: base {:?} vs artifact {:?}",
                                base_t.shape, rec.shape
                            ),
                        ));
                    }
                    dtype = crate::container::Dtype::from_name(&rec.dtype).unwrap_or(dtype);
                    match decode_delta(name, rec, payload)? {
                        DecodedDelta::Dense(m) => m.data,
                        DecodedDelta::Raw(t) => t.to_f32_vec(name)?,
                    }
                }
            };
            if let Some(p) = opt.presparsify {
                presparsify_flat(&mut flat, p, &format!("{name}/task{t}"));
            }
            task_deltas.push(flat);
        }
        let refs: Vec<&[f32]> = task_deltas.iter().map(|d| d.as_slice()).collect();
        let merged = match opt.method {
            MergeMethod::Ta => ta_combine(&refs, opt.lambda),
            MergeMethod::Ties { retain } => ties_combine(&refs, opt.lambda, retain),
        };
        let base_f = base_t.to_f32_vec(name)?;
        let w: Vec<f32> =
            base_f.iter().zip(&merged).map(|(&b, &d)| ((b as f64) + (d as f64)) as f32).collect();
        out.insert(name.clone(), Tensor::from_f32_slice(base_t.shape.clone(), &w, dtype));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::artifact::{compress_to_artifact, CompressConfig, MethodChoice};
    use crate::container::Dtype;
    use crate::rng::SplitMix64;

    #[test]
    fn trim_keeps_largest_with_index_tiebreak() {
        assert_eq!(ties_trim(&[3.0, -1.0, 2.0, -5.0], 0.5), vec![3.0, 0.0, 0.0, -5.0]);
        // equal magnitudes: lower index wins
        assert_eq!(ties_trim(&[1.0, -1.0, 1.0, 1.0], 0.5), vec![1.0, -1.0, 0.0, 0.0]);
        assert_eq!(ties_trim(&[1.0, 2.0], 1.0), vec![1.0, 2.0]);
        assert_eq!(ties_trim(&[1.0, 2.0], 0.0), vec![0.0, 0.0]);
        // ceil: retain 0.3 of 4 keeps ⌈1.2⌉ = 2
        assert_eq!(ties_trim(&[4.0, 3.0, 2.0, 1.0], 0.3).iter().filter(|&&v| v != 0.0).count(), 2);
    }

    #[test]
    fn sign_election_and_disjoint_mean() {
        // opposing equal mass cancels: elected sign 0, coordinate stays zero
        let merged = ties_combine(&[&[2.0, 2.0][..], &[-2.0, 1.0][..]], 1.0, 1.0);
        assert_eq!(merged[0], 0.0);
        // agreeing entries average; the disagreeing task is excluded
        assert!((merged[1] - 1.5).abs() < 1e-6);

        // zeros join neither side: mean over the single nonzero contributor
        let merged = ties_combine(&[&[0.0, 5.0][..], &[3.0, 0.0][..]], 1.0, 1.0);
        assert!((merged[0] - 3.0).abs() < 1e-6);
        assert!((merged[1] - 5.0).abs() < 1e-6);

        // λ scales the merged delta
        let merged = ties_combine(&[&[2.0][..], &[4.0][..]], 0.5, 1.0);
        assert!((merged[0] - 1.5).abs() < 1e-6);
    }

    #[test]
    fn ta_is_scaled_sum() {
        let base = Matrix::from_vec(1, 2, vec![1.0, 1.0]);
        let d1 = Matrix::from_vec(1, 2, vec![1.0, 0.0]);
        let d2 = Matrix::from_vec(1, 2, vec![0.0, 2.0]);
        let w = merge_ta(&base, &[d1, d2], 0.5);
        assert_eq!(w.data, vec![1.5, 2.0]);
    }

    #[test]
    fn presparsify_drops_and_rescales() {
        let mut v = vec![1.0f32; 1000];
        presparsify_flat(&mut v, 0.3, "s");
        let kept = v.iter().filter(|&&x| x != 0.0).count();
        assert!((kept as f64 / 1000.0 - 0.7).abs() < 0.05, "kept fraction {kept}");
        for &x in &v {
            assert!(x == 0.0 || (x - 1.0 / 0.7).abs() < 1e-6);
        }
        // deterministic
        let mut w = vec![1.0f32; 1000];
        presparsify_flat(&mut w, 0.3, "s");
        assert_eq!(v, w);
        // p = 0 is the identity
        let mut u = vec![1.0f32, 2.0];
        presparsify_flat(&mut u, 0.0, "s");
        assert_eq!(u, vec![1.0, 2.0]);
    }

    #[test]
    fn grid_search_matches_brute_force() {
        let mut rng = SplitMix64::new(3);
        let base = Matrix::from_fn(6, 6, |_, _| rng.next_gaussian() as f32);
        let d1 = Matrix::from_fn(6, 6, |_, _| rng.next_gaussian() as f32 * 0.5);
        let d2 = Matrix::from_fn(6, 6, |_, _| rng.next_gaussian() as f32 * 0.5);
        // target: base + 0.9·(Δ1 + Δ2)
        let target = {
            let s = ta_combine(&[d1.data.as_slice(), d2.data.as_slice()], 0.9);
            add_flat(&base, &s)
        };
        let eval = |w: &Matrix| w.sub(&target).frob_norm();
        let grid = GridConfig::default();
        let got = grid_search(&base, &[d1.clone(), d2.clone()], &grid, "g", eval);

        // independent brute force in the same order
        let mut best: Option<GridTrial> = None;
        for &l in &grid.lambdas {
            for &r in &grid.retains {
                let score = eval(&merge_ties(&base, &[d1.clone(), d2.clone()], l, r));
                if best.map_or(true, |b| score < b.score) {
                    best = Some(GridTrial { lambda: l, retain: r, presparsify: None, score });
                }
            }
        }
        let mut best = best.unwrap();
        for &ratio in &grid.presparsify {
            let ds: Vec<Matrix> = [&d1, &d2]
                .iter()
                .enumerate()
                .map(|(t, d)| {
                    let mut flat = d.data.clone();
                    presparsify_flat(&mut flat, ratio, &format!("g/task{t}"));
                    Matrix { rows: d.rows, cols: d.cols, data: flat }
                })
                .collect();
            let score = eval(&merge_ties(&base, &ds, best.lambda, best.retain));
            if score < best.score {
                best = GridTrial {
                    lambda: best.lambda,
                    retain: best.retain,
                    presparsify: Some(ratio),
                    score,
                };
            }
        }
        assert_eq!(got.best, best);
        assert_eq!(got.trials.len(), grid.lambdas.len() * grid.retains.len() + grid.presparsify.len());
    }

    fn toy_base() -> TensorContainer {
        let mut rng = SplitMix64::new(21);
        let mut base = TensorContainer::new();
        base.insert(
            "w",
            Tensor::from_matrix(&Matrix::from_fn(8, 6, |_, _| rng.next_gaussian() as f32), Dtype::F32),
        );
        base
    }

    #[test]
    fn artifact_merge_ta_exact_with_raw_deltas() {
        let base = toy_base();
        let mut rng = SplitMix64::new(22);
        let mut make_ft = |scale: f32| {
            let mut ft = TensorContainer::new();
            let bw = base.get("w").unwrap().to_matrix("w").unwrap();
            let d = Matrix::from_fn(8, 6, |_, _| rng.next_gaussian() as f32 * scale);
            ft.insert("w", Tensor::from_matrix(&bw.add(&d), Dtype::F32));
            (ft, d)
        };
        let (ft1, d1) = make_ft(0.1);
        let (ft2, d2) = make_ft(0.2);
        let cfg = CompressConfig::new(MethodChoice::Raw, 0.0);
        let a1 = compress_to_artifact(&base, &ft1, &cfg).unwrap();
        let a2 = compress_to_artifact(&base, &ft2, &cfg).unwrap();
        let merged = merge_artifacts(
            &base,
            &[a1, a2],
            &MergeOptions { method: MergeMethod::Ta, lambda: 1.0, presparsify: None, force: false },
        )
        .unwrap();
        let got = merged.get("w").unwrap().to_matrix("w").unwrap();
        let want = base.get("w").unwrap().to_matrix("w").unwrap().add(&d1).add(&d2);
        assert!(got.max_abs_diff(&want) < 1e-5, "raw deltas merge exactly: {}", got.max_abs_diff(&want));
    }

    #[test]
    fn artifact_merge_rejects_foreign_base() {
        let base = toy_base();
        let mut ft = TensorContainer::new();
        let bw = base.get("w").unwrap().to_matrix("w").unwrap();
        ft.insert("w", Tensor::from_matrix(&bw, Dtype::F32));
        let a = compress_to_artifact(&base, &ft, &CompressConfig::new(MethodChoice::Raw, 0.0)).unwrap();
        let mut other = toy_base();
        other.insert("extra", Tensor::from_f32_slice(vec![1], &[0.5], Dtype::F32));
        let opt =
            MergeOptions { method: MergeMethod::Ta, lambda: 1.0, presparsify: None, force: false };
        assert!(matches!(merge_artifacts(&other, &[a.clone()], &opt), Err(Error::DigestMismatch { .. })));
        let forced = MergeOptions { force: true, ..opt };
        merge_artifacts(&other, &[a], &forced).unwrap();
    }
}

//! Delta-weight compression toolkit.
//!
//! Compresses the difference between a fine-tuned and a base checkpoint by
//! decomposing each 2-D delta with a thin SVD, allocating per-singular-vector
//! sparsity by importance, masking entries with seeded Bernoulli draws
//! rescaled by 1/(1-p), and optionally quantizing the surviving factor
//! entries at mixed precision. Artifacts are deterministic: masks regenerate
//! from stored 16-bit singular values and the tensor name, so no mask bitmap
//! is ever written. DARE and LowRank baselines, Task-Arithmetic/TIES merging,
//! and a synthetic benchmark harness round out the toolkit.

pub mod artifact;
pub mod bench;
pub mod container;
pub mod delta;
pub mod error;
pub mod matrix;
pub mod merge;
pub mod packing;
pub mod quant;
pub mod rng;
pub mod sparsify;
pub mod svd;

pub use container::{compression_ratio, Dtype, Tensor, TensorContainer};
pub use delta::{compute_delta, DeltaTensor};
pub use error::{Error, Result};
pub use matrix::Matrix;
pub use quant::{quantize_artifact, solve_alpha_for_cr, QuantConfig};
pub use sparsify::{
    allocate_sparsity, dare_sparsify, sparsify, sparsify_tensor, SparseFactors, SparsifyConfig,
    SparsityPlan,
};
pub use svd::{reconstruct, svd, truncate_lowrank, SvdFactors};

/// Ordered map preserving determinism guarantees in parallel per-tensor work:
/// results come back in input order regardless of scheduling.
pub fn par_map<T: Sync, R: Send>(items: &[T], f: impl Fn(&T) -> R + Sync + Send) -> Vec<R> {
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        items.par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.iter().map(f).collect()
    }
}

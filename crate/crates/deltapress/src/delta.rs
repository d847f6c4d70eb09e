//! Delta extraction: ΔW = W_ft − W_base over a filtered tensor set.

use crate::container::{Dtype, Tensor, TensorContainer};
use crate::error::{Error, Result};
use crate::matrix::Matrix;

#[derive(Clone, Debug)]
pub struct DeltaTensor {
    pub name: String,
    pub data: Matrix,
}

/// Tensors the 2-D compression pipeline applies to. Non-2-D tensors are
/// carried through uncompressed by the artifact layer.
pub fn passes_filter(name: &str, tensor: &Tensor, filter: Option<&str>) -> bool {
    tensor.is_2d() && filter.map_or(true, |f| name.contains(f))
}

/// Elementwise fine-tuned minus base, f32 accumulation, for every 2-D tensor
/// passing the (optional substring) filter. Name sets and shapes must match.
pub fn compute_delta(
    base: &TensorContainer,
    finetuned: &TensorContainer,
    filter: Option<&str>,
) -> Result<Vec<DeltaTensor>> {
    let mut out = Vec::new();
    for (name, ft) in &finetuned.tensors {
        if !passes_filter(name, ft, filter) {
            continue;
        }
        let b = base
            .get(name)
            .ok_or_else(|| Error::tensor(name, "missing from base checkpoint"))?;
        if b.shape != ft.shape {
            return Err(Error::tensor(
                name,
                format!("shape mismatch: base {:?} vs finetuned {:?}", b.shape, ft.shape),
            ));
        }
        let bm = b.to_matrix(name)?;
        let fm = ft.to_matrix(name)?;
        let delta = fm.sub(&bm);
        for (idx, v) in delta.data.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::tensor(name, format!("non-finite delta at flat index {idx}")));
            }
        }
        out.push(DeltaTensor { name: name.clone(), data: delta });
    }
    Ok(out)
}

/// Delta of a non-2-D tensor in its original dtype, for raw pass-through.
pub fn raw_delta(name: &str, base: &Tensor, finetuned: &Tensor) -> Result<Tensor> {
    if base.shape != finetuned.shape {
        return Err(Error::tensor(
            name,
            format!("shape mismatch: base {:?} vs finetuned {:?}", base.shape, finetuned.shape),
        ));
    }
    let b = base.to_f32_vec(name)?;
    let f = finetuned.to_f32_vec(name)?;
    let d: Vec<f32> = f.iter().zip(&b).map(|(&x, &y)| ((x as f64) - (y as f64)) as f32).collect();
    Ok(Tensor::from_f32_slice(finetuned.shape.clone(), &d, finetuned.dtype))
}

/// Write a set of deltas as a container (f32).
pub fn deltas_to_container(deltas: &[DeltaTensor]) -> TensorContainer {
    let mut c = TensorContainer::new();
    for d in deltas {
        c.insert(d.name.clone(), Tensor::from_matrix(&d.data, Dtype::F32));
    }
    c
}

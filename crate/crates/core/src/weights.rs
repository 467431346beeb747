//! Pretrained backbone weights stored as safetensors (torchvision key names).

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use safetensors::{Dtype, SafeTensors};

use crate::autograd::Tensor;
use crate::error::{Error, Result};
use crate::nn::Module;

pub fn load_safetensors(path: &Path) -> Result<BTreeMap<String, Tensor>> {
    let bytes = std::fs::read(path).map_err(|e| Error::path(path, e))?;
    let st = SafeTensors::deserialize(&bytes).map_err(|e| Error::Weights(format!("{}: {e}", path.display())))?;
    let mut out = BTreeMap::new();
    for (name, view) in st.tensors() {
        let data = view.data();
        let values: Vec<f64> = match view.dtype() {
            Dtype::F32 => data
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
                .collect(),
            Dtype::F64 => data
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                .collect(),
            // BN bookkeeping counters; not needed
            Dtype::I64 => continue,
            other => {
                return Err(Error::Weights(format!("{name}: unsupported dtype {other:?}")));
            }
        };
        let t = ArrayD::from_shape_vec(IxDyn(view.shape()), values)
            .map_err(|e| Error::Weights(format!("{name}: {e}")))?;
        out.insert(name, t);
    }
    Ok(out)
}

/// Copies `weights[key]` into every parameter whose name is `prefix + key`.
/// Parameters for which `skip` returns true are left untouched; every other
/// parameter must be present with a matching shape.
pub fn assign(
    module: &mut dyn Module,
    weights: &BTreeMap<String, Tensor>,
    prefix: &str,
    skip: impl Fn(&str) -> bool,
) -> Result<usize> {
    let mut loaded = 0;
    let mut err = None;
    module.visit_mut(&mut |p| {
        if err.is_some() {
            return;
        }
        let key = p.name.strip_prefix(prefix).unwrap_or(&p.name);
        if skip(key) {
            return;
        }
        match weights.get(key) {
            Some(w) if w.shape() == p.shape() => {
                *p.value_mut() = w.clone();
                loaded += 1;
            }
            Some(w) => {
                err = Some(Error::Weights(format!(
                    "{key}: file shape {:?}, model shape {:?}",
                    w.shape(),
                    p.shape()
                )))
            }
            None => err = Some(Error::Weights(format!("missing tensor `{key}`"))),
        }
    });
    match err {
        Some(e) => Err(e),
        None => Ok(loaded),
    }
}

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{ParamStore, Tensor};

/// Gradients keyed by parameter name.
pub type GradMap<T> = BTreeMap<String, Tensor<T>>;

/// Norm below which a vector has no usable direction.
pub const NORM_EPS: f64 = 1e-12;

/// Concatenates `grads` in the store's name order, each tensor row-major.
///
/// The map must cover exactly the store's names, with matching shapes.
pub fn flatten_grads<T: Scalar>(grads: &GradMap<T>, store: &ParamStore<T>) -> Result<Vec<T>> {
    if let Some(extra) = grads.keys().find(|k| !store.contains(k)) {
        return Err(Error::GradientKeys(format!(
            "unexpected gradient {extra:?}"
        )));
    }
    let mut out = Vec::with_capacity(store.numel());
    for (name, param) in store.iter() {
        let g = grads
            .get(name)
            .ok_or_else(|| Error::GradientKeys(format!("missing gradient {name:?}")))?;
        if g.shape() != param.shape() {
            return Err(Error::shape(
                "flatten_grads",
                format!("{name}: {:?} vs {:?}", g.shape(), param.shape()),
            ));
        }
        out.extend_from_slice(g.data());
    }
    Ok(out)
}

/// `u·v / (‖u‖‖v‖)` with 64-bit accumulation.
///
/// A norm under [`NORM_EPS`] is an error, never a silent zero.
pub fn cosine_similarity<T: Scalar>(u: &[T], v: &[T]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::LengthMismatch {
            expected: u.len(),
            got: v.len(),
        });
    }
    let (mut uv, mut uu, mut vv) = (0.0f64, 0.0f64, 0.0f64);
    for (&a, &b) in u.iter().zip(v) {
        let (a, b) = (a.as_f64(), b.as_f64());
        uv += a * b;
        uu += a * a;
        vv += b * b;
    }
    let (nu, nv) = (uu.sqrt(), vv.sqrt());
    for norm in [nu, nv] {
        if norm <= NORM_EPS {
            return Err(Error::DegenerateNorm {
                norm,
                threshold: NORM_EPS,
            });
        }
    }
    Ok((uv / (nu * nv)).clamp(-1.0, 1.0))
}

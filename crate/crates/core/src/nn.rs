//! Parameter initialization and graph binding shared by the models.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{GradMap, Graph, ParamStore, Tensor, Var};

/// Gaussian tensor with the given standard deviation.
pub fn normal<T: Scalar, R: Rng + ?Sized>(rng: &mut R, shape: &[usize], std: f64) -> Tensor<T> {
    Tensor::from_fn(shape, |_| {
        let z: f64 = StandardNormal.sample(rng);
        T::of(z * std)
    })
}

/// `[fan_in, fan_out]` weight with std `1/√fan_in`.
pub fn dense<T: Scalar, R: Rng + ?Sized>(rng: &mut R, fan_in: usize, fan_out: usize) -> Tensor<T> {
    normal(rng, &[fan_in, fan_out], 1.0 / (fan_in as f64).sqrt())
}

/// A parameter store recorded onto a graph, name → node.
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    /// Records every tensor of `store` on `graph`, as differentiable leaves
    /// when `trainable` and as constants otherwise.
    pub fn bind<T: Scalar>(graph: &Graph<T>, store: &ParamStore<T>, trainable: bool) -> Self {
        let vars = store
            .iter()
            .map(|(name, t)| {
                let v = if trainable {
                    graph.param(t)
                } else {
                    graph.constant(t)
                };
                (name.to_string(), v)
            })
            .collect();
        Bound { vars }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::MissingTensor(name.to_string()))
    }

    pub fn try_get(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    /// Nodes in name order, matching [`ParamStore::flatten`].
    pub fn vars(&self) -> Vec<Var> {
        self.vars.values().copied().collect()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.vars.keys().map(String::as_str)
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    /// Gradient of `output` for every bound entry, recorded on the graph.
    pub fn grad_vars<T: Scalar>(&self, graph: &Graph<T>, output: Var) -> Result<Vec<Var>> {
        graph.grad(output, &self.vars())
    }

    /// Gradient values of `output` keyed by name.
    pub fn grad_map<T: Scalar>(&self, graph: &Graph<T>, output: Var) -> Result<GradMap<T>> {
        let grads = self.grad_vars(graph, output)?;
        Ok(self
            .vars
            .keys()
            .zip(grads)
            .map(|(k, g)| (k.clone(), graph.tensor(g)))
            .collect())
    }
}

/// Concatenated values of `vars`.
pub fn flat_values<T: Scalar>(graph: &Graph<T>, vars: &[Var]) -> Vec<T> {
    let mut out = Vec::new();
    for &v in vars {
        out.extend_from_slice(&graph.value(v));
    }
    out
}

/// Single-head scaled dot-product attention; returns `(output, weights)`.
///
/// `mask` is added to the logits before the softmax.
pub fn attention<T: Scalar>(
    g: &Graph<T>,
    q: Var,
    k: Var,
    v: Var,
    mask: Option<Var>,
) -> Result<(Var, Var)> {
    let d = *g.shape(q).last().unwrap_or(&1);
    let kt = g.transpose(k)?;
    let logits = g.matmul(q, kt)?;
    let logits = g.scale(logits, T::of(1.0 / (d as f64).sqrt()))?;
    let logits = match mask {
        Some(m) => g.add(logits, m)?,
        None => logits,
    };
    let w = g.softmax(logits)?;
    Ok((g.matmul(w, v)?, w))
}

/// Additive logit mask: `MASKED` on masked key columns, 0 elsewhere.
/// When every key is masked the mask is dropped and attention is uniform.
pub fn key_mask<T: Scalar>(rows: usize, masked_keys: &[bool]) -> Tensor<T> {
    let cols = masked_keys.len();
    let all = masked_keys.iter().all(|&m| m);
    Tensor::from_fn(&[rows, cols], |i| {
        if !all && masked_keys[i % cols] {
            T::of(MASKED)
        } else {
            T::zero()
        }
    })
}

pub const MASKED: f64 = -1e9;

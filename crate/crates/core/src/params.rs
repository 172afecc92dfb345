//! Named parameter storage.
//!
//! Parameters are addressed by canonical dotted paths such as
//! `generator.layers.0.attn.qkv.weight`. Iteration order is the sorted path
//! order, which is also the order used in checkpoints.

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::gradcheck::GradCheckReport;
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, path: impl Into<String>, value: Tensor) {
        self.params.insert(path.into(), value);
    }

    pub fn get(&self, path: &str) -> Result<&Tensor> {
        self.params
            .get(path)
            .ok_or_else(|| Error::contract(format!("unknown parameter {path}")))
    }

    /// Replaces an existing parameter, keeping its shape.
    pub fn set(&mut self, path: &str, value: Tensor) -> Result<()> {
        let slot = self
            .params
            .get_mut(path)
            .ok_or_else(|| Error::contract(format!("unknown parameter {path}")))?;
        if slot.shape() != value.shape() {
            return Err(Error::Shape {
                op: "set_param",
                lhs: slot.shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        *slot = value;
        Ok(())
    }

    pub fn contains(&self, path: &str) -> bool {
        self.params.contains_key(path)
    }

    /// Binds a parameter into `g` as a gradient-tracking leaf.
    pub fn bind(&self, g: &Graph, path: &str) -> Result<Var> {
        Ok(g.param(path, self.get(path)?))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn paths(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Bitwise equality of every parameter whose path starts with `prefix`.
    pub fn bit_eq_prefix(&self, other: &ParamStore, prefix: &str) -> bool {
        self.params
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .all(|(k, v)| other.params.get(k).is_some_and(|o| v.bit_eq(o)))
    }

    pub(crate) fn linear<R: Rng + ?Sized>(&mut self, prefix: &str, fan_in: usize, fan_out: usize, rng: &mut R) {
        let std = 1.0 / (fan_in as f64).sqrt();
        self.insert(format!("{prefix}.weight"), Tensor::randn(&[fan_in, fan_out], std, rng));
        self.insert(format!("{prefix}.bias"), Tensor::zeros(&[fan_out]));
    }
}

/// `x · W + b` for the `prefix.weight` / `prefix.bias` pair.
pub(crate) fn affine(store: &ParamStore, g: &Graph, prefix: &str, x: Var) -> Result<Var> {
    let w = store.bind(g, &format!("{prefix}.weight"))?;
    let b = store.bind(g, &format!("{prefix}.bias"))?;
    g.add(g.matmul(x, w)?, b)
}

/// Finite-difference audit of every parameter gradient of the scalar
/// `f(store)`. Parameters that `f` never binds are expected to have a zero
/// numerical gradient.
pub fn gradcheck_store<F>(store: &ParamStore, f: F, h: f64) -> Result<GradCheckReport>
where
    F: Fn(&Graph, &ParamStore) -> Result<Var>,
{
    let g = Graph::new();
    let loss = f(&g, store)?;
    g.backward(loss)?;
    let analytic: BTreeMap<String, Tensor> = g.param_grads().into_iter().collect();

    let mut report = GradCheckReport::default();
    let mut work = store.clone();
    for (i, (path, value)) in store.iter().enumerate() {
        for j in 0..value.len() {
            let mut eval = |delta: f64| -> Result<f64> {
                let mut data = value.data().to_vec();
                data[j] += delta;
                work.set(path, Tensor::from_parts(value.shape().to_vec(), data))?;
                let g = Graph::new();
                Ok(g.value(f(&g, &work)?).item())
            };
            let fd = (eval(h)? - eval(-h)?) / (2.0 * h);
            work.set(path, value.clone())?;
            let ad = analytic.get(path).map_or(0.0, |t| t.data()[j]);
            let err = (ad - fd).abs() / fd.abs().max(1.0);
            report.entries += 1;
            if err > report.max_rel_error || report.entries == 1 {
                report.max_rel_error = err.max(report.max_rel_error);
                report.worst = (i, j);
            }
        }
    }
    Ok(report)
}

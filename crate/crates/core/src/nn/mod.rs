//! Network components: the TCN feature extractor, MLP heads, the optimizer
//! and the momentum (EMA) update used for the key encoder.

mod adam;
mod checkpoint;
mod mlp;
mod tcn;

pub use adam::{AdamConfig, AdamState};
pub use checkpoint::Checkpoint;
pub use mlp::{BatchNormStats, MlpHead};
pub use tcn::{Tcn, TcnConfig};

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Gradients, Graph, Tensor, Var};

/// Ordered, named parameters of one network.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    entries: Vec<(String, Tensor)>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor) -> usize {
        self.entries.push((name.into(), value));
        self.entries.len() - 1
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.entries.iter().map(|(_, t)| t)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.iter_mut().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn num_values(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    /// Puts every parameter on `graph`. Trainable bindings are differentiable
    /// leaves; frozen ones are constants and never get gradient buffers.
    pub fn bind(&self, graph: &mut Graph, trainable: bool) -> Vec<Var> {
        self.entries
            .iter()
            .map(|(_, t)| {
                if trainable {
                    graph.param(t.clone())
                } else {
                    graph.constant(t.clone())
                }
            })
            .collect()
    }

    /// Same names and shapes, in the same order.
    pub fn check_same_structure(&self, other: &ParamStore) -> Result<()> {
        if self.entries.len() != other.entries.len() {
            return Err(Error::contract(format!(
                "parameter count {} vs {}",
                self.entries.len(),
                other.entries.len()
            )));
        }
        for ((na, ta), (nb, tb)) in self.entries.iter().zip(&other.entries) {
            if na != nb || ta.shape() != tb.shape() {
                return Err(Error::contract(format!(
                    "parameter {na}{:?} vs {nb}{:?}",
                    ta.shape(),
                    tb.shape()
                )));
            }
        }
        Ok(())
    }

    /// Squared Euclidean distance between two structurally identical stores.
    pub fn distance_sq(&self, other: &ParamStore) -> f64 {
        self.tensors()
            .zip(other.tensors())
            .flat_map(|(a, b)| a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)))
            .sum()
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

/// Exponential moving average `θ̃ ← m·θ̃ + (1 − m)·θ` applied to every
/// parameter of `target`.
pub fn momentum_update(target: &mut ParamStore, source: &ParamStore, m: f64) -> Result<()> {
    if !(0.0..1.0).contains(&m) {
        return Err(Error::Parameter(format!("momentum must be in [0, 1), got {m}")));
    }
    target.check_same_structure(source)?;
    for (t, s) in target.tensors_mut().zip(source.tensors()) {
        for (tv, &sv) in t.data_mut().iter_mut().zip(s.data()) {
            *tv = m * *tv + (1.0 - m) * sv;
        }
    }
    Ok(())
}

/// Pulls the gradient of every bound parameter out of `grads`, in order.
pub fn collect_grads(grads: &Gradients, bound: &[Var]) -> Result<Vec<Tensor>> {
    bound
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            grads
                .get(v)
                .cloned()
                .ok_or_else(|| Error::contract(format!("no gradient for parameter #{i}")))
        })
        .collect()
}

/// `Uniform(−1/√fan_in, 1/√fan_in)` weights.
pub(crate) fn uniform_init<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("sized from shape")
}

/// Inverted dropout: zeroes entries with probability `rate` and rescales the
/// survivors by `1/(1 − rate)`.
pub(crate) fn dropout<R: Rng + ?Sized>(
    graph: &mut Graph,
    x: Var,
    rate: f64,
    rng: &mut R,
) -> Result<Var> {
    if rate <= 0.0 {
        return Ok(x);
    }
    let keep = 1.0 / (1.0 - rate);
    let shape = graph.value(x).shape().to_vec();
    let n = graph.value(x).len();
    let mask = (0..n)
        .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
        .collect();
    let mask = graph.constant(Tensor::new(shape, mask)?);
    graph.mul(x, mask)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(values: &[f64]) -> ParamStore {
        let mut s = ParamStore::new();
        s.push("w", Tensor::vector(values.to_vec()));
        s
    }

    #[test]
    fn momentum_zero_copies() {
        let mut target = store(&[5.0, -3.0]);
        let source = store(&[1.0, 2.0]);
        momentum_update(&mut target, &source, 0.0).unwrap();
        assert_eq!(target, source);
    }

    #[test]
    fn momentum_single_and_double_step() {
        let mut target = store(&[1.0]);
        momentum_update(&mut target, &store(&[0.0]), 0.9).unwrap();
        assert!((target.get("w").unwrap().item() - 0.9).abs() < 1e-15);

        let mut target = store(&[1.0]);
        for _ in 0..2 {
            momentum_update(&mut target, &store(&[0.0]), 0.99).unwrap();
        }
        assert!((target.get("w").unwrap().item() - 0.9801).abs() < 1e-15);
    }

    #[test]
    fn momentum_rejects_mismatch_and_bad_coefficient() {
        let mut target = store(&[1.0]);
        assert!(matches!(
            momentum_update(&mut target, &store(&[1.0, 2.0]), 0.5),
            Err(Error::Contract(_))
        ));
        assert!(matches!(
            momentum_update(&mut target, &store(&[1.0]), 1.0),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn frozen_binding_has_no_gradient() {
        let s = store(&[1.0, 2.0]);
        let mut g = Graph::new();
        let bound = s.bind(&mut g, false);
        let loss = g.sum(bound[0]);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.allocated(), 0);
        assert!(collect_grads(&grads, &bound).is_err());
    }
}

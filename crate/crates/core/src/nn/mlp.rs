use rand::Rng;

use super::{uniform_init, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

/// Running feature statistics for heads that standardize their input.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// `affine → relu → affine`, optionally preceded by per-batch input
/// standardization.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpHead {
    input_dim: usize,
    hidden_dim: usize,
    output_dim: usize,
    params: ParamStore,
    batch_norm: Option<BatchNormStats>,
}

impl MlpHead {
    pub fn new<R: Rng + ?Sized>(
        input_dim: usize,
        hidden_dim: usize,
        output_dim: usize,
        batch_norm: bool,
        rng: &mut R,
    ) -> Self {
        let mut params = ParamStore::new();
        params.push("fc1.weight", uniform_init(&[input_dim, hidden_dim], input_dim, rng));
        params.push("fc1.bias", Tensor::zeros(&[hidden_dim]));
        params.push("fc2.weight", uniform_init(&[hidden_dim, output_dim], hidden_dim, rng));
        params.push("fc2.bias", Tensor::zeros(&[output_dim]));
        MlpHead {
            input_dim,
            hidden_dim,
            output_dim,
            params,
            batch_norm: batch_norm.then(|| BatchNormStats {
                mean: vec![0.0; input_dim],
                var: vec![1.0; input_dim],
            }),
        }
    }

    pub fn from_parts(params: ParamStore, batch_norm: Option<BatchNormStats>) -> Result<Self> {
        let w1 = params
            .get("fc1.weight")
            .ok_or_else(|| Error::Format("head is missing fc1.weight".into()))?;
        let w2 = params
            .get("fc2.weight")
            .ok_or_else(|| Error::Format("head is missing fc2.weight".into()))?;
        let (input_dim, hidden_dim, output_dim) = (w1.shape()[0], w1.shape()[1], w2.shape()[1]);
        let template = MlpHead::new(input_dim, hidden_dim, output_dim, false, &mut crate::rng::seeded(0));
        template.params.check_same_structure(&params)?;
        if let Some(bn) = &batch_norm {
            if bn.mean.len() != input_dim || bn.var.len() != input_dim {
                return Err(Error::dim("batch-norm statistics do not match head input"));
            }
        }
        Ok(MlpHead {
            input_dim,
            hidden_dim,
            output_dim,
            params,
            batch_norm,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden_dim
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn batch_norm(&self) -> Option<&BatchNormStats> {
        self.batch_norm.as_ref()
    }

    /// `z: [N, input_dim]` to `[N, output_dim]`. In training mode a
    /// batch-normalizing head uses the batch's own statistics; otherwise its
    /// running estimates.
    pub fn forward(&self, graph: &mut Graph, bound: &[Var], z: Var, train: bool) -> Result<Var> {
        let zv = graph.value(z);
        if zv.ndim() != 2 || zv.shape()[1] != self.input_dim {
            return Err(Error::dim(format!(
                "head expects [N, {}], got {:?}",
                self.input_dim,
                zv.shape()
            )));
        }
        let n = zv.shape()[0];
        let input = match &self.batch_norm {
            None => z,
            Some(_) if train => graph.standardize_cols(z, BN_EPS)?,
            Some(stats) => {
                let shift = graph.constant(Tensor::vector(stats.mean.iter().map(|m| -m).collect()));
                let centered = graph.add_row_bias(z, shift)?;
                let inv: Vec<f64> = stats.var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
                let scale = graph.constant(Tensor::new(
                    vec![n, self.input_dim],
                    (0..n).flat_map(|_| inv.iter().copied()).collect(),
                )?);
                graph.mul(centered, scale)?
            }
        };
        let h = graph.affine(input, bound[0], bound[1])?;
        let h = graph.relu(h);
        graph.affine(h, bound[2], bound[3])
    }

    /// Gradient-free evaluation-mode forward pass.
    pub fn apply(&self, z: &Tensor) -> Result<Tensor> {
        let mut graph = Graph::new();
        let bound = self.params.bind(&mut graph, false);
        let zv = graph.constant(z.clone());
        let out = self.forward(&mut graph, &bound, zv, false)?;
        Ok(graph.value(out).clone())
    }

    /// Folds a training batch into the running statistics (no-op without
    /// batch normalization).
    pub fn observe_batch(&mut self, z: &Tensor) {
        if let Some(stats) = &mut self.batch_norm {
            let (mean, var) = crate::tensor::column_moments(z);
            for j in 0..stats.mean.len() {
                stats.mean[j] = (1.0 - BN_MOMENTUM) * stats.mean[j] + BN_MOMENTUM * mean[j];
                stats.var[j] = (1.0 - BN_MOMENTUM) * stats.var[j] + BN_MOMENTUM * var[j];
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn zero_head(input: usize, hidden: usize, output: usize) -> MlpHead {
        let mut head = MlpHead::new(input, hidden, output, false, &mut seeded(0));
        head.params_mut().tensors_mut().for_each(|t| t.data_mut().fill(0.0));
        head
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let head = zero_head(3, 4, 2);
        let out = head.apply(&Tensor::full(&[5, 3], 1.7)).unwrap();
        assert_eq!(out, Tensor::zeros(&[5, 2]));
    }

    #[test]
    fn hand_computed_forward() {
        // fc1 = I, fc1.bias = [0, -1], fc2 = [[1, 2], [3, 4]], fc2.bias = [0.5, 0]
        let mut head = zero_head(2, 2, 2);
        let p = head.params_mut();
        p.get_mut("fc1.weight").unwrap().data_mut().copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
        p.get_mut("fc1.bias").unwrap().data_mut().copy_from_slice(&[0.0, -1.0]);
        p.get_mut("fc2.weight").unwrap().data_mut().copy_from_slice(&[1.0, 2.0, 3.0, 4.0]);
        p.get_mut("fc2.bias").unwrap().data_mut().copy_from_slice(&[0.5, 0.0]);
        // z = [2, 0.5]: hidden = relu([2, -0.5]) = [2, 0]; out = [2 + 0.5, 4]
        let out = head.apply(&Tensor::from_rows(&[vec![2.0, 0.5]]).unwrap()).unwrap();
        assert_eq!(out.data(), &[2.5, 4.0]);
    }

    #[test]
    fn output_width_matches_head() {
        let head = MlpHead::new(6, 5, 3, false, &mut seeded(9));
        let out = head.apply(&Tensor::full(&[4, 6], 0.3)).unwrap();
        assert_eq!(out.shape(), &[4, 3]);
    }

    #[test]
    fn input_dimension_is_checked() {
        let head = MlpHead::new(6, 5, 3, false, &mut seeded(9));
        assert!(matches!(head.apply(&Tensor::zeros(&[1, 5])), Err(Error::Dimension(_))));
    }

    #[test]
    fn running_statistics_track_batches() {
        let mut head = MlpHead::new(2, 3, 2, true, &mut seeded(1));
        let batch = Tensor::from_rows(&[vec![1.0, 10.0], vec![3.0, 10.0]]).unwrap();
        for _ in 0..200 {
            head.observe_batch(&batch);
        }
        let bn = head.batch_norm().unwrap();
        assert!((bn.mean[0] - 2.0).abs() < 1e-6 && (bn.mean[1] - 10.0).abs() < 1e-6);
        assert!((bn.var[0] - 1.0).abs() < 1e-6 && bn.var[1].abs() < 1e-6);
    }
}

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use super::{dropout, uniform_init, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TcnConfig {
    pub in_channels: usize,
    pub channels: usize,
    pub kernel_size: usize,
    pub num_layers: usize,
    pub dilations: Vec<usize>,
    pub dropout_rate: f64,
    /// Longest input history the receptive field must cover.
    pub max_history: usize,
}

impl Default for TcnConfig {
    fn default() -> Self {
        TcnConfig {
            in_channels: 1,
            channels: 64,
            kernel_size: 3,
            num_layers: 5,
            dilations: vec![1, 2, 4, 8, 16],
            dropout_rate: 0.0,
            max_history: 48,
        }
    }
}

impl TcnConfig {
    /// `1 + (K − 1)·Σ dilations`.
    pub fn receptive_field(&self) -> usize {
        1 + (self.kernel_size.saturating_sub(1)) * self.dilations.iter().sum::<usize>()
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.channels == 0 || self.kernel_size == 0 {
            return Err(Error::Parameter(
                "TCN channel counts and kernel size must be positive".into(),
            ));
        }
        if self.dilations.len() != self.num_layers {
            return Err(Error::Parameter(format!(
                "{} dilations for {} layers",
                self.dilations.len(),
                self.num_layers
            )));
        }
        if self.dilations.iter().any(|&d| d == 0) {
            return Err(Error::Parameter("dilations must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Parameter(format!(
                "dropout rate {} not in [0, 1)",
                self.dropout_rate
            )));
        }
        let rf = self.receptive_field();
        if rf < self.max_history {
            return Err(Error::Parameter(format!(
                "receptive field {rf} does not cover history length {}",
                self.max_history
            )));
        }
        Ok(())
    }
}

/// Stack of dilated causal convolutions with residual connections. The
/// embedding of a series is the final layer's output at the last time step.
#[derive(Debug, Clone, PartialEq)]
pub struct Tcn {
    config: TcnConfig,
    params: ParamStore,
}

impl Tcn {
    pub fn new<R: Rng + ?Sized>(config: TcnConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let k = config.kernel_size;
        let mut cin = config.in_channels;
        for layer in 0..config.num_layers {
            let c = config.channels;
            params.push(
                format!("layer{layer}.conv.weight"),
                uniform_init(&[c, cin, k], cin * k, rng),
            );
            params.push(format!("layer{layer}.conv.bias"), Tensor::zeros(&[c]));
            if cin != c {
                params.push(
                    format!("layer{layer}.residual.weight"),
                    uniform_init(&[c, cin, 1], cin, rng),
                );
                params.push(format!("layer{layer}.residual.bias"), Tensor::zeros(&[c]));
            }
            cin = c;
        }
        Ok(Tcn { config, params })
    }

    /// Rebuilds a network from stored parameters, checking their layout.
    pub fn from_params(config: TcnConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let template = Tcn::new(config.clone(), &mut crate::rng::seeded(0))?;
        template.params.check_same_structure(&params)?;
        Ok(Tcn { config, params })
    }

    pub fn config(&self) -> &TcnConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn embedding_dim(&self) -> usize {
        self.config.channels
    }

    /// Maps `x` (`[M, T]` or `[N, M, T]`) to embeddings (`[C]` or `[N, C]`).
    /// `bound` must come from [`ParamStore::bind`] on this network's params.
    /// Dropout is active only when `train_rng` is given.
    pub fn forward(
        &self,
        graph: &mut Graph,
        bound: &[Var],
        x: Var,
        mut train_rng: Option<&mut dyn RngCore>,
    ) -> Result<Var> {
        let shape = graph.value(x).shape();
        let channels = match *shape {
            [m, _] | [_, m, _] => m,
            _ => {
                return Err(Error::dim(format!(
                    "feature extractor expects [M,T] or [N,M,T], got {shape:?}"
                )))
            }
        };
        if channels != self.config.in_channels {
            return Err(Error::dim(format!(
                "input has {channels} channels, extractor expects {}",
                self.config.in_channels
            )));
        }
        if bound.len() != self.params.len() {
            return Err(Error::contract(format!(
                "{} bound parameters for a network with {}",
                bound.len(),
                self.params.len()
            )));
        }
        let mut h = x;
        let mut idx = 0;
        let mut cin = self.config.in_channels;
        for &dilation in &self.config.dilations {
            let conv = graph.conv1d(h, bound[idx], bound[idx + 1], dilation)?;
            idx += 2;
            let mut act = graph.relu(conv);
            if let Some(rng) = train_rng.as_deref_mut() {
                act = dropout(graph, act, self.config.dropout_rate, rng)?;
            }
            let residual = if cin == self.config.channels {
                h
            } else {
                let r = graph.conv1d(h, bound[idx], bound[idx + 1], 1)?;
                idx += 2;
                r
            };
            let sum = graph.add(act, residual)?;
            h = graph.relu(sum);
            cin = self.config.channels;
        }
        graph.last_step(h)
    }

    /// Gradient-free embedding of a batch `[N, M, T]`, as `[N, C]`.
    pub fn embed(&self, x: &Tensor) -> Result<Tensor> {
        let mut graph = Graph::new();
        let bound = self.params.bind(&mut graph, false);
        let xv = graph.constant(x.clone());
        let z = self.forward(&mut graph, &bound, xv, None)?;
        Ok(graph.value(z).clone())
    }
}

use std::path::Path;

use serde_json::json;

use super::TrainConfig;
use crate::contrastive::EmbeddingQueue;
use crate::data::{SOURCE, TARGET};
use crate::error::{Error, Result};
use crate::nn::{BatchNormStats, Checkpoint, MlpHead, ParamStore, Tcn};
use crate::rng;
use crate::tensor::{Graph, Tensor, Var};

const INIT_STREAM: u64 = 0x1417;
const PREDICT_CHUNK: usize = 256;

/// Feature extractor `F`, its momentum copy `F̃`, classifier `C`,
/// discriminator `D`, projector `Q`, and one key queue per domain.
#[derive(Debug, Clone, PartialEq)]
pub struct CludaModel {
    pub encoder: Tcn,
    pub momentum_encoder: Tcn,
    pub classifier: MlpHead,
    pub discriminator: MlpHead,
    pub projector: MlpHead,
    pub queue_source: EmbeddingQueue,
    pub queue_target: EmbeddingQueue,
}

impl CludaModel {
    pub fn new(config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut r = rng::derive(config.seed, &[INIT_STREAM]);
        let encoder = Tcn::new(config.tcn.clone(), &mut r)?;
        let dim = encoder.embedding_dim();
        let h = config.hidden_dim;
        let classifier = MlpHead::new(dim, h, config.task.num_classes(), config.batch_norm, &mut r);
        let discriminator = MlpHead::new(dim, h, 2, false, &mut r);
        let projector = MlpHead::new(dim, h, dim, false, &mut r);
        Ok(CludaModel {
            momentum_encoder: encoder.clone(),
            encoder,
            classifier,
            discriminator,
            projector,
            queue_source: EmbeddingQueue::new(config.queue_size, dim)?,
            queue_target: EmbeddingQueue::new(config.queue_size, dim)?,
        })
    }

    /// Class probabilities `[N, K]` for a batch `[N, M, T]`: softmax of
    /// `C(F(x))` on the unaugmented input, without dropout.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        if x.ndim() != 3 {
            return Err(Error::dim(format!("predict expects [N, M, T], got {:?}", x.shape())));
        }
        let (n, m, t) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let k = self.classifier.output_dim();
        let mut out = Vec::with_capacity(n * k);
        for start in (0..n).step_by(PREDICT_CHUNK) {
            let end = (start + PREDICT_CHUNK).min(n);
            let chunk = Tensor::new(
                vec![end - start, m, t],
                x.data()[start * m * t..end * m * t].to_vec(),
            )?;
            let logits = self.classifier.apply(&self.encoder.embed(&chunk)?)?;
            for i in 0..logits.rows() {
                out.extend(softmax(logits.row(i)));
            }
        }
        Tensor::new(vec![n, k], out)
    }

    /// Named arrays of every network plus queue contents and running
    /// statistics.
    pub fn to_checkpoint(&self, config: &TrainConfig, step: u64) -> Checkpoint {
        let mut arrays = Vec::new();
        let nets: [(&str, &ParamStore); 5] = [
            ("encoder", self.encoder.params()),
            ("momentum_encoder", self.momentum_encoder.params()),
            ("classifier", self.classifier.params()),
            ("discriminator", self.discriminator.params()),
            ("projector", self.projector.params()),
        ];
        for (prefix, store) in nets {
            for (name, t) in store.iter() {
                arrays.push((format!("{prefix}.{name}"), t.clone()));
            }
        }
        if let Some(bn) = self.classifier.batch_norm() {
            arrays.push(("classifier.bn.mean".into(), Tensor::vector(bn.mean.clone())));
            arrays.push(("classifier.bn.var".into(), Tensor::vector(bn.var.clone())));
        }
        arrays.push(("queue.source".into(), self.queue_source.entries()));
        arrays.push(("queue.target".into(), self.queue_target.entries()));
        Checkpoint {
            manifest: json!({ "format": "cluda-model", "step": step, "config": config }),
            arrays,
        }
    }

    /// Inverse of [`to_checkpoint`](Self::to_checkpoint); returns the model,
    /// its config echo and the step count.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<(Self, TrainConfig, u64)> {
        let config: TrainConfig = serde_json::from_value(
            ck.manifest
                .get("config")
                .cloned()
                .ok_or_else(|| Error::Format("checkpoint manifest has no config".into()))?,
        )?;
        let step = ck.manifest.get("step").and_then(|s| s.as_u64()).unwrap_or(0);
        let template = CludaModel::new(&config)?;
        let load = |prefix: &str, store: &ParamStore| -> Result<ParamStore> {
            let mut out = ParamStore::new();
            for (name, _) in store.iter() {
                let key = format!("{prefix}.{name}");
                let t = ck
                    .get(&key)
                    .ok_or_else(|| Error::Format(format!("checkpoint is missing {key}")))?;
                out.push(name, t.clone());
            }
            store.check_same_structure(&out)?;
            Ok(out)
        };
        let encoder = Tcn::from_params(config.tcn.clone(), load("encoder", template.encoder.params())?)?;
        let momentum_encoder = Tcn::from_params(
            config.tcn.clone(),
            load("momentum_encoder", template.momentum_encoder.params())?,
        )?;
        let bn = match (ck.get("classifier.bn.mean"), ck.get("classifier.bn.var")) {
            (Some(m), Some(v)) => Some(BatchNormStats {
                mean: m.data().to_vec(),
                var: v.data().to_vec(),
            }),
            _ => None,
        };
        if bn.is_some() != config.batch_norm {
            return Err(Error::Format("batch-norm statistics do not match config".into()));
        }
        let classifier = MlpHead::from_parts(load("classifier", template.classifier.params())?, bn)?;
        let discriminator = MlpHead::from_parts(load("discriminator", template.discriminator.params())?, None)?;
        let projector = MlpHead::from_parts(load("projector", template.projector.params())?, None)?;
        let mut queues = [template.queue_source, template.queue_target];
        for (q, key) in queues.iter_mut().zip(["queue.source", "queue.target"]) {
            let entries = ck
                .get(key)
                .ok_or_else(|| Error::Format(format!("checkpoint is missing {key}")))?;
            if entries.rows() > 0 {
                q.enqueue_batch(entries)?;
            }
        }
        let [queue_source, queue_target] = queues;
        Ok((
            CludaModel {
                encoder,
                momentum_encoder,
                classifier,
                discriminator,
                projector,
                queue_source,
                queue_target,
            },
            config,
            step,
        ))
    }

    pub fn save(&self, path: &Path, config: &TrainConfig, step: u64) -> Result<()> {
        self.to_checkpoint(config, step).save(path)
    }

    pub fn load(path: &Path) -> Result<(Self, TrainConfig, u64)> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

fn softmax(row: &[f64]) -> impl Iterator<Item = f64> + '_ {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let total: f64 = row.iter().map(|v| (v - max).exp()).sum();
    row.iter().map(move |v| (v - max).exp() / total)
}

/// Mean cross-entropy of the classifier on embeddings `z` (`[N, D]`).
pub fn prediction_loss(
    graph: &mut Graph,
    classifier: &MlpHead,
    bound: &[Var],
    z: Var,
    labels: &[usize],
    train: bool,
) -> Result<Var> {
    let logits = classifier.forward(graph, bound, z, train)?;
    graph.softmax_cross_entropy(logits, labels)
}

/// Domain-classification loss: the mean cross-entropy of `D(R(z_s))`
/// against label 0 plus that of `D(R(z_t))` against label 1, where `R` is
/// the gradient-reversal layer.
pub fn domain_loss(
    graph: &mut Graph,
    discriminator: &MlpHead,
    bound: &[Var],
    z_source: Var,
    z_target: Var,
) -> Result<Var> {
    let mut terms = Vec::with_capacity(2);
    for (z, domain) in [(z_source, SOURCE), (z_target, TARGET)] {
        let n = graph.value(z).rows();
        if n == 0 {
            return Err(Error::contract("domain loss needs non-empty batches"));
        }
        let reversed = graph.grad_reverse(z);
        let logits = discriminator.forward(graph, bound, reversed, true)?;
        terms.push(graph.softmax_cross_entropy(logits, &vec![domain as usize; n])?);
    }
    graph.add(terms[0], terms[1])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::TcnConfig;
    use rand::Rng;

    pub(crate) fn tiny_config() -> TrainConfig {
        TrainConfig {
            tcn: TcnConfig {
                in_channels: 2,
                channels: 4,
                kernel_size: 3,
                num_layers: 2,
                dilations: vec![1, 2],
                dropout_rate: 0.0,
                max_history: 6,
            },
            hidden_dim: 5,
            augment: crate::augment::AugmentConfig {
                cutout_window: 2,
                ..Default::default()
            },
            batch_size: 4,
            queue_size: 8,
            ..TrainConfig::default()
        }
    }

    fn random_batch(n: usize, seed: u64) -> Tensor {
        let mut r = rng::seeded(seed);
        Tensor::new(vec![n, 2, 6], (0..n * 12).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn momentum_encoder_starts_as_exact_copy() {
        let m = CludaModel::new(&tiny_config()).unwrap();
        assert_eq!(m.encoder, m.momentum_encoder);
        assert_eq!(m.queue_source.capacity(), 8);
        assert_eq!(m.queue_target.capacity(), 8);
        assert_eq!(m.projector.output_dim(), m.encoder.embedding_dim());
    }

    #[test]
    fn probabilities_sum_to_one_and_are_batch_invariant() {
        let m = CludaModel::new(&tiny_config()).unwrap();
        let x = random_batch(7, 1);
        let p = m.predict(&x).unwrap();
        for i in 0..7 {
            assert!((p.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        assert_eq!(p, m.predict(&x).unwrap());
        for i in 0..7 {
            let one = Tensor::new(vec![1, 2, 6], x.data()[i * 12..(i + 1) * 12].to_vec()).unwrap();
            assert_eq!(m.predict(&one).unwrap().row(0), p.row(i));
        }
    }

    #[test]
    fn uniform_classifier_gives_ln_k() {
        let mut m = CludaModel::new(&tiny_config()).unwrap();
        m.classifier.params_mut().tensors_mut().for_each(|t| t.data_mut().fill(0.0));
        let mut g = Graph::new();
        let bound = m.classifier.params().bind(&mut g, true);
        let z = g.constant(Tensor::full(&[3, 4], 0.3));
        let loss = prediction_loss(&mut g, &m.classifier, &bound, z, &[0, 1, 1], true).unwrap();
        assert!((g.value(loss).item() - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn uniform_discriminator_gives_two_ln_two() {
        let mut m = CludaModel::new(&tiny_config()).unwrap();
        m.discriminator.params_mut().tensors_mut().for_each(|t| t.data_mut().fill(0.0));
        let mut g = Graph::new();
        let bound = m.discriminator.params().bind(&mut g, true);
        let zs = g.param(Tensor::full(&[3, 4], 0.3));
        let zt = g.param(Tensor::full(&[2, 4], -0.7));
        let loss = domain_loss(&mut g, &m.discriminator, &bound, zs, zt).unwrap();
        assert!((g.value(loss).item() - 2.0 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut c = tiny_config();
        c.batch_norm = true;
        let mut m = CludaModel::new(&c).unwrap();
        m.classifier.observe_batch(&Tensor::full(&[2, 4], 0.5));
        let keys = Tensor::from_rows(&[vec![1.0, 0.0, 0.0, 0.0], vec![0.0, 1.0, 0.0, 0.0]]).unwrap();
        m.queue_target.enqueue_batch(&keys).unwrap();
        let ck = m.to_checkpoint(&c, 17);
        let mut bytes = Vec::new();
        ck.write_to(&mut bytes).unwrap();
        let back = Checkpoint::read_from(&mut bytes.as_slice()).unwrap();
        let (m2, c2, step) = CludaModel::from_checkpoint(&back).unwrap();
        assert_eq!((c2, step), (c, 17));
        assert_eq!(m2, m);
    }
}

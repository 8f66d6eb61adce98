use std::io::Write;
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::model::{domain_loss, prediction_loss, CludaModel};
use super::TrainConfig;
use crate::augment::{Augmenter, View};
use crate::contrastive::{infonce_loss, nncl_loss};
use crate::data::{Dataset, TimeSeriesSample};
use crate::error::{Error, Result};
use crate::metrics::{MetricReport, ScoredPredictions, TaskKind};
use crate::nn::{collect_grads, momentum_update, AdamState};
use crate::rng;
use crate::tensor::{Graph, Tensor, Var};

const VIEW_STREAM: u64 = 0x5e1;
const DROPOUT_STREAM: u64 = 0xd0;
const BATCH_STREAM: u64 = 0xba7;
const MAX_VIEW_REDRAWS: usize = 8;

/// Loss terms of one step. `loss_total` is the value that was
/// differentiated; terms whose weight is zero are not computed and read 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: u64,
    pub loss_c: f64,
    pub loss_disc: f64,
    pub loss_cl_source: f64,
    pub loss_cl_target: f64,
    pub loss_nncl: f64,
    pub loss_total: f64,
    /// Source-validation metric, present on evaluation steps.
    pub val_metric: Option<f64>,
    pub wall_ms: f64,
}

impl StepReport {
    /// `L_c + λ_disc·L_disc + λ_CL·(L_CL_s + L_CL_t) + λ_NNCL·L_NNCL`.
    pub fn recombined_total(&self, config: &TrainConfig) -> f64 {
        self.loss_c
            + config.lambda_disc * self.loss_disc
            + config.lambda_cl * (self.loss_cl_source + self.loss_cl_target)
            + config.lambda_nncl * self.loss_nncl
    }
}

/// Owns the model and optimizer state and applies training steps.
#[derive(Debug, Clone)]
pub struct Trainer {
    config: TrainConfig,
    augmenter: Augmenter,
    model: CludaModel,
    // encoder, classifier, discriminator, projector
    optimizers: [AdamState; 4],
    step: u64,
    gradient_buffers: usize,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        let model = CludaModel::new(&config)?;
        Ok(Self::from_model(config, model))
    }

    pub fn from_model(config: TrainConfig, model: CludaModel) -> Self {
        let adam = config.adam();
        let optimizers = [
            AdamState::new(adam, model.encoder.params()),
            AdamState::new(adam, model.classifier.params()),
            AdamState::new(adam, model.discriminator.params()),
            AdamState::new(adam, model.projector.params()),
        ];
        Trainer {
            augmenter: Augmenter::new(config.augment.clone()),
            config,
            model,
            optimizers,
            step: 0,
            gradient_buffers: 0,
        }
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn model(&self) -> &CludaModel {
        &self.model
    }

    pub fn into_model(self) -> CludaModel {
        self.model
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Gradient buffers allocated by the most recent backward pass.
    pub fn gradient_buffers(&self) -> usize {
        self.gradient_buffers
    }

    /// Number of trainable parameter tensors (those of `F`, `C`, `D`, `Q`).
    pub fn trainable_tensors(&self) -> usize {
        self.model.encoder.params().len()
            + self.model.classifier.params().len()
            + self.model.discriminator.params().len()
            + self.model.projector.params().len()
    }

    /// One optimization step: views, query/key embeddings, losses, backward,
    /// Adam, momentum update, enqueue — in that order.
    pub fn train_step(
        &mut self,
        source: &[&TimeSeriesSample],
        target: &[&TimeSeriesSample],
    ) -> Result<StepReport> {
        let started = Instant::now();
        let cfg = &self.config;
        if source.is_empty() {
            return Err(Error::contract("empty source batch"));
        }
        let labels: Vec<usize> = source
            .iter()
            .map(|s| {
                s.label
                    .ok_or_else(|| Error::contract(format!("source series {} is unlabeled", s.series_id)))
            })
            .collect::<Result<_>>()?;
        let adapt = cfg.uses_target();
        let contrast = cfg.lambda_cl > 0.0 || cfg.lambda_nncl > 0.0;
        if adapt && target.is_empty() {
            return Err(Error::contract("empty target batch"));
        }
        let step = self.step + 1;

        // 1. views
        let mut view_rng = rng::derive(cfg.seed, &[VIEW_STREAM, step]);
        let (q_source, k_source) = self.views(source, &mut view_rng)?;
        let (q_target, k_target) = if adapt {
            self.views(target, &mut view_rng)?
        } else {
            (Tensor::zeros(&[0]), Tensor::zeros(&[0]))
        };

        // 2. query embeddings through F, detached keys through F̃
        let model = &self.model;
        let mut drop_rng = rng::derive(cfg.seed, &[DROPOUT_STREAM, step]);
        let mut g = Graph::new();
        let f_vars = model.encoder.params().bind(&mut g, true);
        let c_vars = model.classifier.params().bind(&mut g, true);
        let d_vars = model.discriminator.params().bind(&mut g, true);
        let q_vars = model.projector.params().bind(&mut g, true);
        let mut encode = |g: &mut Graph, x: Tensor| -> Result<Var> {
            let x = g.constant(x);
            model.encoder.forward(g, &f_vars, x, Some(&mut drop_rng))
        };
        let zq_source = encode(&mut g, q_source)?;
        let zq_target = if adapt { Some(encode(&mut g, q_target)?) } else { None };
        let (zc_source, zc_target) = if cfg.classify_raw {
            let raw_s = encode(&mut g, stack_values(source)?)?;
            let raw_t = if adapt { Some(encode(&mut g, stack_values(target)?)?) } else { None };
            (raw_s, raw_t)
        } else {
            (zq_source, zq_target)
        };
        let (keys_source, keys_target) = if contrast {
            (
                normalized_keys(&model.momentum_encoder.embed(&k_source)?)?,
                normalized_keys(&model.momentum_encoder.embed(&k_target)?)?,
            )
        } else {
            (Tensor::zeros(&[0]), Tensor::zeros(&[0]))
        };

        // 3. losses
        let loss_c = prediction_loss(&mut g, &model.classifier, &c_vars, zc_source, &labels, true)?;
        let mut total = loss_c;
        let weighted = |g: &mut Graph, total: &mut Var, term: Var, w: f64| -> Result<()> {
            let scaled = g.scale(term, w);
            *total = g.add(*total, scaled)?;
            Ok(())
        };
        let loss_disc = if cfg.lambda_disc > 0.0 {
            let zt = zc_target.expect("target embedded when adapting");
            let l = domain_loss(&mut g, &model.discriminator, &d_vars, zc_source, zt)?;
            weighted(&mut g, &mut total, l, cfg.lambda_disc)?;
            Some(l)
        } else {
            None
        };
        let (mut loss_cl_source, mut loss_cl_target, mut loss_nncl) = (None, None, None);
        if contrast {
            let zq_target = zq_target.expect("target embedded when adapting");
            if cfg.lambda_cl > 0.0 {
                let proj_s = model.projector.forward(&mut g, &q_vars, zq_source, true)?;
                let proj_t = model.projector.forward(&mut g, &q_vars, zq_target, true)?;
                let ls = infonce_loss(&mut g, proj_s, &keys_source, &model.queue_source, cfg.temperature)?;
                let lt = infonce_loss(&mut g, proj_t, &keys_target, &model.queue_target, cfg.temperature)?;
                let both = g.add(ls, lt)?;
                weighted(&mut g, &mut total, both, cfg.lambda_cl)?;
                loss_cl_source = Some(ls);
                loss_cl_target = Some(lt);
            }
            if cfg.lambda_nncl > 0.0 {
                // nearest neighbors live in the encoder space, not the projector's
                let ns = g.l2_normalize(zq_source)?;
                let nt = g.l2_normalize(zq_target)?;
                let l = nncl_loss(&mut g, nt, &keys_target, ns, cfg.temperature)?;
                weighted(&mut g, &mut total, l, cfg.lambda_nncl)?;
                loss_nncl = Some(l);
            }
        }
        let read = |v: Option<Var>| v.map_or(0.0, |v| g.value(v).item());
        let report = StepReport {
            step,
            loss_c: g.value(loss_c).item(),
            loss_disc: read(loss_disc),
            loss_cl_source: read(loss_cl_source),
            loss_cl_target: read(loss_cl_target),
            loss_nncl: read(loss_nncl),
            loss_total: g.value(total).item(),
            val_metric: None,
            wall_ms: 0.0,
        };
        let terms = [
            report.loss_c,
            report.loss_disc,
            report.loss_cl_source,
            report.loss_cl_target,
            report.loss_nncl,
            report.loss_total,
        ];
        if terms.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "step {step}: L_c={} L_disc={} L_CL_s={} L_CL_t={} L_NNCL={} L_total={}",
                terms[0], terms[1], terms[2], terms[3], terms[4], terms[5]
            )));
        }

        // 4. backward
        let grads = g.backward(total)?;
        self.gradient_buffers = grads.allocated();
        let grads = [
            collect_grads(&grads, &f_vars)?,
            collect_grads(&grads, &c_vars)?,
            collect_grads(&grads, &d_vars)?,
            collect_grads(&grads, &q_vars)?,
        ];
        let zc_value = g.value(zc_source).clone();
        drop(g);

        // 5. Adam on F, C, D, Q
        let model = &mut self.model;
        let stores = [
            model.encoder.params_mut(),
            model.classifier.params_mut(),
            model.discriminator.params_mut(),
            model.projector.params_mut(),
        ];
        for ((opt, store), grad) in self.optimizers.iter_mut().zip(stores).zip(&grads) {
            opt.step(store, grad)?;
        }
        model.classifier.observe_batch(&zc_value);

        // 6. momentum update of F̃
        momentum_update(model.momentum_encoder.params_mut(), model.encoder.params(), cfg.momentum)?;

        // 7. enqueue keys
        if contrast {
            model.queue_source.enqueue_batch(&keys_source)?;
            model.queue_target.enqueue_batch(&keys_target)?;
        }

        self.step = step;
        Ok(StepReport {
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
            ..report
        })
    }

    fn views<R: Rng>(&self, batch: &[&TimeSeriesSample], rng: &mut R) -> Result<(Tensor, Tensor)> {
        let mut queries = Vec::with_capacity(batch.len());
        let mut keys = Vec::with_capacity(batch.len());
        for s in batch {
            let view = s.view();
            let mut pair: (View, View) = self.augmenter.make_views(&view, rng);
            // A view with every value masked carries no signal and embeds to
            // exactly zero at initialization, which cannot be normalized.
            // Redraw it; after a few failures fall back to the clean series.
            for attempt in 0.. {
                let blank = |v: &View| v.values.data().iter().all(|&x| x == 0.0);
                if !(blank(&pair.0) || blank(&pair.1)) {
                    break;
                }
                if attempt == MAX_VIEW_REDRAWS {
                    pair = (view.clone(), view.clone());
                    break;
                }
                pair = self.augmenter.make_views(&view, rng);
            }
            queries.push(pair.0.values);
            keys.push(pair.1.values);
        }
        let stack = |v: &[Tensor]| Tensor::stack(&v.iter().collect::<Vec<_>>());
        Ok((stack(&queries)?, stack(&keys)?))
    }
}

fn stack_values(batch: &[&TimeSeriesSample]) -> Result<Tensor> {
    Tensor::stack(&batch.iter().map(|s| &s.values).collect::<Vec<_>>())
}

fn normalized_keys(z: &Tensor) -> Result<Tensor> {
    let mut out = z.clone();
    let d = z.cols();
    for (i, row) in out.data_mut().chunks_mut(d).enumerate() {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm <= 1e-12 {
            return Err(Error::DegenerateEmbedding(format!(
                "momentum-encoder key {i} has norm {norm:e}"
            )));
        }
        row.iter_mut().for_each(|v| *v /= norm);
    }
    Ok(out)
}

/// Patience-based early stopping on a higher-is-better metric.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    patience: usize,
    best: Option<(u64, f64)>,
    stale: usize,
}

impl EarlyStopping {
    /// `patience = 0` never stops.
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: None,
            stale: 0,
        }
    }

    pub fn best(&self) -> Option<(u64, f64)> {
        self.best
    }

    /// Records an evaluation; returns `(improved, stop)`.
    pub fn observe(&mut self, step: u64, metric: f64) -> (bool, bool) {
        let improved = match self.best {
            None => true,
            Some((_, b)) => metric > b,
        };
        if improved {
            self.best = Some((step, metric));
            self.stale = 0;
        } else {
            self.stale += 1;
        }
        (improved, self.patience > 0 && self.stale >= self.patience)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Model at the best source-validation evaluation.
    pub model: CludaModel,
    pub best_step: u64,
    pub best_metric: f64,
    pub steps_run: u64,
    /// Every step's report; evaluation steps carry `val_metric`.
    pub reports: Vec<StepReport>,
}

impl TrainOutcome {
    pub fn evaluations(&self) -> impl Iterator<Item = &StepReport> {
        self.reports.iter().filter(|r| r.val_metric.is_some())
    }
}

pub fn evaluate(model: &CludaModel, data: &Dataset, task: TaskKind) -> Result<MetricReport> {
    if data.is_empty() {
        return Err(Error::contract("cannot evaluate on an empty dataset"));
    }
    let indices: Vec<usize> = (0..data.len()).collect();
    let probs = model.predict(&data.batch_values(&indices)?)?;
    ScoredPredictions {
        probs,
        labels: data.labels()?,
    }
    .evaluate(task)
}

/// Full training loop with equal-size source/target batches drawn with
/// replacement, periodic source-validation evaluation and early stopping.
/// When `history` is given, one JSON line per evaluation is written to it.
pub fn train(
    config: &TrainConfig,
    source_train: &Dataset,
    source_val: &Dataset,
    target_train: &Dataset,
    mut history: Option<&mut dyn Write>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if source_train.is_empty() || source_val.is_empty() {
        return Err(Error::contract("source train and validation sets must be non-empty"));
    }
    if config.uses_target() && target_train.is_empty() {
        return Err(Error::contract("target train set must be non-empty"));
    }
    source_train.labels()?;
    source_val.labels()?;
    for (name, d) in [("source train", source_train), ("source val", source_val), ("target train", target_train)] {
        if !d.is_empty() && d.channels() != config.tcn.in_channels {
            return Err(Error::dim(format!(
                "{name} has {} channels, model expects {}",
                d.channels(),
                config.tcn.in_channels
            )));
        }
    }

    let mut trainer = Trainer::new(config.clone())?;
    let mut stopper = EarlyStopping::new(config.patience);
    let mut best_model = trainer.model().clone();
    let mut reports = Vec::new();
    for step in 1..=config.max_steps {
        let mut r = rng::derive(config.seed, &[BATCH_STREAM, step]);
        let source: Vec<&TimeSeriesSample> = (0..config.batch_size)
            .map(|_| &source_train.samples[r.random_range(0..source_train.len())])
            .collect();
        let target: Vec<&TimeSeriesSample> = if config.uses_target() {
            (0..config.batch_size)
                .map(|_| &target_train.samples[r.random_range(0..target_train.len())])
                .collect()
        } else {
            Vec::new()
        };
        let mut report = trainer.train_step(&source, &target)?;
        if step % config.eval_interval == 0 || step == config.max_steps {
            let metric = evaluate(trainer.model(), source_val, config.task)?.primary();
            report.val_metric = Some(metric);
            log::info!(
                "step {step}: L_total={:.4} L_c={:.4} val={metric:.4}",
                report.loss_total,
                report.loss_c
            );
            if let Some(w) = history.as_deref_mut() {
                serde_json::to_writer(&mut *w, &report)?;
                w.write_all(b"\n")?;
            }
            let (improved, stop) = stopper.observe(step, metric);
            if improved {
                best_model = trainer.model().clone();
            }
            reports.push(report);
            if stop {
                log::info!("early stop at step {step}");
                break;
            }
        } else {
            reports.push(report);
        }
    }
    let (best_step, best_metric) = stopper.best().unwrap_or((0, f64::NAN));
    Ok(TrainOutcome {
        model: best_model,
        best_step,
        best_metric,
        steps_run: trainer.steps_taken(),
        reports,
    })
}

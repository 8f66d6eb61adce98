//! Self-checks run by `cluda verify` and the acceptance suite: finite-
//! difference gradient checks for every tape operation and composed loss,
//! hand-evaluated loss values, the gradient-reversal sign, and queue /
//! momentum-encoder / augmentation invariants.

use std::collections::VecDeque;
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{AugmentConfig, Augmenter, View};
use crate::contrastive::{infonce_loss, nearest_neighbor_source, nncl_loss, EmbeddingQueue};
use crate::data::{preprocess, synth_generate, Dataset, SynthConfig, TimeSeriesSample, SOURCE, TARGET};
use crate::error::{Error, Result};
use crate::nn::{MlpHead, TcnConfig};
use crate::pipeline::{domain_loss, prediction_loss, CludaModel, TrainConfig, Trainer};
use crate::rng::{self, SeededRng};
use crate::tensor::{Graph, Tensor, Var};

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Largest accepted relative error between adjoint and finite difference.
pub const FD_TOLERANCE: f64 = 1e-4;
/// Instances whose ReLU inputs (or nearest-neighbor similarity gaps) come
/// closer than this to a non-differentiable point are redrawn.
const KINK_MARGIN: f64 = 1e-3;
const MAX_REDRAWS: usize = 200;
const QUEUE_NORM_TOL: f64 = 1e-9;

/// Outcome of one named check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub instances: usize,
    pub detail: String,
}

impl Check {
    fn new(name: &str, passed: bool, instances: usize, detail: String) -> Self {
        Check {
            name: name.into(),
            passed,
            instances,
            detail,
        }
    }

    fn from_result(name: &str, instances: usize, r: Result<String>) -> Self {
        match r {
            Ok(detail) => Check::new(name, true, instances, detail),
            Err(e) => Check::new(name, false, instances, e.to_string()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub checks: Vec<Check>,
    pub seconds: f64,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| !c.passed)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VerifyOptions {
    pub seed: u64,
    /// Random instances per gradient / property check.
    pub instances: usize,
    /// Test hook: flips the reversal multiplier inside the reversal check so
    /// the suite can be shown to catch it.
    pub break_reversal: bool,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        VerifyOptions {
            seed: 0,
            instances: 100,
            break_reversal: false,
        }
    }
}

/// Every check, in a fixed order.
pub fn run_all(opts: VerifyOptions) -> VerifyReport {
    let started = Instant::now();
    let mut checks = gradient_checks(opts);
    checks.extend(loss_oracles());
    checks.push(reversal_check(opts));
    checks.extend(queue_checks(opts));
    checks.push(momentum_encoder_check(opts, 100));
    checks.push(augmentation_check(opts));
    VerifyReport {
        checks,
        seconds: started.elapsed().as_secs_f64(),
    }
}

/// `|a − n| / max(1, |a|, |n|)`: relative for large values, absolute near
/// zero where a pure ratio is meaningless.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

// ---------------------------------------------------------------------------
// finite differences

/// A scalar objective built on a graph. When part of it flows through a
/// reversal layer, `reversed = (term, weight)` names that term: the expected
/// gradient for inputs upstream of the reversal is then
/// `∇loss − 2·weight·∇term`.
struct Built {
    loss: Var,
    reversed: Option<(Var, f64)>,
    /// Distance to the nearest non-differentiable point other than ReLU
    /// kinks (which the graph reports itself).
    margin: f64,
}

impl Built {
    fn plain(loss: Var) -> Self {
        Built {
            loss,
            reversed: None,
            margin: f64::INFINITY,
        }
    }
}

type Builder = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Built>>;

/// One random problem: differentiable inputs, which of them sit upstream of
/// a reversal layer, and the objective.
struct Instance {
    inputs: Vec<Tensor>,
    upstream: Vec<bool>,
    build: Builder,
    /// Objective for the finite differences when it differs from `build`
    /// (only in what the adjoint treats as constant).
    oracle: Option<Builder>,
}

impl Instance {
    fn new(inputs: Vec<Tensor>, build: Builder) -> Self {
        let upstream = vec![false; inputs.len()];
        Instance {
            inputs,
            upstream,
            build,
            oracle: None,
        }
    }

    fn evaluate(&self, inputs: &[Tensor]) -> Result<(f64, f64)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
        let b = self.oracle.as_ref().unwrap_or(&self.build)(&mut g, &vars)?;
        let rev = b.reversed.map_or(0.0, |(v, _)| g.value(v).item());
        Ok((g.value(b.loss).item(), rev))
    }

    /// Adjoint gradients, plus the kink margin at this point.
    fn analytic(&self) -> Result<(Vec<Tensor>, f64)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = self.inputs.iter().map(|t| g.param(t.clone())).collect();
        let b = (self.build)(&mut g, &vars)?;
        let margin = b.margin.min(g.relu_margin());
        let grads = g.backward(b.loss)?;
        let out = vars
            .iter()
            .map(|&v| grads.get(v).cloned().ok_or_else(|| Error::contract("missing input gradient")))
            .collect::<Result<_>>()?;
        Ok((out, margin))
    }

    fn reversal_weight(&self) -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = self.inputs.iter().map(|t| g.param(t.clone())).collect();
        Ok((self.build)(&mut g, &vars)?.reversed.map_or(0.0, |(_, w)| w))
    }

    /// Largest relative error over every input entry.
    fn max_error(&self, analytic: &[Tensor]) -> Result<f64> {
        let w = self.reversal_weight()?;
        let mut worst = 0.0f64;
        let mut inputs = self.inputs.clone();
        for (i, grad) in analytic.iter().enumerate() {
            for j in 0..inputs[i].len() {
                let x = inputs[i].data()[j];
                inputs[i].data_mut()[j] = x + FD_STEP;
                let (lp, rp) = self.evaluate(&inputs)?;
                inputs[i].data_mut()[j] = x - FD_STEP;
                let (lm, rm) = self.evaluate(&inputs)?;
                inputs[i].data_mut()[j] = x;
                let mut numeric = (lp - lm) / (2.0 * FD_STEP);
                if self.upstream[i] {
                    numeric -= 2.0 * w * (rp - rm) / (2.0 * FD_STEP);
                }
                worst = worst.max(relative_error(grad.data()[j], numeric));
            }
        }
        Ok(worst)
    }
}

/// Draws `opts.instances` problems from `make` (redrawing those too close to
/// a kink) and checks each against central differences.
fn fd_check(
    name: &str,
    opts: VerifyOptions,
    stream: u64,
    make: impl Fn(&mut SeededRng) -> Result<Instance>,
) -> Check {
    let run = || -> Result<String> {
        let mut r = rng::derive(opts.seed, &[0xfd, stream]);
        let mut worst = 0.0f64;
        let mut redraws = 0;
        for k in 0..opts.instances {
            let mut attempt = 0;
            let (inst, grads) = loop {
                attempt += 1;
                let drawn = make(&mut r).and_then(|inst| inst.analytic().map(|a| (inst, a)));
                match drawn {
                    Ok((inst, (grads, margin))) if margin >= KINK_MARGIN => break (inst, grads),
                    // a degenerate draw (e.g. an all-zero embedding) is redrawn too
                    Ok(_) | Err(Error::DegenerateEmbedding(_)) if attempt < MAX_REDRAWS => redraws += 1,
                    Ok(_) => return Err(Error::contract(format!("instance {k}: no kink-free draw"))),
                    Err(e) => return Err(e),
                }
            };
            let err = inst.max_error(&grads)?;
            if !(err < FD_TOLERANCE) {
                return Err(Error::contract(format!(
                    "instance {k}: max relative error {err:.3e} >= {FD_TOLERANCE:e}"
                )));
            }
            worst = worst.max(err);
        }
        Ok(format!("max relative error {worst:.2e} ({redraws} redraws)"))
    };
    Check::from_result(&format!("grad:{name}"), opts.instances, run())
}

fn uniform(r: &mut SeededRng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.random_range(lo..hi)).collect()).expect("sized")
}

fn normal(r: &mut SeededRng, shape: &[usize]) -> Tensor {
    uniform(r, shape, -1.0, 1.0)
}

fn unit_rows(r: &mut SeededRng, n: usize, d: usize) -> Tensor {
    loop {
        let t = normal(r, &[n, d]);
        let ok = (0..n).all(|i| t.row(i).iter().map(|x| x * x).sum::<f64>() > 0.01);
        if ok {
            return normalize_rows(&t);
        }
    }
}

fn normalize_rows(t: &Tensor) -> Tensor {
    let d = t.cols();
    let mut out = t.clone();
    for row in out.data_mut().chunks_mut(d) {
        let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        row.iter_mut().for_each(|x| *x /= n);
    }
    out
}

fn dim(r: &mut SeededRng, lo: usize, hi: usize) -> usize {
    r.random_range(lo..=hi)
}

/// `Σ y ⊙ w` for a fixed random `w`: a generic scalar readout of `y`.
fn readout(g: &mut Graph, y: Var, w: &Tensor) -> Result<Var> {
    let w = g.constant(w.clone());
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

/// Single-output op check: inputs drawn by `inputs`, output projected with a
/// random readout of the output's shape.
fn unary_like(
    inputs: Vec<Tensor>,
    out_shape: Vec<usize>,
    r: &mut SeededRng,
    op: impl Fn(&mut Graph, &[Var]) -> Result<Var> + 'static,
) -> Instance {
    let w = normal(r, &out_shape);
    Instance::new(
        inputs,
        Box::new(move |g, v| {
            let y = op(g, v)?;
            Ok(Built::plain(readout(g, y, &w)?))
        }),
    )
}

/// Finite-difference checks for every differentiable tape operation.
pub fn op_gradient_checks(opts: VerifyOptions) -> Vec<Check> {
    let mut out = Vec::new();
    let mut check = |name: &str, make: &dyn Fn(&mut SeededRng) -> Result<Instance>| {
        let stream = out.len() as u64;
        out.push(fd_check(name, opts, stream, make));
    };
    check("matmul", &|r| {
        let (n, k, m) = (dim(r, 1, 4), dim(r, 1, 4), dim(r, 1, 4));
        let inputs = vec![normal(r, &[n, k]), normal(r, &[k, m])];
        Ok(unary_like(inputs, vec![n, m], r, |g, v| g.matmul(v[0], v[1])))
    });
    check("transpose", &|r| {
        let (n, m) = (dim(r, 1, 4), dim(r, 1, 4));
        Ok(unary_like(vec![normal(r, &[n, m])], vec![m, n], r, |g, v| g.transpose(v[0])))
    });
    check("conv1d", &|r| {
        let (n, ci, co, k, t, d) = (dim(r, 1, 3), dim(r, 1, 3), dim(r, 1, 3), dim(r, 1, 3), dim(r, 1, 6), dim(r, 1, 3));
        let batched = r.random_bool(0.5);
        let (x, out) = if batched {
            (normal(r, &[n, ci, t]), vec![n, co, t])
        } else {
            (normal(r, &[ci, t]), vec![co, t])
        };
        let inputs = vec![x, normal(r, &[co, ci, k]), normal(r, &[co])];
        Ok(unary_like(inputs, out, r, move |g, v| g.conv1d(v[0], v[1], v[2], d)))
    });
    for (name, which) in [("add", 0), ("sub", 1), ("mul", 2)] {
        check(name, &move |r| {
            let shape = vec![dim(r, 1, 3), dim(r, 1, 4)];
            let inputs = vec![normal(r, &shape), normal(r, &shape)];
            Ok(unary_like(inputs, shape, r, move |g, v| match which {
                0 => g.add(v[0], v[1]),
                1 => g.sub(v[0], v[1]),
                _ => g.mul(v[0], v[1]),
            }))
        });
    }
    check("scale", &|r| {
        let shape = vec![dim(r, 1, 3), dim(r, 1, 4)];
        let c = r.random_range(-3.0..3.0);
        Ok(unary_like(vec![normal(r, &shape)], shape, r, move |g, v| Ok(g.scale(v[0], c))))
    });
    check("neg", &|r| {
        let shape = vec![dim(r, 1, 3), dim(r, 1, 4)];
        Ok(unary_like(vec![normal(r, &shape)], shape, r, |g, v| Ok(g.neg(v[0]))))
    });
    check("relu", &|r| {
        let shape = vec![dim(r, 1, 3), dim(r, 1, 4)];
        Ok(unary_like(vec![normal(r, &shape)], shape, r, |g, v| Ok(g.relu(v[0]))))
    });
    check("exp", &|r| {
        let shape = vec![dim(r, 1, 3), dim(r, 1, 4)];
        let x = uniform(r, &shape, -2.0, 2.0);
        Ok(unary_like(vec![x], shape, r, |g, v| Ok(g.exp(v[0]))))
    });
    check("log", &|r| {
        let shape = vec![dim(r, 1, 3), dim(r, 1, 4)];
        let x = uniform(r, &shape, 0.3, 3.0);
        Ok(unary_like(vec![x], shape, r, |g, v| g.log(v[0])))
    });
    check("add_row_bias", &|r| {
        let (n, d) = (dim(r, 1, 4), dim(r, 1, 4));
        let inputs = vec![normal(r, &[n, d]), normal(r, &[d])];
        Ok(unary_like(inputs, vec![n, d], r, |g, v| g.add_row_bias(v[0], v[1])))
    });
    check("affine", &|r| {
        let (n, i, o) = (dim(r, 1, 4), dim(r, 1, 4), dim(r, 1, 4));
        let inputs = vec![normal(r, &[n, i]), normal(r, &[i, o]), normal(r, &[o])];
        Ok(unary_like(inputs, vec![n, o], r, |g, v| g.affine(v[0], v[1], v[2])))
    });
    check("softmax_cross_entropy", &|r| {
        let (n, c) = (dim(r, 1, 4), dim(r, 2, 4));
        let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..c)).collect();
        let x = uniform(r, &[n, c], -3.0, 3.0);
        Ok(Instance::new(
            vec![x],
            Box::new(move |g, v| Ok(Built::plain(g.softmax_cross_entropy(v[0], &labels)?))),
        ))
    });
    check("l2_normalize", &|r| {
        let (n, d) = (dim(r, 1, 4), dim(r, 1, 4));
        let x = loop {
            let x = normal(r, &[n, d]);
            if (0..n).all(|i| x.row(i).iter().map(|v| v * v).sum::<f64>() > 0.05) {
                break x;
            }
        };
        Ok(unary_like(vec![x], vec![n, d], r, |g, v| g.l2_normalize(v[0])))
    });
    check("grad_reverse", &|r| {
        let shape = vec![dim(r, 1, 3), dim(r, 1, 4)];
        let w = normal(r, &shape);
        let mut inst = Instance::new(
            vec![normal(r, &shape)],
            Box::new(move |g, v| {
                let y = g.grad_reverse(v[0]);
                let l = readout(g, y, &w)?;
                Ok(Built {
                    loss: l,
                    reversed: Some((l, 1.0)),
                    margin: f64::INFINITY,
                })
            }),
        );
        inst.upstream = vec![true];
        Ok(inst)
    });
    check("last_step", &|r| {
        let (n, c, t) = (dim(r, 1, 3), dim(r, 1, 3), dim(r, 1, 5));
        let (x, out) = if r.random_bool(0.5) {
            (normal(r, &[n, c, t]), vec![n, c])
        } else {
            (normal(r, &[c, t]), vec![c])
        };
        Ok(unary_like(vec![x], out, r, |g, v| g.last_step(v[0])))
    });
    check("row_dot", &|r| {
        let (n, d) = (dim(r, 1, 4), dim(r, 1, 4));
        let inputs = vec![normal(r, &[n, d]), normal(r, &[n, d])];
        Ok(unary_like(inputs, vec![n, 1], r, |g, v| g.row_dot(v[0], v[1])))
    });
    check("concat_cols", &|r| {
        let n = dim(r, 1, 3);
        let widths: Vec<usize> = (0..dim(r, 1, 3)).map(|_| dim(r, 1, 3)).collect();
        let total = widths.iter().sum();
        let inputs = widths.iter().map(|&w| normal(r, &[n, w])).collect();
        Ok(unary_like(inputs, vec![n, total], r, |g, v| g.concat_cols(v)))
    });
    check("logsumexp_rows", &|r| {
        let (n, c) = (dim(r, 1, 4), dim(r, 1, 5));
        let x = uniform(r, &[n, c], -3.0, 3.0);
        Ok(unary_like(vec![x], vec![n, 1], r, |g, v| g.logsumexp_rows(v[0])))
    });
    check("sum", &|r| {
        let shape = vec![dim(r, 1, 3), dim(r, 1, 4)];
        Ok(unary_like(vec![normal(r, &shape)], vec![], r, |g, v| Ok(g.sum(v[0]))))
    });
    check("mean", &|r| {
        let shape = vec![dim(r, 1, 3), dim(r, 1, 4)];
        Ok(unary_like(vec![normal(r, &shape)], vec![], r, |g, v| Ok(g.mean(v[0]))))
    });
    check("standardize_cols", &|r| {
        let (n, d) = (dim(r, 2, 5), dim(r, 1, 3));
        Ok(unary_like(vec![normal(r, &[n, d])], vec![n, d], r, |g, v| {
            g.standardize_cols(v[0], 1e-5)
        }))
    });
    out
}

// ---------------------------------------------------------------------------
// composed losses on a small random model

const IN_CHANNELS: usize = 2;
const HISTORY: usize = 6;

fn small_config(r: &mut SeededRng) -> TrainConfig {
    TrainConfig {
        tcn: TcnConfig {
            in_channels: IN_CHANNELS,
            channels: 3,
            kernel_size: 3,
            num_layers: 2,
            dilations: vec![1, 2],
            dropout_rate: 0.2,
            max_history: HISTORY,
        },
        hidden_dim: 4,
        batch_norm: r.random_bool(0.5),
        augment: AugmentConfig {
            cutout_window: 2,
            ..AugmentConfig::default()
        },
        lambda_disc: r.random_range(0.1..1.0),
        lambda_cl: r.random_range(0.05..0.2),
        lambda_nncl: r.random_range(0.05..0.2),
        temperature: r.random_range(0.1..1.0),
        batch_size: 3,
        queue_size: 5,
        seed: r.random(),
        ..TrainConfig::default()
    }
}

/// Trainable tensors of the model in a fixed order: F, C, D, Q. Returns the
/// tensors and the index ranges of each network.
fn model_inputs(m: &CludaModel) -> (Vec<Tensor>, [std::ops::Range<usize>; 4]) {
    let mut all = Vec::new();
    let mut ranges = Vec::new();
    for store in [m.encoder.params(), m.classifier.params(), m.discriminator.params(), m.projector.params()] {
        let start = all.len();
        all.extend(store.tensors().cloned());
        ranges.push(start..all.len());
    }
    (all, ranges.try_into().expect("four networks"))
}

/// Embeds `x` with `F` using a dropout mask that is identical on every call.
fn encode(g: &mut Graph, m: &CludaModel, f: &[Var], x: &Tensor, dropout_seed: u64) -> Result<Var> {
    let xv = g.constant(x.clone());
    let mut dr = rng::seeded(dropout_seed);
    m.encoder.forward(g, f, xv, Some(&mut dr))
}

/// Smallest gap between the best and second-best source similarity over all
/// target keys: how far the nearest-neighbor choice is from flipping.
fn neighbor_gap(keys: &Tensor, sources: &Tensor) -> f64 {
    let mut gap = f64::INFINITY;
    for i in 0..keys.rows() {
        let mut sims: Vec<f64> = (0..sources.rows())
            .map(|j| sources.row(j).iter().zip(keys.row(i)).map(|(a, b)| a * b).sum())
            .collect();
        sims.sort_by(|a, b| b.total_cmp(a));
        if sims.len() > 1 {
            gap = gap.min(sims[0] - sims[1]);
        }
    }
    gap
}

#[derive(Clone, Copy, PartialEq)]
enum Composed {
    Prediction,
    Domain,
    InfoNce,
    Nncl,
    Total,
}

/// Everything one composed-loss instance needs besides the parameters.
struct Problem {
    which: Composed,
    cfg: TrainConfig,
    model: CludaModel,
    xs: Tensor,
    xt: Tensor,
    labels: Vec<usize>,
    keys: [Tensor; 2],
    queues: [EmbeddingQueue; 2],
    dropout_seeds: [u64; 2],
    nets: [std::ops::Range<usize>; 4],
}

impl Problem {
    /// Builds the objective. With `frozen` neighbors the NNCL term uses them
    /// as fixed positives instead of searching: that is the function whose
    /// finite differences the (detached-neighbor) adjoint must match.
    fn build(&self, g: &mut Graph, v: &[Var], frozen: Option<&Tensor>) -> Result<Built> {
        let [f, c, d, q] = self.nets.clone();
        let (fv, cv, dv, qv) = (&v[f], &v[c], &v[d], &v[q]);
        let (m, tau) = (&self.model, self.cfg.temperature);
        let zs = encode(g, m, fv, &self.xs, self.dropout_seeds[0])?;
        let zt = encode(g, m, fv, &self.xt, self.dropout_seeds[1])?;
        let infonce = |g: &mut Graph| -> Result<Var> {
            let ps = m.projector.forward(g, qv, zs, true)?;
            let pt = m.projector.forward(g, qv, zt, true)?;
            let ls = infonce_loss(g, ps, &self.keys[0], &self.queues[0], tau)?;
            let lt = infonce_loss(g, pt, &self.keys[1], &self.queues[1], tau)?;
            g.add(ls, lt)
        };
        let built = match self.which {
            Composed::Prediction => Built::plain(prediction_loss(g, &m.classifier, cv, zs, &self.labels, true)?),
            Composed::Domain => {
                let l = domain_loss(g, &m.discriminator, dv, zs, zt)?;
                Built {
                    loss: l,
                    reversed: Some((l, 1.0)),
                    margin: f64::INFINITY,
                }
            }
            Composed::InfoNce => Built::plain(infonce(g)?),
            Composed::Nncl | Composed::Total => {
                let ns = g.l2_normalize(zs)?;
                let nt = g.l2_normalize(zt)?;
                let margin = neighbor_gap(&self.keys[1], g.value(ns));
                let nncl = match frozen {
                    None => nncl_loss(g, nt, &self.keys[1], ns, tau)?,
                    Some(nb) => {
                        let nb = g.constant(nb.clone());
                        let pos = g.row_dot(nt, nb)?;
                        let ns_t = g.transpose(ns)?;
                        let sims = g.matmul(nt, ns_t)?;
                        let sims = g.scale(sims, 1.0 / tau);
                        let lse = g.logsumexp_rows(sims)?;
                        let pos = g.scale(pos, 1.0 / tau);
                        let per_row = g.sub(lse, pos)?;
                        g.mean(per_row)
                    }
                };
                if self.which == Composed::Nncl {
                    Built {
                        loss: nncl,
                        reversed: None,
                        margin,
                    }
                } else {
                    let lc = prediction_loss(g, &m.classifier, cv, zs, &self.labels, true)?;
                    let disc = domain_loss(g, &m.discriminator, dv, zs, zt)?;
                    let cl = infonce(g)?;
                    let terms = [
                        g.scale(disc, self.cfg.lambda_disc),
                        g.scale(cl, self.cfg.lambda_cl),
                        g.scale(nncl, self.cfg.lambda_nncl),
                    ];
                    let mut total = lc;
                    for t in terms {
                        total = g.add(total, t)?;
                    }
                    Built {
                        loss: total,
                        reversed: Some((disc, self.cfg.lambda_disc)),
                        margin,
                    }
                }
            }
        };
        Ok(built)
    }

    /// Source-query neighbors of each target key at parameters `inputs`.
    fn neighbors(&self, inputs: &[Tensor]) -> Result<Tensor> {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let zs = encode(&mut g, &self.model, &vars[self.nets[0].clone()], &self.xs, self.dropout_seeds[0])?;
        let ns = g.l2_normalize(zs)?;
        let sources = g.value(ns);
        let mut data = Vec::with_capacity(self.keys[1].len());
        for i in 0..self.keys[1].rows() {
            data.extend(nearest_neighbor_source(self.keys[1].row(i), sources)?.1);
        }
        Tensor::new(self.keys[1].shape().to_vec(), data)
    }
}

fn composed_instance(r: &mut SeededRng, which: Composed) -> Result<Instance> {
    let cfg = small_config(r);
    let model = CludaModel::new(&cfg)?;
    let n = dim(r, 2, 4);
    let xs = normal(r, &[n, IN_CHANNELS, HISTORY]);
    let xt = normal(r, &[n, IN_CHANNELS, HISTORY]);
    let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..2)).collect();
    let dim_z = model.encoder.embedding_dim();
    let keys = [unit_rows(r, n, dim_z), unit_rows(r, n, dim_z)];
    let mut queues = [model.queue_source.clone(), model.queue_target.clone()];
    for q in &mut queues {
        for _ in 0..dim(r, 0, 3) {
            let rows = dim(r, 1, 3);
            q.enqueue_batch(&unit_rows(r, rows, dim_z))?;
        }
    }
    let (mut inputs, nets) = model_inputs(&model);
    // move off the initialization's special points (zero biases)
    for t in &mut inputs {
        t.data_mut().iter_mut().for_each(|x| *x += r.random_range(-0.2..0.2));
    }
    let upstream: Vec<bool> = (0..inputs.len()).map(|i| nets[0].contains(&i)).collect();
    let problem = std::rc::Rc::new(Problem {
        which,
        cfg,
        model,
        xs,
        xt,
        labels,
        keys,
        queues,
        dropout_seeds: [r.random(), r.random()],
        nets,
    });
    let frozen = match which {
        Composed::Nncl | Composed::Total => Some(problem.neighbors(&inputs)?),
        _ => None,
    };
    let p = problem.clone();
    let mut inst = Instance::new(inputs, Box::new(move |g, v| p.build(g, v, None)));
    inst.oracle = Some(Box::new(move |g, v| problem.build(g, v, frozen.as_ref())));
    inst.upstream = upstream;
    Ok(inst)
}

/// Finite-difference checks of the prediction, domain, InfoNCE, NNCL and
/// total losses with respect to every trainable parameter.
pub fn composed_gradient_checks(opts: VerifyOptions) -> Vec<Check> {
    [
        ("prediction_loss", Composed::Prediction),
        ("domain_loss", Composed::Domain),
        ("infonce_loss", Composed::InfoNce),
        ("nncl_loss", Composed::Nncl),
        ("total_loss", Composed::Total),
    ]
    .into_iter()
    .enumerate()
    .map(|(i, (name, which))| fd_check(name, opts, 0x100 + i as u64, |r| composed_instance(r, which)))
    .collect()
}

pub fn gradient_checks(opts: VerifyOptions) -> Vec<Check> {
    let mut out = op_gradient_checks(opts);
    out.extend(composed_gradient_checks(opts));
    out
}

// ---------------------------------------------------------------------------
// hand oracles

fn expect_close(name: &str, got: Result<f64>, want: f64, tol: f64) -> Check {
    let r = got.and_then(|v| {
        if (v - want).abs() <= tol {
            Ok(format!("{v:.15} (expected {want:.15})"))
        } else {
            Err(Error::contract(format!("got {v:.15}, expected {want:.15} ± {tol:e}")))
        }
    });
    Check::from_result(name, 1, r)
}

/// Loss values evaluated by hand on inputs where they have closed forms.
pub fn loss_oracles() -> Vec<Check> {
    use std::f64::consts::{E, LN_2};
    let infonce = || -> Result<f64> {
        // q = k, one orthogonal negative, τ = 1: logits (1, 0)
        let mut queue = EmbeddingQueue::new(1, 2)?;
        queue.enqueue_batch(&Tensor::from_rows(&[vec![0.0, 1.0]])?)?;
        let mut g = Graph::new();
        let q = g.param(Tensor::from_rows(&[vec![1.0, 0.0]])?);
        let l = infonce_loss(&mut g, q, &Tensor::from_rows(&[vec![1.0, 0.0]])?, &queue, 1.0)?;
        Ok(g.value(l).item())
    };
    let nncl = || -> Result<f64> {
        // a single source query is its own nearest neighbor and the only
        // candidate in the denominator
        let mut g = Graph::new();
        let t = g.param(Tensor::from_rows(&[vec![0.6, 0.8], vec![1.0, 0.0]])?);
        let s = g.param(Tensor::from_rows(&[vec![0.0, 1.0]])?);
        let keys = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]])?;
        let l = nncl_loss(&mut g, t, &keys, s, 0.1)?;
        Ok(g.value(l).item())
    };
    let uniform_ce = || -> Result<f64> {
        let mut g = Graph::new();
        let logits = g.param(Tensor::zeros(&[4, 2]));
        let l = g.softmax_cross_entropy(logits, &[0, 1, 1, 0])?;
        Ok(g.value(l).item())
    };
    let uniform_domain = || -> Result<f64> {
        // zero output layer: D predicts (½, ½) for every embedding
        let mut d = MlpHead::new(3, 4, 2, false, &mut rng::seeded(5));
        for name in ["fc2.weight", "fc2.bias"] {
            if let Some(t) = d.params_mut().get_mut(name) {
                t.data_mut().fill(0.0);
            }
        }
        let mut g = Graph::new();
        let bound = d.params().bind(&mut g, true);
        let mut r = rng::seeded(6);
        let zs = g.param(normal(&mut r, &[5, 3]));
        let zt = g.param(normal(&mut r, &[2, 3]));
        let l = domain_loss(&mut g, &d, &bound, zs, zt)?;
        Ok(g.value(l).item())
    };
    vec![
        expect_close("oracle:infonce_single_pair", infonce(), -(E / (E + 1.0)).ln(), 1e-9),
        expect_close("oracle:nncl_degenerate", nncl(), 0.0, 1e-12),
        expect_close("oracle:uniform_cross_entropy", uniform_ce(), LN_2, 1e-9),
        expect_close("oracle:domain_loss_uniform", uniform_domain(), 2.0 * LN_2, 1e-9),
    ]
}

// ---------------------------------------------------------------------------
// gradient reversal

/// Encoder gradients of the domain loss with the reversal layer are the
/// exact negation of those of the same loss assembled without it, and the
/// discriminator's gradients are unchanged.
pub fn reversal_check(opts: VerifyOptions) -> Check {
    let run = || -> Result<String> {
        let mut r = rng::derive(opts.seed, &[0x4e7]);
        let mut redraws = 0;
        let mut k = 0;
        while k < opts.instances {
            let cfg = small_config(&mut r);
            let model = CludaModel::new(&cfg)?;
            let n = dim(&mut r, 2, 4);
            let xs = normal(&mut r, &[n, IN_CHANNELS, HISTORY]);
            let xt = normal(&mut r, &[n, IN_CHANNELS, HISTORY]);
            let seeds = [r.random::<u64>(), r.random::<u64>()];
            let grads = |reversed: bool| -> Result<(Vec<f64>, Vec<f64>)> {
                let mut g = Graph::new();
                if opts.break_reversal {
                    g.set_reversal_sign(1.0);
                }
                let f = model.encoder.params().bind(&mut g, true);
                let d = model.discriminator.params().bind(&mut g, true);
                let zs = encode(&mut g, &model, &f, &xs, seeds[0])?;
                let zt = encode(&mut g, &model, &f, &xt, seeds[1])?;
                let loss = if reversed {
                    domain_loss(&mut g, &model.discriminator, &d, zs, zt)?
                } else {
                    let mut terms = Vec::new();
                    for (z, domain) in [(zs, SOURCE), (zt, TARGET)] {
                        let logits = model.discriminator.forward(&mut g, &d, z, true)?;
                        terms.push(g.softmax_cross_entropy(logits, &vec![domain as usize; n])?);
                    }
                    g.add(terms[0], terms[1])?
                };
                let gr = g.backward(loss)?;
                let flat = |vars: &[Var]| -> Vec<f64> {
                    vars.iter()
                        .flat_map(|&v| gr.get(v).map(|t| t.data().to_vec()).unwrap_or_default())
                        .collect()
                };
                Ok((flat(&f), flat(&d)))
            };
            let (f_rev, d_rev) = grads(true)?;
            let (f_plain, d_plain) = grads(false)?;
            // all ReLUs dead: negation would hold vacuously, so redraw
            if f_plain.iter().all(|&x| x == 0.0) {
                if redraws == MAX_REDRAWS {
                    return Err(Error::contract(format!("instance {k}: encoder gradient is zero")));
                }
                redraws += 1;
                continue;
            }
            if let Some(i) = (0..f_rev.len()).find(|&i| f_rev[i] != -f_plain[i]) {
                return Err(Error::contract(format!(
                    "instance {k}: encoder gradient entry {i} is {} with reversal and {} without",
                    f_rev[i], f_plain[i]
                )));
            }
            if d_rev != d_plain {
                return Err(Error::contract(format!("instance {k}: discriminator gradients differ")));
            }
            k += 1;
        }
        Ok(format!(
            "encoder gradients exactly negated, discriminator gradients identical ({redraws} dead draws redrawn)"
        ))
    };
    Check::from_result("reversal:exact_negation", opts.instances, run())
}

// ---------------------------------------------------------------------------
// queue, momentum encoder, augmentation

fn max_norm_deviation(t: &Tensor) -> f64 {
    (0..t.rows())
        .map(|i| (t.row(i).iter().map(|x| x * x).sum::<f64>().sqrt() - 1.0).abs())
        .fold(0.0, f64::max)
}

/// FIFO behavior against a double-ended-queue trace, and unit norms.
pub fn queue_checks(opts: VerifyOptions) -> Vec<Check> {
    let fifo = || -> Result<String> {
        let mut r = rng::derive(opts.seed, &[0x9e]);
        let mut pushes = 0;
        let mut worst = 0.0f64;
        for k in 0..opts.instances {
            let (cap, d) = (dim(&mut r, 1, 12), dim(&mut r, 1, 4));
            let mut queue = EmbeddingQueue::new(cap, d)?;
            let mut oracle: VecDeque<Vec<f64>> = VecDeque::new();
            for _ in 0..dim(&mut r, 1, 20) {
                let rows = dim(&mut r, 1, cap);
                let keys = unit_rows(&mut r, rows, d);
                queue.enqueue_batch(&keys)?;
                for i in 0..keys.rows() {
                    oracle.push_back(keys.row(i).to_vec());
                    if oracle.len() > cap {
                        oracle.pop_front();
                    }
                }
                pushes += keys.rows();
                let entries = queue.entries();
                let expected: Vec<f64> = oracle.iter().flatten().copied().collect();
                if queue.filled() != oracle.len() || entries.data() != expected.as_slice() {
                    return Err(Error::contract(format!(
                        "instance {k}: queue contents diverge from the FIFO trace"
                    )));
                }
                worst = worst.max(max_norm_deviation(&entries));
            }
            let bad = Tensor::full(&[1, d], 2.0);
            if queue.enqueue_batch(&bad).is_ok() {
                return Err(Error::contract("queue accepted a non-unit key"));
            }
        }
        if worst > QUEUE_NORM_TOL {
            return Err(Error::contract(format!("queue entry norm off by {worst:e}")));
        }
        Ok(format!("{pushes} keys traced, max |‖k‖ − 1| = {worst:.1e}"))
    };
    vec![Check::from_result("queue:fifo_trace", opts.instances, fifo())]
}

/// Trains a small model for `steps` steps. Checks at every step that only
/// `F`, `C`, `D` and `Q` received gradient buffers, that `F̃` moved exactly
/// by the moving-average rule, and that both queues hold unit-norm keys.
pub fn momentum_encoder_check(opts: VerifyOptions, steps: usize) -> Check {
    let run = || -> Result<String> {
        let synth = SynthConfig {
            channels: IN_CHANNELS,
            history: HISTORY,
            min_length: 4,
            class_levels: vec![vec![0.0; IN_CHANNELS], vec![0.5; IN_CHANNELS]],
            target_offset: vec![0.3; IN_CHANNELS],
            target_scale: vec![0.8; IN_CHANNELS],
            train_per_domain: 24,
            val_per_domain: 1,
            test_per_domain: 1,
            seed: opts.seed,
            ..SynthConfig::default()
        };
        let data = synth_generate(&synth)?;
        let (source, stats) = preprocess(&data.source_train, None, HISTORY, SOURCE)?;
        let (target, _) = preprocess(&data.target_train, Some(&stats), HISTORY, TARGET)?;
        let mut r = rng::derive(opts.seed, &[0x3e]);
        let cfg = TrainConfig {
            batch_norm: false,
            ..small_config(&mut r)
        };
        let m = cfg.momentum;
        let mut trainer = Trainer::new(cfg.clone())?;
        let mut worst = 0.0f64;
        for step in 0..steps {
            fn pick<'a>(ds: &'a Dataset, n: usize, r: &mut SeededRng) -> Vec<&'a TimeSeriesSample> {
                (0..n).map(|_| &ds.samples[r.random_range(0..ds.len())]).collect()
            }
            let (bs, bt) = (pick(&source, cfg.batch_size, &mut r), pick(&target, cfg.batch_size, &mut r));
            let before = trainer.model().momentum_encoder.params().clone();
            trainer.train_step(&bs, &bt)?;
            if trainer.gradient_buffers() != trainer.trainable_tensors() {
                return Err(Error::contract(format!(
                    "step {step}: {} gradient buffers for {} trainable tensors",
                    trainer.gradient_buffers(),
                    trainer.trainable_tensors()
                )));
            }
            let model = trainer.model();
            let after = model.momentum_encoder.params();
            for ((prev, now), online) in before.tensors().zip(after.tensors()).zip(model.encoder.params().tensors()) {
                for ((&p, &a), &o) in prev.data().iter().zip(now.data()).zip(online.data()) {
                    if a != m * p + (1.0 - m) * o {
                        return Err(Error::contract(format!(
                            "step {step}: momentum encoder moved by something other than its average"
                        )));
                    }
                }
            }
            worst = worst
                .max(max_norm_deviation(&model.queue_source.entries()))
                .max(max_norm_deviation(&model.queue_target.entries()));
        }
        if worst > QUEUE_NORM_TOL {
            return Err(Error::contract(format!("queue entry norm off by {worst:e}")));
        }
        Ok(format!("{steps} steps, max |‖k‖ − 1| = {worst:.1e}"))
    };
    Check::from_result("momentum:no_gradient_to_momentum_encoder", steps, run())
}

/// Views keep their shape, only ever remove observations, zero what they
/// remove, and leave surviving entries unchanged apart from noise on
/// observed values.
pub fn augmentation_check(opts: VerifyOptions) -> Check {
    let run = || -> Result<String> {
        let mut r = rng::derive(opts.seed, &[0xa9]);
        for k in 0..opts.instances {
            let (m, t) = (dim(&mut r, 1, 4), dim(&mut r, 2, 24));
            let values = normal(&mut r, &[m, t]);
            let mask: Vec<bool> = (0..m * t).map(|_| r.random_bool(0.8)).collect();
            let view = View::new(values, mask)?;
            let config = AugmentConfig {
                crop_prob: r.random_range(0.0..=1.0),
                cutout_prob: r.random_range(0.0..=1.0),
                cutout_window: dim(&mut r, 1, t),
                channel_dropout_prob: r.random_range(0.0..0.5),
                noise_std: if r.random_bool(0.5) { 0.0 } else { 0.1 },
                ..AugmentConfig::default()
            };
            let aug = Augmenter::new(config.clone());
            let seed = r.random::<u64>();
            let (q, key) = aug.make_views(&view, &mut rng::seeded(seed));
            if aug.make_views(&view, &mut rng::seeded(seed)) != (q.clone(), key.clone()) {
                return Err(Error::contract(format!("instance {k}: views not reproducible")));
            }
            for out in [&q, &key] {
                if out.values.shape() != view.values.shape() {
                    return Err(Error::contract(format!("instance {k}: view changed shape")));
                }
                for i in 0..m * t {
                    let (x0, x1) = (view.values.data()[i], out.values.data()[i]);
                    let ok = match (view.mask[i], out.mask[i]) {
                        (false, true) => false,
                        (true, true) => config.noise_std > 0.0 || x1 == x0,
                        (_, false) => x1 == 0.0 || x1 == x0,
                    };
                    if !ok {
                        return Err(Error::contract(format!(
                            "instance {k}: entry {i} went from ({x0}, {}) to ({x1}, {})",
                            view.mask[i], out.mask[i]
                        )));
                    }
                }
            }
        }
        Ok("shape, mask monotonicity, zeroing and determinism hold".into())
    };
    Check::from_result("augment:view_invariants", opts.instances, run())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick() -> VerifyOptions {
        VerifyOptions {
            instances: 5,
            ..VerifyOptions::default()
        }
    }

    #[test]
    fn relative_error_floors_at_one() {
        assert_eq!(relative_error(1e-9, 0.0), 1e-9);
        assert!((relative_error(100.0, 101.0) - 1.0 / 101.0).abs() < 1e-15);
    }

    #[test]
    fn op_checks_pass() {
        for c in op_gradient_checks(quick()) {
            assert!(c.passed, "{c:?}");
        }
    }

    #[test]
    fn composed_checks_pass() {
        for c in composed_gradient_checks(quick()) {
            assert!(c.passed, "{c:?}");
        }
    }

    #[test]
    fn fd_check_catches_a_wrong_gradient() {
        // exp whose "gradient" is taken through a reversal it does not have
        let c = fd_check("wrong", quick(), 0, |r| {
            let x = normal(r, &[2, 2]);
            let mut inst = Instance::new(
                vec![x],
                Box::new(|g, v| {
                    let y = g.exp(v[0]);
                    let l = g.sum(y);
                    Ok(Built {
                        loss: l,
                        reversed: Some((l, 1.0)),
                        margin: f64::INFINITY,
                    })
                }),
            );
            inst.upstream = vec![true];
            Ok(inst)
        });
        assert!(!c.passed);
    }

    #[test]
    fn oracles_pass() {
        for c in loss_oracles() {
            assert!(c.passed, "{c:?}");
        }
    }

    #[test]
    fn reversal_mutation_is_detected() {
        assert!(reversal_check(quick()).passed);
        let broken = VerifyOptions {
            break_reversal: true,
            ..quick()
        };
        assert!(!reversal_check(broken).passed);
    }

    #[test]
    fn queue_momentum_and_augmentation() {
        for c in queue_checks(quick()) {
            assert!(c.passed, "{c:?}");
        }
        assert!(momentum_encoder_check(quick(), 10).passed);
        assert!(augmentation_check(quick()).passed);
    }
}

//! Momentum-contrast queue, the InfoNCE loss over it, and the cross-domain
//! nearest-neighbor contrastive loss.
//!
//! Losses are built on a [`Graph`] so they compose with the rest of the
//! training objective. Keys, queue entries and the selected nearest neighbors
//! always enter as constants: no gradient reaches them.

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Tolerance on `‖v‖ = 1` for vectors that must already be normalized.
pub const UNIT_NORM_TOL: f64 = 1e-6;

fn check_unit_rows(t: &Tensor, what: &str) -> Result<()> {
    for i in 0..t.rows() {
        let norm = t.row(i).iter().map(|x| x * x).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > UNIT_NORM_TOL {
            return Err(Error::contract(format!(
                "{what} row {i} has norm {norm}, expected unit norm"
            )));
        }
    }
    Ok(())
}

fn check_temperature(tau: f64) -> Result<()> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::Parameter(format!("temperature must be > 0, got {tau}")));
    }
    Ok(())
}

/// Fixed-capacity FIFO ring of unit-norm key embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingQueue {
    capacity: usize,
    dim: usize,
    buffer: Vec<f64>,
    cursor: usize,
    filled: usize,
}

impl EmbeddingQueue {
    pub fn new(capacity: usize, dim: usize) -> Result<Self> {
        if capacity == 0 || dim == 0 {
            return Err(Error::Parameter(format!(
                "queue needs positive capacity and dimension, got {capacity}x{dim}"
            )));
        }
        Ok(EmbeddingQueue {
            capacity,
            dim,
            buffer: vec![0.0; capacity * dim],
            cursor: 0,
            filled: 0,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn filled(&self) -> usize {
        self.filled
    }

    pub fn is_empty(&self) -> bool {
        self.filled == 0
    }

    /// Writes `keys` (`[N, D]`, unit rows, `N ≤ capacity`) at the cursor,
    /// overwriting the oldest entries once full.
    pub fn enqueue_batch(&mut self, keys: &Tensor) -> Result<()> {
        if keys.ndim() != 2 || keys.cols() != self.dim {
            return Err(Error::dim(format!(
                "queue of dimension {} cannot take keys {:?}",
                self.dim,
                keys.shape()
            )));
        }
        if keys.rows() > self.capacity {
            return Err(Error::contract(format!(
                "batch of {} keys exceeds queue capacity {}",
                keys.rows(),
                self.capacity
            )));
        }
        check_unit_rows(keys, "queued key")?;
        for i in 0..keys.rows() {
            let at = self.cursor * self.dim;
            self.buffer[at..at + self.dim].copy_from_slice(keys.row(i));
            self.cursor = (self.cursor + 1) % self.capacity;
        }
        self.filled = (self.filled + keys.rows()).min(self.capacity);
        Ok(())
    }

    /// Stored entries, oldest first, as `[filled, D]`.
    pub fn entries(&self) -> Tensor {
        let start = if self.filled < self.capacity { 0 } else { self.cursor };
        let mut data = Vec::with_capacity(self.filled * self.dim);
        for k in 0..self.filled {
            let slot = (start + k) % self.capacity;
            data.extend_from_slice(&self.buffer[slot * self.dim..(slot + 1) * self.dim]);
        }
        Tensor::new(vec![self.filled, self.dim], data).expect("sized from queue")
    }

    /// Stored entries transposed to `[D, filled]`, in slot order.
    fn entries_transposed(&self) -> Tensor {
        let mut data = vec![0.0; self.dim * self.filled];
        for slot in 0..self.filled {
            for d in 0..self.dim {
                data[d * self.filled + slot] = self.buffer[slot * self.dim + d];
            }
        }
        Tensor::new(vec![self.dim, self.filled], data).expect("sized from queue")
    }
}

/// MoCo InfoNCE:
/// `−(1/N) Σ_i log[exp(q_i·k_i/τ) / (exp(q_i·k_i/τ) + Σ_j exp(q_i·n_j/τ))]`
/// with `q_i` the row-normalized `proj_q` and `n_j` the queue entries.
pub fn infonce_loss(
    graph: &mut Graph,
    proj_q: Var,
    keys: &Tensor,
    queue: &EmbeddingQueue,
    tau: f64,
) -> Result<Var> {
    check_temperature(tau)?;
    let qv = graph.value(proj_q);
    qv.same_shape(keys, "infonce query/key")?;
    if keys.cols() != queue.dim() {
        return Err(Error::dim(format!(
            "keys of width {} against a queue of dimension {}",
            keys.cols(),
            queue.dim()
        )));
    }
    check_unit_rows(keys, "key")?;
    let q = graph.l2_normalize(proj_q)?;
    let k = graph.constant(keys.clone());
    let positive = graph.row_dot(q, k)?;
    let logits = if queue.is_empty() {
        positive
    } else {
        let negatives_t = graph.constant(queue.entries_transposed());
        let negatives = graph.matmul(q, negatives_t)?;
        graph.concat_cols(&[positive, negatives])?
    };
    let logits = graph.scale(logits, 1.0 / tau);
    let n = graph.value(logits).rows();
    graph.softmax_cross_entropy(logits, &vec![0; n])
}

/// Row of `sources` with the largest dot product against `key`; ties go to
/// the lowest index. The returned vector is a copy.
pub fn nearest_neighbor_source(key: &[f64], sources: &Tensor) -> Result<(usize, Vec<f64>)> {
    if sources.ndim() != 2 || sources.rows() == 0 {
        return Err(Error::contract("nearest-neighbor search over an empty source batch"));
    }
    if sources.cols() != key.len() {
        return Err(Error::dim(format!(
            "key of width {} against sources {:?}",
            key.len(),
            sources.shape()
        )));
    }
    let mut best = (0, f64::NEG_INFINITY);
    for i in 0..sources.rows() {
        let s: f64 = sources.row(i).iter().zip(key).map(|(a, b)| a * b).sum();
        if s > best.1 {
            best = (i, s);
        }
    }
    Ok((best.0, sources.row(best.0).to_vec()))
}

/// Nearest-neighbor contrastive loss
/// `−(1/N_t) Σ_i log[exp(q_i·NN(k_i)/τ) / Σ_j exp(q_i·s_j/τ)]` where
/// `q_i`/`k_i` are target queries/keys, `s_j` the source queries, and `NN`
/// searches the source queries with the target key. All inputs must be
/// unit-norm.
pub fn nncl_loss(
    graph: &mut Graph,
    target_queries: Var,
    target_keys: &Tensor,
    source_queries: Var,
    tau: f64,
) -> Result<Var> {
    check_temperature(tau)?;
    let tq = graph.value(target_queries);
    let sq = graph.value(source_queries);
    if sq.ndim() != 2 || sq.rows() == 0 {
        return Err(Error::contract("nncl_loss needs at least one source query"));
    }
    tq.same_shape(target_keys, "nncl target query/key")?;
    if tq.cols() != sq.cols() {
        return Err(Error::dim(format!(
            "target width {} vs source width {}",
            tq.cols(),
            sq.cols()
        )));
    }
    check_unit_rows(tq, "target query")?;
    check_unit_rows(target_keys, "target key")?;
    check_unit_rows(sq, "source query")?;

    let mut neighbors = Vec::with_capacity(tq.len());
    for i in 0..target_keys.rows() {
        let (_, v) = nearest_neighbor_source(target_keys.row(i), sq)?;
        neighbors.extend(v);
    }
    let neighbors = graph.constant(Tensor::new(tq.shape().to_vec(), neighbors)?);
    let positive = graph.row_dot(target_queries, neighbors)?;
    let positive = graph.scale(positive, 1.0 / tau);

    let sq_t = graph.transpose(source_queries)?;
    let sims = graph.matmul(target_queries, sq_t)?;
    let sims = graph.scale(sims, 1.0 / tau);
    let lse = graph.logsumexp_rows(sims)?;

    let per_row = graph.sub(lse, positive)?;
    Ok(graph.mean(per_row))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use proptest::prelude::*;
    use rand::Rng;

    fn rows(r: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&r.iter().map(|x| x.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    fn unit(v: &[f64]) -> Vec<f64> {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter().map(|x| x / n).collect()
    }

    fn random_units(rng: &mut impl Rng, n: usize, d: usize) -> Tensor {
        let r: Vec<Vec<f64>> = (0..n)
            .map(|_| unit(&(0..d).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<_>>()))
            .collect();
        Tensor::from_rows(&r).unwrap()
    }

    fn key(i: usize) -> Vec<f64> {
        let mut v = vec![0.0; 8];
        v[i] = 1.0;
        v
    }

    #[test]
    fn ring_buffer_trace() {
        let mut q = EmbeddingQueue::new(4, 8).unwrap();
        q.enqueue_batch(&Tensor::from_rows(&[key(0), key(1), key(2)]).unwrap()).unwrap();
        assert_eq!(q.filled(), 3);
        q.enqueue_batch(&Tensor::from_rows(&[key(3), key(4), key(5)]).unwrap()).unwrap();
        assert_eq!(q.filled(), 4);
        let expected = Tensor::from_rows(&[key(2), key(3), key(4), key(5)]).unwrap();
        assert_eq!(q.entries(), expected);
    }

    #[test]
    fn full_batch_overwrites_everything() {
        let mut q = EmbeddingQueue::new(3, 8).unwrap();
        q.enqueue_batch(&Tensor::from_rows(&[key(0), key(1), key(2)]).unwrap()).unwrap();
        let second = Tensor::from_rows(&[key(5), key(6), key(7)]).unwrap();
        q.enqueue_batch(&second).unwrap();
        assert_eq!(q.entries(), second);
    }

    #[test]
    fn enqueue_rejects_unnormalized_and_oversized() {
        let mut q = EmbeddingQueue::new(2, 2).unwrap();
        assert!(matches!(
            q.enqueue_batch(&rows(&[&[1.0, 1.0]])),
            Err(Error::Contract(_))
        ));
        assert!(matches!(
            q.enqueue_batch(&rows(&[&[1.0, 0.0], &[1.0, 0.0], &[0.0, 1.0]])),
            Err(Error::Contract(_))
        ));
        assert!(q.is_empty());
    }

    #[test]
    fn infonce_single_pair() {
        let mut queue = EmbeddingQueue::new(4, 2).unwrap();
        queue.enqueue_batch(&rows(&[&[0.0, 1.0]])).unwrap();
        let mut g = Graph::new();
        let q = g.param(rows(&[&[1.0, 0.0]]));
        let loss = infonce_loss(&mut g, q, &rows(&[&[1.0, 0.0]]), &queue, 1.0).unwrap();
        let e = std::f64::consts::E;
        assert!((g.value(loss).item() + (e / (e + 1.0)).ln()).abs() < 1e-12);
    }

    #[test]
    fn infonce_empty_queue_is_zero_for_any_pair() {
        let queue = EmbeddingQueue::new(4, 2).unwrap();
        let mut g = Graph::new();
        let q = g.param(rows(&[&[0.3, -2.0]]));
        let loss = infonce_loss(&mut g, q, &rows(&[&[0.6, 0.8]]), &queue, 0.1).unwrap();
        assert!(g.value(loss).item().abs() < 1e-15);
    }

    #[test]
    fn infonce_equal_similarities() {
        // All similarities equal: loss = ln(1 + filled).
        let mut queue = EmbeddingQueue::new(8, 2).unwrap();
        queue.enqueue_batch(&rows(&[&[1.0, 0.0], &[1.0, 0.0], &[1.0, 0.0]])).unwrap();
        let mut g = Graph::new();
        let q = g.param(rows(&[&[2.0, 0.0]]));
        let loss = infonce_loss(&mut g, q, &rows(&[&[1.0, 0.0]]), &queue, 0.5).unwrap();
        assert!((g.value(loss).item() - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn infonce_rejects_bad_temperature() {
        let queue = EmbeddingQueue::new(1, 2).unwrap();
        let mut g = Graph::new();
        let q = g.param(rows(&[&[1.0, 0.0]]));
        assert!(matches!(
            infonce_loss(&mut g, q, &rows(&[&[1.0, 0.0]]), &queue, 0.0),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn infonce_never_differentiates_keys_or_queue() {
        let mut rng = seeded(4);
        let mut queue = EmbeddingQueue::new(16, 5).unwrap();
        queue.enqueue_batch(&random_units(&mut rng, 10, 5)).unwrap();
        let keys = random_units(&mut rng, 3, 5);
        let mut g = Graph::new();
        let q = g.param(random_units(&mut rng, 3, 5));
        let loss = infonce_loss(&mut g, q, &keys, &queue, 0.2).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.allocated(), 1);
        assert!(grads.get(q).is_some());
    }

    #[test]
    fn infonce_decreases_with_positive_similarity() {
        let mut queue = EmbeddingQueue::new(4, 2).unwrap();
        queue.enqueue_batch(&rows(&[&[0.0, 1.0], &[-1.0, 0.0]])).unwrap();
        let k = rows(&[&[1.0, 0.0]]);
        let mut prev = f64::INFINITY;
        // rotate the query from 90° toward the key
        for step in 0..=10 {
            let angle = std::f64::consts::FRAC_PI_2 * (1.0 - step as f64 / 10.0);
            let mut g = Graph::new();
            let q = g.param(rows(&[&[angle.cos(), angle.sin()]]));
            let loss = infonce_loss(&mut g, q, &k, &queue, 0.5).unwrap();
            let v = g.value(loss).item();
            assert!(v < prev);
            prev = v;
        }
    }

    #[test]
    fn nearest_neighbor_cases() {
        let sources = rows(&[&[0.0, 1.0], &[0.8, 0.6]]);
        assert_eq!(nearest_neighbor_source(&[1.0, 0.0], &sources).unwrap().0, 1);
        assert_eq!(
            nearest_neighbor_source(&[0.0, 1.0], &sources).unwrap(),
            (0, vec![0.0, 1.0])
        );
        let tied = rows(&[&[0.6, 0.8], &[0.6, 0.8], &[0.0, 1.0]]);
        assert_eq!(nearest_neighbor_source(&[1.0, 0.0], &tied).unwrap().0, 0);
        let empty = Tensor::zeros(&[0, 2]);
        assert!(matches!(
            nearest_neighbor_source(&[1.0, 0.0], &empty),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn nncl_single_source_is_zero() {
        let mut g = Graph::new();
        let tq = g.param(rows(&[&[0.6, 0.8]]));
        let sq = g.param(rows(&[&[1.0, 0.0]]));
        let loss = nncl_loss(&mut g, tq, &rows(&[&[0.0, 1.0]]), sq, 0.1).unwrap();
        assert!(g.value(loss).item().abs() < 1e-12);
    }

    #[test]
    fn nncl_two_sources() {
        let mut g = Graph::new();
        let tq = g.param(rows(&[&[1.0, 0.0]]));
        let sq = g.param(rows(&[&[1.0, 0.0], &[0.0, 1.0]]));
        let loss = nncl_loss(&mut g, tq, &rows(&[&[1.0, 0.0]]), sq, 1.0).unwrap();
        let e = std::f64::consts::E;
        assert!((g.value(loss).item() + (e / (e + 1.0)).ln()).abs() < 1e-12);
    }

    #[test]
    fn nncl_requires_sources() {
        let mut g = Graph::new();
        let tq = g.param(rows(&[&[1.0, 0.0]]));
        let sq = g.param(Tensor::zeros(&[0, 2]));
        assert!(matches!(
            nncl_loss(&mut g, tq, &rows(&[&[1.0, 0.0]]), sq, 1.0),
            Err(Error::Contract(_))
        ));
    }

    proptest! {
        #[test]
        fn nncl_ignores_source_order(seed in any::<u64>(), nt in 1usize..5, ns in 1usize..6) {
            let mut rng = seeded(seed);
            let tq = random_units(&mut rng, nt, 4);
            let tk = random_units(&mut rng, nt, 4);
            let sq = random_units(&mut rng, ns, 4);
            let mut order: Vec<usize> = (0..ns).collect();
            order.reverse();
            order.rotate_left(seed as usize % ns);
            let permuted = Tensor::from_rows(
                &order.iter().map(|&i| sq.row(i).to_vec()).collect::<Vec<_>>(),
            ).unwrap();

            let eval = |s: &Tensor| {
                let mut g = Graph::new();
                let a = g.param(tq.clone());
                let b = g.param(s.clone());
                let l = nncl_loss(&mut g, a, &tk, b, 0.2).unwrap();
                g.value(l).item()
            };
            prop_assert!((eval(&sq) - eval(&permuted)).abs() < 1e-12);
        }
    }
}

//! AUROC, average-precision AUPRC and Cohen's linearly weighted kappa.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn check_binary(scores: &[f64], labels: &[usize]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::dim(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::Index(format!("binary label {bad}")));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count();
    Ok((pos, labels.len() - pos))
}

/// Indices that sort `scores` ascending; NaN-free input assumed.
fn ascending(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    idx
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half (average-rank Mann–Whitney form).
pub fn auroc(scores: &[f64], labels: &[usize]) -> Result<f64> {
    let (pos, neg) = check_binary(scores, labels)?;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric(
            "AUROC needs both classes present".into(),
        ));
    }
    let order = ascending(scores);
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1 share their average
        let avg = (i + j + 2) as f64 / 2.0;
        let positives = order[i..=j].iter().filter(|&&k| labels[k] == 1).count();
        rank_sum_pos += avg * positives as f64;
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * n))
}

/// Average precision `Σ_k (R_k − R_{k−1})·P_k` over descending score
/// thresholds, equal scores forming one threshold.
pub fn auprc(scores: &[f64], labels: &[usize]) -> Result<f64> {
    let (pos, _) = check_binary(scores, labels)?;
    if pos == 0 {
        return Err(Error::UndefinedMetric("AUPRC needs at least one positive".into()));
    }
    let mut order = ascending(scores);
    order.reverse();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        for &k in &order[i..=j] {
            if labels[k] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
        }
        let recall = tp as f64 / pos as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
        i = j + 1;
    }
    Ok(ap)
}

/// `K × K` contingency table, rows indexed by the true class.
pub fn confusion_matrix(pred: &[usize], truth: &[usize], k: usize) -> Result<Vec<Vec<usize>>> {
    if pred.len() != truth.len() {
        return Err(Error::dim(format!(
            "{} predictions for {} labels",
            pred.len(),
            truth.len()
        )));
    }
    let mut table = vec![vec![0usize; k]; k];
    for (&p, &t) in pred.iter().zip(truth) {
        if p >= k || t >= k {
            return Err(Error::Index(format!("class pair ({t}, {p}) outside [0, {k})")));
        }
        table[t][p] += 1;
    }
    Ok(table)
}

/// Cohen's kappa with weights `|i − j| / (K − 1)`.
pub fn cohen_kappa_linear(pred: &[usize], truth: &[usize], k: usize) -> Result<f64> {
    if k < 2 {
        return Err(Error::UndefinedMetric("kappa needs at least two classes".into()));
    }
    let table = confusion_matrix(pred, truth, k)?;
    let n = pred.len() as f64;
    let row: Vec<f64> = table.iter().map(|r| r.iter().sum::<usize>() as f64).collect();
    let col: Vec<f64> = (0..k)
        .map(|j| table.iter().map(|r| r[j]).sum::<usize>() as f64)
        .collect();
    let (mut observed, mut expected) = (0.0, 0.0);
    for i in 0..k {
        for j in 0..k {
            let w = i.abs_diff(j) as f64 / (k - 1) as f64;
            observed += w * table[i][j] as f64;
            expected += w * row[i] * col[j] / n;
        }
    }
    if expected == 0.0 {
        return Err(Error::UndefinedMetric(
            "kappa denominator is zero (degenerate marginals)".into(),
        ));
    }
    Ok(1.0 - observed / expected)
}

/// Row-wise argmax, lowest index on ties.
pub fn argmax_rows(probs: &Tensor) -> Vec<usize> {
    (0..probs.rows())
        .map(|i| {
            let row = probs.row(i);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Class-probability rows with their ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredPredictions {
    pub probs: Tensor,
    pub labels: Vec<usize>,
}

/// Which metric family a task reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    Binary,
    #[serde(rename = "ordinal-10")]
    Ordinal10,
}

impl TaskKind {
    pub fn num_classes(self) -> usize {
        match self {
            TaskKind::Binary => 2,
            TaskKind::Ordinal10 => 10,
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "binary" => Ok(TaskKind::Binary),
            "ordinal-10" | "ordinal" => Ok(TaskKind::Ordinal10),
            other => Err(Error::Parameter(format!("unknown task type {other:?}"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Binary => "binary",
            TaskKind::Ordinal10 => "ordinal-10",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MetricReport {
    Binary {
        auroc: f64,
        auprc: f64,
        n: usize,
    },
    Ordinal {
        kappa: f64,
        n: usize,
        confusion_matrix: Vec<Vec<usize>>,
    },
}

impl MetricReport {
    /// The headline number used for model selection: AUROC or kappa.
    pub fn primary(&self) -> f64 {
        match self {
            MetricReport::Binary { auroc, .. } => *auroc,
            MetricReport::Ordinal { kappa, .. } => *kappa,
        }
    }
}

impl ScoredPredictions {
    pub fn evaluate(&self, task: TaskKind) -> Result<MetricReport> {
        if self.probs.ndim() != 2 || self.probs.rows() != self.labels.len() {
            return Err(Error::dim("predictions and labels disagree in length"));
        }
        if self.probs.cols() != task.num_classes() {
            return Err(Error::contract(format!(
                "{} probability columns for a {}-class task",
                self.probs.cols(),
                task.num_classes()
            )));
        }
        let n = self.labels.len();
        match task {
            TaskKind::Binary => {
                let scores: Vec<f64> = (0..n).map(|i| self.probs.row(i)[1]).collect();
                Ok(MetricReport::Binary {
                    auroc: auroc(&scores, &self.labels)?,
                    auprc: auprc(&scores, &self.labels)?,
                    n,
                })
            }
            TaskKind::Ordinal10 => {
                let pred = argmax_rows(&self.probs);
                let k = task.num_classes();
                Ok(MetricReport::Ordinal {
                    kappa: cohen_kappa_linear(&pred, &self.labels, k)?,
                    n,
                    confusion_matrix: confusion_matrix(&pred, &self.labels, k)?,
                })
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::Rng;

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1]).unwrap(), 1.0);
        assert_eq!(auroc(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1]).unwrap(), 0.75);
        assert_eq!(auroc(&[0.5, 0.5], &[0, 1]).unwrap(), 0.5);
        assert!(matches!(auroc(&[0.1, 0.2], &[1, 1]), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn auroc_of_shuffled_labels_is_half() {
        let mut rng = seeded(17);
        let n = 10_000;
        let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
        let mut scores: Vec<f64> = labels.iter().map(|&l| l as f64).collect();
        scores.shuffle(&mut rng);
        let a = auroc(&scores, &labels).unwrap();
        assert!((a - 0.5).abs() < 0.02, "{a}");
    }

    #[test]
    fn auprc_examples() {
        assert_eq!(auprc(&[0.9, 0.8, 0.1], &[1, 1, 0]).unwrap(), 1.0);
        let ap = auprc(&[0.9, 0.8, 0.7], &[1, 0, 1]).unwrap();
        assert!((ap - 0.5 * (1.0 + 2.0 / 3.0)).abs() < 1e-15);
        // all tied: one threshold at full recall, precision = prevalence
        let ap = auprc(&[0.3; 10], &[1, 0, 0, 1, 0, 0, 0, 1, 0, 0]).unwrap();
        assert!((ap - 0.3).abs() < 1e-15);
        assert!(matches!(auprc(&[0.3, 0.1], &[0, 0]), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn kappa_examples() {
        assert_eq!(cohen_kappa_linear(&[0, 1, 2, 2], &[0, 1, 2, 2], 3).unwrap(), 1.0);
        // O = {(0,0):1, (1,2):1, (2,2):2}; Σ w·O = 0.5, Σ w·E = 1.75
        let k = cohen_kappa_linear(&[0, 2, 2, 2], &[0, 1, 2, 2], 3).unwrap();
        assert!((k - 5.0 / 7.0).abs() < 1e-15);
        assert!(matches!(
            cohen_kappa_linear(&[1, 1], &[1, 1], 3),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn kappa_of_independent_predictions_is_near_zero() {
        let mut rng = seeded(3);
        let n = 10_000;
        let truth: Vec<usize> = (0..n).map(|_| rng.random_range(0..2)).collect();
        let pred: Vec<usize> = (0..n).map(|_| rng.random_range(0..2)).collect();
        let k = cohen_kappa_linear(&pred, &truth, 2).unwrap();
        assert!(k.abs() < 0.03, "{k}");
    }

    #[test]
    fn argmax_breaks_ties_low() {
        let p = Tensor::from_rows(&[vec![0.5, 0.5], vec![0.2, 0.8]]).unwrap();
        assert_eq!(argmax_rows(&p), vec![0, 1]);
    }

    #[test]
    fn report_schema() {
        let probs = Tensor::from_rows(&[vec![0.9, 0.1], vec![0.2, 0.8]]).unwrap();
        let preds = ScoredPredictions {
            probs,
            labels: vec![0, 1],
        };
        let json = serde_json::to_value(preds.evaluate(TaskKind::Binary).unwrap()).unwrap();
        let mut keys: Vec<_> = json.as_object().unwrap().keys().cloned().collect();
        keys.sort();
        assert_eq!(keys, ["auprc", "auroc", "n"]);
    }

    proptest! {
        #[test]
        fn auroc_rank_invariance(
            data in prop::collection::vec((-5.0f64..5.0, 0usize..2), 2..40)
        ) {
            let scores: Vec<f64> = data.iter().map(|d| d.0).collect();
            let labels: Vec<usize> = data.iter().map(|d| d.1).collect();
            prop_assume!(labels.contains(&0) && labels.contains(&1));
            let a = auroc(&scores, &labels).unwrap();
            let warped: Vec<f64> = scores.iter().map(|s| s.exp() * 3.0 + 1.0).collect();
            prop_assert!((a - auroc(&warped, &labels).unwrap()).abs() < 1e-12);
            let mut sorted = scores.clone();
            sorted.sort_by(f64::total_cmp);
            if sorted.windows(2).all(|w| w[0] != w[1]) {
                let negated: Vec<f64> = scores.iter().map(|s| -s).collect();
                prop_assert!((a + auroc(&negated, &labels).unwrap() - 1.0).abs() < 1e-12);
            }
        }

        #[test]
        fn kappa_is_symmetric(pairs in prop::collection::vec((0usize..4, 0usize..4), 2..30)) {
            let a: Vec<usize> = pairs.iter().map(|p| p.0).collect();
            let b: Vec<usize> = pairs.iter().map(|p| p.1).collect();
            match (cohen_kappa_linear(&a, &b, 4), cohen_kappa_linear(&b, &a, 4)) {
                (Ok(x), Ok(y)) => prop_assert!((x - y).abs() < 1e-12),
                (Err(_), Err(_)) => {}
                _ => prop_assert!(false, "symmetry broken on definedness"),
            }
        }
    }
}

use std::collections::BTreeMap;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::rng;

/// Index sets of a three-way split; each is sorted ascending.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Stratified train/val/test split over sample indices. Each class is
/// shuffled and cut at `round(n·train)` and `round(n·val)`; the remainder
/// goes to test.
pub fn split_stratified(labels: &[usize], ratios: [f64; 3], seed: u64) -> Result<Split> {
    let total: f64 = ratios.iter().sum();
    if ratios.iter().any(|r| !(*r >= 0.0)) || (total - 1.0).abs() > 1e-9 {
        return Err(Error::Parameter(format!(
            "split ratios {ratios:?} must be non-negative and sum to 1"
        )));
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &y) in labels.iter().enumerate() {
        by_class.entry(y).or_default().push(i);
    }
    let mut split = Split {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for (class, mut members) in by_class {
        let n = members.len();
        if n < 3 {
            log::warn!("class {class} has only {n} member(s); split is best effort");
        }
        members.shuffle(&mut rng::derive(seed, &[class as u64]));
        let n_train = ((n as f64 * ratios[0]).round() as usize).min(n);
        let n_val = ((n as f64 * ratios[1]).round() as usize).min(n - n_train);
        split.train.extend_from_slice(&members[..n_train]);
        split.val.extend_from_slice(&members[n_train..n_train + n_val]);
        split.test.extend_from_slice(&members[n_train + n_val..]);
    }
    split.train.sort_unstable();
    split.val.sort_unstable();
    split.test.sort_unstable();
    Ok(split)
}

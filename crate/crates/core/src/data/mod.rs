//! Datasets: CSV ingestion, preprocessing into fixed `M × T` grids, label
//! helpers, stratified splitting and the synthetic two-domain benchmark.

mod io;
mod preprocess;
mod split;
mod synth;

pub use io::{load_csv, read_csv, write_csv};
pub use preprocess::{dataset_to_raw, preprocess, ScalerStats};
pub use split::{split_stratified, Split};
pub use synth::{synth_generate, SynthConfig, SynthData};

use crate::augment::View;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Domain tag: 0 for source, 1 for target.
pub type Domain = u8;
pub const SOURCE: Domain = 0;
pub const TARGET: Domain = 1;

/// One series on integer time steps with possibly missing entries, as read
/// from CSV. `values` is row-major `steps × M`.
#[derive(Debug, Clone, PartialEq)]
pub struct RawSeries {
    pub series_id: String,
    pub steps: Vec<i64>,
    pub values: Vec<Option<f64>>,
    pub label: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawDataset {
    pub feature_names: Vec<String>,
    pub series: Vec<RawSeries>,
}

impl RawDataset {
    pub fn channels(&self) -> usize {
        self.feature_names.len()
    }
}

/// A preprocessed series: `values` is `[M, T]`, `mask` marks observed
/// entries (padding and imputed cells are `false`).
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeriesSample {
    pub series_id: String,
    pub values: Tensor,
    pub mask: Vec<bool>,
    pub label: Option<usize>,
    pub domain: Domain,
}

impl TimeSeriesSample {
    pub fn view(&self) -> View {
        View {
            values: self.values.clone(),
            mask: self.mask.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub feature_names: Vec<String>,
    pub samples: Vec<TimeSeriesSample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.feature_names.len()
    }

    /// Series length `T` (0 for an empty dataset).
    pub fn history(&self) -> usize {
        self.samples.first().map_or(0, |s| s.values.shape()[1])
    }

    pub fn labels(&self) -> Result<Vec<usize>> {
        self.samples
            .iter()
            .map(|s| {
                s.label
                    .ok_or_else(|| Error::contract(format!("series {} is unlabeled", s.series_id)))
            })
            .collect()
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            feature_names: self.feature_names.clone(),
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
        }
    }

    /// Copy with every label removed.
    pub fn without_labels(&self) -> Dataset {
        let mut out = self.clone();
        out.samples.iter_mut().for_each(|s| s.label = None);
        out
    }

    /// Values of the selected samples stacked into `[N, M, T]`.
    pub fn batch_values(&self, indices: &[usize]) -> Result<Tensor> {
        let items: Vec<&Tensor> = indices.iter().map(|&i| &self.samples[i].values).collect();
        Tensor::stack(&items)
    }
}

/// Remaining length-of-stay bucket: `< 24h` → 0, `[24k, 24(k+1))` → `k` for
/// `k` in 1..=7, `[192h, 336h)` → 8, `≥ 336h` → 9. Intervals are half-open.
pub fn los_bucketize(remaining_hours: f64) -> Result<usize> {
    if !(remaining_hours >= 0.0) {
        return Err(Error::Domain(format!(
            "remaining length of stay must be >= 0, got {remaining_hours}"
        )));
    }
    let days = remaining_hours / 24.0;
    Ok(if days < 8.0 {
        days.floor() as usize
    } else if days < 14.0 {
        8
    } else {
        9
    })
}

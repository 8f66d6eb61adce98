use serde::{Deserialize, Serialize};

use super::{Dataset, Domain, RawDataset, RawSeries, TimeSeriesSample};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-channel standardization statistics. Computed once on the source
/// training split and reused verbatim for every other split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalerStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ScalerStats {
    /// Mean and (population) standard deviation over observed entries.
    /// Channels that are constant or never observed get `std = 1`.
    pub fn fit(raw: &RawDataset) -> ScalerStats {
        let m = raw.channels();
        let mut count = vec![0usize; m];
        let mut sum = vec![0.0; m];
        for s in &raw.series {
            for (i, v) in s.values.iter().enumerate() {
                if let Some(v) = v {
                    count[i % m] += 1;
                    sum[i % m] += v;
                }
            }
        }
        let mean: Vec<f64> = (0..m)
            .map(|j| if count[j] > 0 { sum[j] / count[j] as f64 } else { 0.0 })
            .collect();
        let mut sq = vec![0.0; m];
        for s in &raw.series {
            for (i, v) in s.values.iter().enumerate() {
                if let Some(v) = v {
                    sq[i % m] += (v - mean[i % m]).powi(2);
                }
            }
        }
        let std = (0..m)
            .map(|j| {
                let sd = if count[j] > 0 { (sq[j] / count[j] as f64).sqrt() } else { 0.0 };
                if sd > 0.0 && sd.is_finite() {
                    sd
                } else {
                    log::warn!(
                        "channel {:?} is constant or unobserved; using std = 1",
                        raw.feature_names[j]
                    );
                    1.0
                }
            })
            .collect();
        ScalerStats { mean, std }
    }

    /// Mean 0, std 1 on every channel.
    pub fn identity(channels: usize) -> ScalerStats {
        ScalerStats {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }
}

/// Turns raw series into `[M, history]` grids: forward-fill each channel,
/// standardize with `stats` (fitted on `raw` when absent), zero-fill what is
/// still missing, keep the last `history` steps and zero-pre-pad shorter
/// series. Gaps between recorded step indices count as missing rows. The
/// mask is true only for cells that were actually observed.
pub fn preprocess(
    raw: &RawDataset,
    stats: Option<&ScalerStats>,
    history: usize,
    domain: Domain,
) -> Result<(Dataset, ScalerStats)> {
    if history == 0 {
        return Err(Error::Parameter("history length must be >= 1".into()));
    }
    let m = raw.channels();
    let stats = match stats {
        Some(s) if s.channels() != m || s.std.len() != m => {
            return Err(Error::dim(format!(
                "scaler has {} channels, dataset has {m}",
                s.channels()
            )))
        }
        Some(s) => s.clone(),
        None => ScalerStats::fit(raw),
    };
    let samples = raw
        .series
        .iter()
        .map(|s| grid_series(s, m, &stats, history, domain))
        .collect::<Result<Vec<_>>>()?;
    Ok((
        Dataset {
            feature_names: raw.feature_names.clone(),
            samples,
        },
        stats,
    ))
}

fn grid_series(
    s: &RawSeries,
    m: usize,
    stats: &ScalerStats,
    history: usize,
    domain: Domain,
) -> Result<TimeSeriesSample> {
    if s.values.len() != s.steps.len() * m {
        return Err(Error::dim(format!(
            "series {} has {} values for {} steps x {m} channels",
            s.series_id,
            s.values.len(),
            s.steps.len()
        )));
    }
    let mut values = vec![0.0; m * history];
    let mut mask = vec![false; m * history];
    if let (Some(&first), Some(&last)) = (s.steps.first(), s.steps.last()) {
        let len = (last - first + 1) as usize;
        // dense rows on the contiguous step grid
        let mut dense: Vec<Option<f64>> = vec![None; len * m];
        for (k, &t) in s.steps.iter().enumerate() {
            let r = (t - first) as usize;
            dense[r * m..(r + 1) * m].copy_from_slice(&s.values[k * m..(k + 1) * m]);
        }
        let start = len.saturating_sub(history);
        let pad = history - (len - start);
        for j in 0..m {
            let mut carry: Option<f64> = None;
            for r in 0..len {
                let obs = dense[r * m + j];
                if obs.is_some() {
                    carry = obs;
                }
                if r < start {
                    continue;
                }
                let col = pad + r - start;
                values[j * history + col] = carry.map_or(0.0, |v| (v - stats.mean[j]) / stats.std[j]);
                mask[j * history + col] = obs.is_some();
            }
        }
    }
    Ok(TimeSeriesSample {
        series_id: s.series_id.clone(),
        values: Tensor::new(vec![m, history], values)?,
        mask,
        label: s.label,
        domain,
    })
}

/// Inverse direction for processed data: every grid cell becomes an observed
/// raw value on steps `0..T`.
pub fn dataset_to_raw(data: &Dataset) -> RawDataset {
    let series = data
        .samples
        .iter()
        .map(|s| {
            let (m, t) = (s.values.shape()[0], s.values.shape()[1]);
            let v = s.values.data();
            RawSeries {
                series_id: s.series_id.clone(),
                steps: (0..t as i64).collect(),
                values: (0..t)
                    .flat_map(|c| (0..m).map(move |j| Some(v[j * t + c])))
                    .collect(),
                label: s.label,
            }
        })
        .collect();
    RawDataset {
        feature_names: data.feature_names.clone(),
        series,
    }
}

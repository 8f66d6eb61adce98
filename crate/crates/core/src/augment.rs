//! Stochastic, label-preserving augmentations that produce the query and key
//! views of a series. All of them operate on an `[M, T]` value grid plus its
//! observation mask and zero whatever they mask out.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Upper bound of the history-crop length as a fraction of `T`.
pub const CROP_MAX_FRACTION: f64 = 0.4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub crop_min_fraction: f64,
    pub crop_prob: f64,
    pub cutout_window: usize,
    pub cutout_prob: f64,
    pub channel_dropout_prob: f64,
    pub noise_std: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            crop_min_fraction: 0.2,
            crop_prob: 0.5,
            cutout_window: 8,
            cutout_prob: 0.5,
            channel_dropout_prob: 0.1,
            noise_std: 0.1,
        }
    }
}

impl AugmentConfig {
    /// Every augmentation switched off.
    pub fn disabled() -> Self {
        AugmentConfig {
            crop_min_fraction: 0.2,
            crop_prob: 0.0,
            cutout_window: 1,
            cutout_prob: 0.0,
            channel_dropout_prob: 0.0,
            noise_std: 0.0,
        }
    }

    pub fn validate(&self, len: usize) -> Result<()> {
        for (name, p) in [
            ("crop_prob", self.crop_prob),
            ("cutout_prob", self.cutout_prob),
            ("channel_dropout_prob", self.channel_dropout_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Parameter(format!("{name} = {p} not in [0, 1]")));
            }
        }
        if !(self.crop_min_fraction > 0.0 && self.crop_min_fraction < 1.0) {
            return Err(Error::Parameter(format!(
                "crop_min_fraction = {} not in (0, 1)",
                self.crop_min_fraction
            )));
        }
        if self.cutout_window < 1 || self.cutout_window > len {
            return Err(Error::Parameter(format!(
                "cutout_window = {} not in [1, {len}]",
                self.cutout_window
            )));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::Parameter(format!("noise_std = {}", self.noise_std)));
        }
        Ok(())
    }
}

/// A series under augmentation: `values` is `[M, T]`, `mask` is row-major
/// `M × T` with `true` for observed entries.
#[derive(Debug, Clone, PartialEq)]
pub struct View {
    pub values: Tensor,
    pub mask: Vec<bool>,
}

impl View {
    pub fn new(values: Tensor, mask: Vec<bool>) -> Result<Self> {
        if values.ndim() != 2 || mask.len() != values.len() {
            return Err(Error::dim(format!(
                "view needs [M,T] values and a matching mask, got {:?} and {}",
                values.shape(),
                mask.len()
            )));
        }
        Ok(View { values, mask })
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn len(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Zeroes and unmasks time steps `[start, end)` of every channel.
    pub fn clear_steps(&mut self, start: usize, end: usize) {
        let t = self.len();
        let end = end.min(t);
        for c in 0..self.channels() {
            let row = c * t;
            self.values.data_mut()[row + start..row + end].fill(0.0);
            self.mask[row + start..row + end].fill(false);
        }
    }

    /// Zeroes and unmasks one channel entirely.
    pub fn clear_channel(&mut self, c: usize) {
        let t = self.len();
        self.values.data_mut()[c * t..(c + 1) * t].fill(0.0);
        self.mask[c * t..(c + 1) * t].fill(false);
    }
}

/// Masks the first `round(fraction · T)` steps.
pub fn crop_fraction(view: &mut View, fraction: f64) {
    let len = (fraction * view.len() as f64).round() as usize;
    view.clear_steps(0, len);
}

#[derive(Debug, Clone)]
pub struct Augmenter {
    config: AugmentConfig,
}

impl Augmenter {
    pub fn new(config: AugmentConfig) -> Self {
        Augmenter { config }
    }

    pub fn config(&self) -> &AugmentConfig {
        &self.config
    }

    /// With probability `crop_prob`, masks a random prefix whose length is a
    /// uniform fraction of `T` between `crop_min_fraction` and
    /// [`CROP_MAX_FRACTION`].
    pub fn history_crop<R: Rng + ?Sized>(&self, view: &mut View, rng: &mut R) {
        if !rng.random_bool(self.config.crop_prob) {
            return;
        }
        let lo = self.config.crop_min_fraction;
        let hi = CROP_MAX_FRACTION.max(lo);
        let fraction = if hi > lo { rng.random_range(lo..=hi) } else { lo };
        crop_fraction(view, fraction);
    }

    /// With probability `cutout_prob`, masks a window of `cutout_window`
    /// consecutive steps.
    pub fn history_cutout<R: Rng + ?Sized>(&self, view: &mut View, rng: &mut R) {
        if !rng.random_bool(self.config.cutout_prob) {
            return;
        }
        let t = view.len();
        let window = self.config.cutout_window.min(t);
        let start = rng.random_range(0..=t - window);
        view.clear_steps(start, start + window);
    }

    /// Masks each channel independently with probability
    /// `channel_dropout_prob`.
    pub fn channel_dropout<R: Rng + ?Sized>(&self, view: &mut View, rng: &mut R) {
        for c in 0..view.channels() {
            if rng.random_bool(self.config.channel_dropout_prob) {
                view.clear_channel(c);
            }
        }
    }

    /// Adds `N(0, noise_std²)` to every observed entry.
    pub fn gaussian_noise<R: Rng + ?Sized>(&self, view: &mut View, rng: &mut R) {
        if self.config.noise_std == 0.0 {
            return;
        }
        let normal = Normal::new(0.0, self.config.noise_std).expect("validated std");
        for (v, &observed) in view.values.data_mut().iter_mut().zip(&view.mask) {
            if observed {
                *v += normal.sample(rng);
            }
        }
    }

    /// Crop, cutout, channel dropout and noise, in that order.
    pub fn augment<R: Rng + ?Sized>(&self, view: &View, rng: &mut R) -> View {
        let mut out = view.clone();
        self.history_crop(&mut out, rng);
        self.history_cutout(&mut out, rng);
        self.channel_dropout(&mut out, rng);
        self.gaussian_noise(&mut out, rng);
        out
    }

    /// Two independently augmented views `(query, key)`.
    pub fn make_views<R: Rng + ?Sized>(&self, view: &View, rng: &mut R) -> (View, View) {
        let q = self.augment(view, rng);
        let k = self.augment(view, rng);
        (q, k)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use proptest::prelude::*;

    fn ramp(m: usize, t: usize) -> View {
        let data = (0..m * t).map(|i| 1.0 + i as f64).collect();
        View::new(Tensor::new(vec![m, t], data).unwrap(), vec![true; m * t]).unwrap()
    }

    fn only(config: AugmentConfig) -> Augmenter {
        Augmenter::new(config)
    }

    #[test]
    fn disabled_pipeline_is_identity() {
        let aug = only(AugmentConfig::disabled());
        let v = ramp(3, 48);
        let (q, k) = aug.make_views(&v, &mut seeded(1));
        assert_eq!(q, v);
        assert_eq!(k, v);
    }

    #[test]
    fn crop_disabled_is_identity() {
        let aug = only(AugmentConfig {
            crop_prob: 0.0,
            ..AugmentConfig::default()
        });
        let mut v = ramp(2, 48);
        aug.history_crop(&mut v, &mut seeded(3));
        assert_eq!(v, ramp(2, 48));
    }

    #[test]
    fn crop_at_a_quarter_clears_twelve_of_forty_eight() {
        let mut v = ramp(2, 48);
        crop_fraction(&mut v, 0.25);
        for c in 0..2 {
            assert!(v.values.data()[c * 48..c * 48 + 12].iter().all(|&x| x == 0.0));
            assert!(v.values.data()[c * 48 + 12..(c + 1) * 48].iter().all(|&x| x != 0.0));
        }
    }

    #[test]
    fn crop_masks_a_prefix_within_range() {
        let aug = only(AugmentConfig {
            crop_prob: 1.0,
            ..AugmentConfig::default()
        });
        let mut rng = seeded(11);
        for _ in 0..200 {
            let mut v = ramp(1, 48);
            aug.history_crop(&mut v, &mut rng);
            let cleared = v.mask.iter().take_while(|&&m| !m).count();
            assert!(v.mask[cleared..].iter().all(|&m| m), "cleared region is not a prefix");
            assert!((10..=19).contains(&cleared), "crop length {cleared}");
        }
    }

    #[test]
    fn cutout_clears_exactly_one_window() {
        let aug = only(AugmentConfig {
            cutout_prob: 1.0,
            ..AugmentConfig::default()
        });
        let mut rng = seeded(5);
        for _ in 0..200 {
            let mut v = ramp(2, 48);
            aug.history_cutout(&mut v, &mut rng);
            let row = &v.mask[..48];
            let start = row.iter().position(|&m| !m).unwrap();
            let end = start + row[start..].iter().take_while(|&&m| !m).count();
            assert_eq!(end - start, 8);
            assert!(row[end..].iter().all(|&m| m));
            assert_eq!(&v.mask[48..], row);
        }
    }

    #[test]
    fn cutout_window_equal_to_length_clears_everything() {
        let aug = only(AugmentConfig {
            cutout_prob: 1.0,
            cutout_window: 10,
            ..AugmentConfig::default()
        });
        let mut v = ramp(2, 10);
        aug.history_cutout(&mut v, &mut seeded(0));
        assert!(v.values.data().iter().all(|&x| x == 0.0));
        assert!(v.mask.iter().all(|&m| !m));
    }

    #[test]
    fn cutout_disabled_is_identity() {
        let aug = only(AugmentConfig {
            cutout_prob: 0.0,
            ..AugmentConfig::default()
        });
        let mut v = ramp(2, 48);
        aug.history_cutout(&mut v, &mut seeded(0));
        assert_eq!(v, ramp(2, 48));
    }

    #[test]
    fn channel_dropout_extremes() {
        let mut v = ramp(4, 16);
        only(AugmentConfig {
            channel_dropout_prob: 0.0,
            ..AugmentConfig::disabled()
        })
        .channel_dropout(&mut v, &mut seeded(0));
        assert_eq!(v, ramp(4, 16));
        only(AugmentConfig {
            channel_dropout_prob: 1.0,
            ..AugmentConfig::disabled()
        })
        .channel_dropout(&mut v, &mut seeded(0));
        assert!(v.values.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn channel_dropout_frequency() {
        let aug = only(AugmentConfig {
            channel_dropout_prob: 0.1,
            ..AugmentConfig::disabled()
        });
        let mut rng = seeded(2024);
        let mut dropped = [0usize; 3];
        let trials = 10_000;
        for _ in 0..trials {
            let mut v = ramp(3, 4);
            aug.channel_dropout(&mut v, &mut rng);
            for (c, d) in dropped.iter_mut().enumerate() {
                if !v.mask[c * 4] {
                    *d += 1;
                }
            }
        }
        for d in dropped {
            let freq = d as f64 / trials as f64;
            assert!((freq - 0.1).abs() <= 0.01, "drop frequency {freq}");
        }
    }

    #[test]
    fn noise_variance_and_padding() {
        let aug = only(AugmentConfig {
            noise_std: 0.1,
            ..AugmentConfig::disabled()
        });
        let t = 1000;
        let m = 100;
        let mut v = ramp(m, t);
        // first 10 steps of every channel are padding
        for c in 0..m {
            for s in 0..10 {
                v.values.data_mut()[c * t + s] = 0.0;
                v.mask[c * t + s] = false;
            }
        }
        let before = v.clone();
        aug.gaussian_noise(&mut v, &mut seeded(77));
        let diffs: Vec<f64> = v
            .values
            .data()
            .iter()
            .zip(before.values.data())
            .zip(&v.mask)
            .filter(|(_, &m)| m)
            .map(|((a, b), _)| a - b)
            .collect();
        let n = diffs.len() as f64;
        let mean = diffs.iter().sum::<f64>() / n;
        let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!((var - 0.01).abs() <= 0.001, "variance {var}");
        for c in 0..m {
            assert!(v.values.data()[c * t..c * t + 10].iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn noise_std_zero_is_identity() {
        let aug = only(AugmentConfig::disabled());
        let mut v = ramp(2, 8);
        aug.gaussian_noise(&mut v, &mut seeded(0));
        assert_eq!(v, ramp(2, 8));
    }

    #[test]
    fn same_seed_same_view() {
        let aug = only(AugmentConfig::default());
        let v = ramp(3, 48);
        let a = aug.augment(&v, &mut seeded(8));
        let b = aug.augment(&v, &mut seeded(8));
        assert_eq!(a, b);
    }

    #[test]
    fn default_views_usually_differ() {
        let aug = only(AugmentConfig::default());
        let v = ramp(3, 48);
        let mut rng = seeded(99);
        let differing = (0..100)
            .filter(|_| {
                let (q, k) = aug.make_views(&v, &mut rng);
                q != k
            })
            .count();
        assert!(differing >= 95, "only {differing} of 100 pairs differ");
    }

    #[test]
    fn validate_bounds() {
        assert!(AugmentConfig::default().validate(48).is_ok());
        let bad = AugmentConfig {
            cutout_window: 49,
            ..AugmentConfig::default()
        };
        assert!(bad.validate(48).is_err());
        let bad = AugmentConfig {
            crop_prob: 1.5,
            ..AugmentConfig::default()
        };
        assert!(bad.validate(48).is_err());
    }

    proptest! {
        #[test]
        fn shape_and_mask_consistency(seed in any::<u64>(), m in 1usize..5, t in 8usize..60) {
            let aug = only(AugmentConfig { cutout_window: 8.min(t), ..AugmentConfig::default() });
            let v = ramp(m, t);
            let mut rng = seeded(seed);
            let (q, k) = aug.make_views(&v, &mut rng);
            for view in [q, k] {
                prop_assert_eq!(view.values.shape(), &[m, t]);
                for (x, &observed) in view.values.data().iter().zip(&view.mask) {
                    if !observed {
                        prop_assert_eq!(*x, 0.0);
                    }
                }
            }
        }
    }
}

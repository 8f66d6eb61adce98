//! End-to-end training: loss assembly, optimization, momentum encoder and
//! queue maintenance, early stopping, and the ablation switches.

mod model;
mod train;

pub use model::{domain_loss, prediction_loss, CludaModel};
pub use train::{evaluate, train, EarlyStopping, StepReport, TrainOutcome, Trainer};

use serde::{Deserialize, Serialize};

use crate::augment::AugmentConfig;
use crate::error::{Error, Result};
use crate::metrics::TaskKind;
use crate::nn::{AdamConfig, TcnConfig};

/// Everything that determines a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub task: TaskKind,
    pub tcn: TcnConfig,
    /// Hidden width of the classifier, discriminator and projector.
    pub hidden_dim: usize,
    /// Standardize the classifier input with batch statistics.
    pub batch_norm: bool,
    pub augment: AugmentConfig,
    pub lambda_disc: f64,
    pub lambda_cl: f64,
    pub lambda_nncl: f64,
    pub momentum: f64,
    pub temperature: f64,
    pub queue_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_steps: u64,
    pub eval_interval: u64,
    /// Evaluations without improvement before stopping; 0 disables stopping.
    pub patience: usize,
    /// Feed the classifier (and discriminator) the unaugmented series
    /// instead of the query view.
    pub classify_raw: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let batch_size = 64;
        TrainConfig {
            task: TaskKind::Binary,
            tcn: TcnConfig::default(),
            hidden_dim: 64,
            batch_norm: false,
            augment: AugmentConfig::default(),
            lambda_disc: 0.5,
            lambda_cl: 0.1,
            lambda_nncl: 0.1,
            momentum: 0.99,
            temperature: 0.1,
            queue_size: 12 * batch_size,
            learning_rate: 5e-4,
            weight_decay: 0.0,
            batch_size,
            max_steps: 2000,
            eval_interval: 200,
            patience: 10,
            classify_raw: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let p = |msg: String| Err(Error::Parameter(msg));
        self.tcn.validate()?;
        self.augment.validate(self.tcn.max_history)?;
        for (name, v) in [
            ("lambda_disc", self.lambda_disc),
            ("lambda_cl", self.lambda_cl),
            ("lambda_nncl", self.lambda_nncl),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return p(format!("{name} = {v} must be a finite non-negative number"));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return p(format!("momentum = {} not in [0, 1)", self.momentum));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return p(format!("temperature = {} must be > 0", self.temperature));
        }
        if self.batch_size == 0 {
            return p("batch_size must be >= 1".into());
        }
        if self.queue_size < self.batch_size {
            return p(format!(
                "queue_size = {} must be >= batch_size = {}",
                self.queue_size, self.batch_size
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return p(format!("learning_rate = {} must be > 0", self.learning_rate));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return p(format!("weight_decay = {} must be >= 0", self.weight_decay));
        }
        if self.hidden_dim == 0 || self.eval_interval == 0 {
            return p("hidden_dim and eval_interval must be >= 1".into());
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            ..AdamConfig::default()
        }
    }

    /// True when any adaptation term is active; target data is only touched
    /// in that case.
    pub fn uses_target(&self) -> bool {
        self.lambda_disc > 0.0 || self.lambda_cl > 0.0 || self.lambda_nncl > 0.0
    }
}

/// The method and its ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// All losses.
    Full,
    /// `λ_NNCL = 0`.
    NoNncl,
    /// `λ_CL = λ_NNCL = 0`: adversarial alignment only.
    NoClNoNncl,
    /// Every adaptation weight zero: source-only training.
    SourceOnly,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Full,
        Variant::NoNncl,
        Variant::NoClNoNncl,
        Variant::SourceOnly,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoNncl => "no-nncl",
            Variant::NoClNoNncl => "no-cl-no-nncl",
            Variant::SourceOnly => "source-only",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::Parameter(format!("unknown variant {s:?}")))
    }

    /// Zeroes the weights this variant switches off.
    pub fn apply(self, config: &mut TrainConfig) {
        match self {
            Variant::Full => {}
            Variant::NoNncl => config.lambda_nncl = 0.0,
            Variant::NoClNoNncl => {
                config.lambda_cl = 0.0;
                config.lambda_nncl = 0.0;
            }
            Variant::SourceOnly => {
                config.lambda_disc = 0.0;
                config.lambda_cl = 0.0;
                config.lambda_nncl = 0.0;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        let c = TrainConfig::default();
        c.validate().unwrap();
        assert_eq!(c.queue_size, 768);
        assert!(c.uses_target());
    }

    #[test]
    fn invalid_settings() {
        let bad = [
            TrainConfig { momentum: 1.0, ..Default::default() },
            TrainConfig { temperature: 0.0, ..Default::default() },
            TrainConfig { queue_size: 10, ..Default::default() },
            TrainConfig { lambda_cl: -0.1, ..Default::default() },
            TrainConfig { batch_size: 0, ..Default::default() },
        ];
        for c in bad {
            assert!(matches!(c.validate(), Err(Error::Parameter(_))), "{c:?}");
        }
    }

    #[test]
    fn variants_zero_the_right_weights() {
        let mut c = TrainConfig::default();
        Variant::NoClNoNncl.apply(&mut c);
        assert_eq!((c.lambda_disc, c.lambda_cl, c.lambda_nncl), (0.5, 0.0, 0.0));
        let mut c = TrainConfig::default();
        Variant::SourceOnly.apply(&mut c);
        assert!(!c.uses_target());
        for v in Variant::ALL {
            assert_eq!(Variant::parse(v.as_str()).unwrap(), v);
        }
    }

    #[test]
    fn config_round_trips_through_json() {
        let c = TrainConfig::default();
        let s = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<TrainConfig>(&s).unwrap(), c);
    }
}

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::classification::{DEFAULT_CLASSIFIER_HIDDEN, DEFAULT_LAMBDA, DEFAULT_TEMPERATURE};
use crate::correction::DEFAULT_PERTURBER_HIDDEN;
use crate::error::{Error, Result};
use crate::estimation::DEFAULT_REN_HIDDEN;
use crate::party::HeSettings;
use crate::training::Optimizer;

/// Per-dataset defaults for hidden width, perturbation magnitude and
/// learning rate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetPreset {
    Bcw,
    Dcc,
    Har,
    Synthetic,
}

impl DatasetPreset {
    pub const ALL: [DatasetPreset; 4] = [
        DatasetPreset::Bcw,
        DatasetPreset::Dcc,
        DatasetPreset::Har,
        DatasetPreset::Synthetic,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DatasetPreset::Bcw => "bcw",
            DatasetPreset::Dcc => "dcc",
            DatasetPreset::Har => "har",
            DatasetPreset::Synthetic => "synthetic",
        }
    }

    pub fn ae_hidden(self) -> usize {
        match self {
            DatasetPreset::Bcw | DatasetPreset::Har => 500,
            DatasetPreset::Dcc | DatasetPreset::Synthetic => 100,
        }
    }

    pub fn delta(self) -> f64 {
        match self {
            DatasetPreset::Bcw => 1.0,
            DatasetPreset::Dcc | DatasetPreset::Synthetic => 0.6,
            DatasetPreset::Har => 0.5,
        }
    }

    pub fn lr(self) -> f64 {
        match self {
            DatasetPreset::Har => 0.001,
            _ => 0.005,
        }
    }
}

impl fmt::Display for DatasetPreset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DatasetPreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        DatasetPreset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown dataset preset `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassWeighting {
    /// `w_c = N / (C * N_c)` over the whole training pool.
    InverseFrequency,
    Uniform,
}

/// Every knob of one federated run. Stage learning rates fall back to `lr`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub rep_dim: usize,
    pub ae_hidden: usize,
    pub ren_hidden: Vec<usize>,
    pub perturber_hidden: usize,
    pub classifier_hidden: usize,
    pub delta: f64,
    pub temperature: f64,
    pub lambda: f64,
    pub class_weighting: ClassWeighting,
    pub batch_size: usize,
    pub lr: f64,
    pub ae_lr: Option<f64>,
    pub ren_lr: Option<f64>,
    pub perturber_lr: Option<f64>,
    pub classifier_lr: Option<f64>,
    /// Fine-tuning uses `finetune_lr_factor` times the classifier rate.
    pub finetune_lr_factor: f64,
    pub ae_epochs: usize,
    pub ren_epochs: usize,
    pub perturber_epochs: usize,
    pub classifier_epochs: usize,
    pub classifier_optimizer: Optimizer,
    pub he: HeSettings,
    pub split_fraction: f64,
    /// Re-fit the estimator and perturber on the grown overlap at every
    /// timestamp instead of freezing them after `t = 0`.
    pub retrain_estimators: bool,
    /// Share of the data held out for testing in dynamic runs.
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self::preset(DatasetPreset::Bcw)
    }
}

impl PipelineConfig {
    pub fn preset(preset: DatasetPreset) -> Self {
        Self {
            rep_dim: 200,
            ae_hidden: preset.ae_hidden(),
            ren_hidden: DEFAULT_REN_HIDDEN.to_vec(),
            perturber_hidden: DEFAULT_PERTURBER_HIDDEN,
            classifier_hidden: DEFAULT_CLASSIFIER_HIDDEN,
            delta: preset.delta(),
            temperature: DEFAULT_TEMPERATURE,
            lambda: DEFAULT_LAMBDA,
            class_weighting: ClassWeighting::InverseFrequency,
            batch_size: 128,
            lr: preset.lr(),
            ae_lr: None,
            ren_lr: None,
            perturber_lr: None,
            classifier_lr: None,
            finetune_lr_factor: 0.1,
            ae_epochs: 50,
            ren_epochs: 100,
            perturber_epochs: 50,
            classifier_epochs: 2000,
            classifier_optimizer: Optimizer::Sgd,
            he: HeSettings::default(),
            split_fraction: 0.5,
            retrain_estimators: false,
            test_fraction: 0.2,
            seed: 0,
        }
    }

    pub fn ae_lr(&self) -> f64 {
        self.ae_lr.unwrap_or(self.lr)
    }

    pub fn ren_lr(&self) -> f64 {
        self.ren_lr.unwrap_or(self.lr)
    }

    pub fn perturber_lr(&self) -> f64 {
        self.perturber_lr.unwrap_or(self.lr)
    }

    pub fn classifier_lr(&self) -> f64 {
        self.classifier_lr.unwrap_or(self.lr)
    }

    pub fn validate(&self) -> Result<()> {
        fn bad(field: &str, reason: impl Into<String>) -> Error {
            Error::Config {
                field: field.into(),
                reason: reason.into(),
            }
        }
        fn positive_rate(field: &str, v: f64) -> Result<()> {
            if v.is_finite() && v >= 0.0 {
                Ok(())
            } else {
                Err(bad(field, format!("must be a non-negative finite number, got {v}")))
            }
        }
        for (field, v) in [
            ("rep_dim", self.rep_dim),
            ("ae_hidden", self.ae_hidden),
            ("perturber_hidden", self.perturber_hidden),
            ("classifier_hidden", self.classifier_hidden),
            ("batch_size", self.batch_size),
        ] {
            if v == 0 {
                return Err(bad(field, "must be positive"));
            }
        }
        if self.ren_hidden.iter().any(|&h| h == 0) {
            return Err(bad("ren_hidden", "layer widths must be positive"));
        }
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            return Err(bad("delta", format!("must be positive, got {}", self.delta)));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(bad("temperature", format!("must be positive, got {}", self.temperature)));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(bad("lambda", format!("must lie in [0, 1], got {}", self.lambda)));
        }
        positive_rate("lr", self.lr)?;
        for (field, v) in [
            ("ae_lr", self.ae_lr),
            ("ren_lr", self.ren_lr),
            ("perturber_lr", self.perturber_lr),
            ("classifier_lr", self.classifier_lr),
        ] {
            if let Some(v) = v {
                positive_rate(field, v)?;
            }
        }
        positive_rate("finetune_lr_factor", self.finetune_lr_factor)?;
        if !(self.split_fraction > 0.0 && self.split_fraction < 1.0) {
            return Err(bad("split_fraction", format!("must be in (0, 1), got {}", self.split_fraction)));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(bad("test_fraction", format!("must be in (0, 1), got {}", self.test_fraction)));
        }
        let min_bits = match self.he.key_mode {
            crate::he::KeyMode::Crypto => crate::he::MIN_CRYPTO_BITS,
            crate::he::KeyMode::Test => crate::he::MIN_TEST_BITS,
        };
        if self.he.modulus_bits < min_bits || self.he.modulus_bits % 2 != 0 {
            return Err(bad("he.modulus_bits", format!("must be even and at least {min_bits}")));
        }
        if self.he.frac_bits == 0 || self.he.frac_bits > 62 {
            return Err(bad("he.frac_bits", "must be in 1..=62"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_carry_reference_settings() {
        let bcw = PipelineConfig::preset(DatasetPreset::Bcw);
        assert_eq!((bcw.rep_dim, bcw.ae_hidden, bcw.batch_size), (200, 500, 128));
        assert_eq!((bcw.delta, bcw.lr, bcw.temperature, bcw.lambda), (1.0, 0.005, 2.0, 0.95));
        assert_eq!(bcw.ren_hidden, vec![40, 40, 40]);
        assert_eq!(PipelineConfig::preset(DatasetPreset::Har).lr, 0.001);
        assert_eq!(PipelineConfig::preset(DatasetPreset::Har).delta, 0.5);
        assert_eq!(PipelineConfig::preset(DatasetPreset::Dcc).ae_hidden, 100);
        assert_eq!(PipelineConfig::preset(DatasetPreset::Dcc).delta, 0.6);
        assert!(bcw.validate().is_ok());
    }

    #[test]
    fn validation_names_the_field() {
        let mut c = PipelineConfig::default();
        c.lambda = 1.5;
        match c.validate() {
            Err(Error::Config { field, .. }) => assert_eq!(field, "lambda"),
            other => panic!("unexpected {other:?}"),
        }
        let mut c = PipelineConfig::default();
        c.split_fraction = 1.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn json_roundtrip_and_partial_files() {
        let c = PipelineConfig::default();
        let back: PipelineConfig = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
        let partial: PipelineConfig = serde_json::from_str(r#"{"delta": 0.6, "seed": 4}"#).unwrap();
        assert_eq!((partial.delta, partial.seed, partial.rep_dim), (0.6, 4, 200));
        assert!(serde_json::from_str::<PipelineConfig>(r#"{"dleta": 1}"#).is_err());
    }
}

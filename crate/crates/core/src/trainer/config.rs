//! Training configuration and its `key = value` text form.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::adam::AdamConfig;
use crate::adversarial::AttackConfig;
use crate::augment::AugmentPolicy;
use crate::error::{Error, Result};
use crate::model::{ModelSpec, DEFAULT_FILTERS};

/// Backbone/head knobs that can be set from a config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelOptions {
    pub filters: Vec<usize>,
    pub kernel: usize,
    pub hidden_width: usize,
    pub dropout_rate: f64,
}

impl Default for ModelOptions {
    fn default() -> Self {
        Self {
            filters: DEFAULT_FILTERS.to_vec(),
            kernel: 3,
            hidden_width: 128,
            dropout_rate: 0.3,
        }
    }
}

impl ModelOptions {
    pub fn spec(&self, num_classes: usize, input_size: (usize, usize)) -> ModelSpec {
        let mut spec = ModelSpec::with_filters(num_classes, input_size, &self.filters);
        for b in &mut spec.blocks {
            b.kernel = self.kernel;
        }
        spec.head_hidden_width = self.hidden_width;
        spec.dropout_rate = self.dropout_rate;
        spec
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub initial_lr: f64,
    pub step_size: usize,
    pub gamma: f64,
    pub patience: usize,
    pub freeze_depth: usize,
    pub seed: u64,
    pub adam: AdamConfig,
    pub augment: AugmentPolicy,
    /// FGSM settings for adversarial training; `epsilon = 0` disables it.
    pub attack: AttackConfig,
    pub model: ModelOptions,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 128,
            initial_lr: 1e-3,
            step_size: 3,
            gamma: 0.5,
            patience: 5,
            freeze_depth: 0,
            seed: 0,
            adam: AdamConfig::default(),
            augment: AugmentPolicy::default(),
            attack: AttackConfig {
                epsilon: 0.0,
                ..AttackConfig::default()
            },
            model: ModelOptions::default(),
        }
    }
}

pub const CONFIG_KEYS: [&str; 21] = [
    "epochs",
    "batch_size",
    "initial_lr",
    "step_size",
    "gamma",
    "patience",
    "freeze_depth",
    "seed",
    "beta1",
    "beta2",
    "adam_epsilon",
    "mixup_alpha",
    "cutmix_alpha",
    "augment_probability",
    "fgsm_epsilon",
    "adversarial_fraction",
    "clip",
    "filters",
    "kernel",
    "hidden_width",
    "dropout_rate",
];

fn num<T: std::str::FromStr>(key: &str, value: &str) -> std::result::Result<T, String> {
    value
        .parse()
        .map_err(|_| format!("`{key}` expects a number, got `{value}`"))
}

impl TrainConfig {
    /// Sets one key from its text value.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        let v = value.trim();
        match key {
            "epochs" => self.epochs = num(key, v)?,
            "batch_size" => self.batch_size = num(key, v)?,
            "initial_lr" => self.initial_lr = num(key, v)?,
            "step_size" => self.step_size = num(key, v)?,
            "gamma" => self.gamma = num(key, v)?,
            "patience" => self.patience = num(key, v)?,
            "freeze_depth" => self.freeze_depth = num(key, v)?,
            "seed" => self.seed = num(key, v)?,
            "beta1" => self.adam.beta1 = num(key, v)?,
            "beta2" => self.adam.beta2 = num(key, v)?,
            "adam_epsilon" => self.adam.epsilon = num(key, v)?,
            "mixup_alpha" => self.augment.mixup_alpha = num(key, v)?,
            "cutmix_alpha" => self.augment.cutmix_alpha = num(key, v)?,
            "augment_probability" => self.augment.apply_probability = num(key, v)?,
            "fgsm_epsilon" => self.attack.epsilon = num(key, v)?,
            "adversarial_fraction" => self.attack.adversarial_fraction = num(key, v)?,
            "clip" => {
                self.attack.clip = match v {
                    "true" | "1" | "yes" => true,
                    "false" | "0" | "no" => false,
                    _ => return Err(format!("`clip` expects true or false, got `{v}`")),
                }
            }
            "filters" => {
                self.model.filters = v
                    .split(',')
                    .map(|f| num::<usize>(key, f.trim()))
                    .collect::<std::result::Result<_, _>>()?
            }
            "kernel" => self.model.kernel = num(key, v)?,
            "hidden_width" => self.model.hidden_width = num(key, v)?,
            "dropout_rate" => self.model.dropout_rate = num(key, v)?,
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of `self`. Blank lines and `#`
    /// comments are ignored; unknown keys are errors.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Config {
                line: i + 1,
                message: format!("expected `key = value`, got `{line}`"),
            })?;
            self.set(key.trim(), value)
                .map_err(|message| Error::Config { line: i + 1, message })?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(text)?;
        Ok(c)
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "epochs" => self.epochs.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "initial_lr" => self.initial_lr.to_string(),
            "step_size" => self.step_size.to_string(),
            "gamma" => self.gamma.to_string(),
            "patience" => self.patience.to_string(),
            "freeze_depth" => self.freeze_depth.to_string(),
            "seed" => self.seed.to_string(),
            "beta1" => self.adam.beta1.to_string(),
            "beta2" => self.adam.beta2.to_string(),
            "adam_epsilon" => self.adam.epsilon.to_string(),
            "mixup_alpha" => self.augment.mixup_alpha.to_string(),
            "cutmix_alpha" => self.augment.cutmix_alpha.to_string(),
            "augment_probability" => self.augment.apply_probability.to_string(),
            "fgsm_epsilon" => self.attack.epsilon.to_string(),
            "adversarial_fraction" => self.attack.adversarial_fraction.to_string(),
            "clip" => self.attack.clip.to_string(),
            "filters" => self
                .model
                .filters
                .iter()
                .map(|f| f.to_string())
                .collect::<Vec<_>>()
                .join(","),
            "kernel" => self.model.kernel.to_string(),
            "hidden_width" => self.model.hidden_width.to_string(),
            "dropout_rate" => self.model.dropout_rate.to_string(),
            _ => return None,
        })
    }

    /// Every key with its resolved value; `parse(to_text())` round-trips.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for key in CONFIG_KEYS {
            let _ = writeln!(out, "{key} = {}", self.get(key).expect("known key"));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(self.initial_lr >= 0.0 && self.initial_lr.is_finite()) {
            return bad("initial_lr must be a finite value >= 0");
        }
        if self.step_size == 0 {
            return bad("step_size must be at least 1");
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return bad("gamma must be > 0");
        }
        if self.patience == 0 {
            return bad("patience must be at least 1");
        }
        if !(0.0..1.0).contains(&self.adam.beta1) || !(0.0..1.0).contains(&self.adam.beta2) {
            return bad("Adam betas must be in [0, 1)");
        }
        if !(self.adam.epsilon > 0.0) {
            return bad("adam_epsilon must be > 0");
        }
        self.augment.validate()?;
        self.attack.validate()?;
        if self.model.filters.is_empty() {
            return bad("filters must list at least one block");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let c = TrainConfig::default();
        assert_eq!((c.epochs, c.batch_size, c.patience, c.step_size), (30, 128, 5, 3));
        assert_eq!(c.initial_lr, 1e-3);
        assert_eq!(c.gamma, 0.5);
        assert_eq!(c.attack.adversarial_fraction, 0.5);
        c.validate().unwrap();
    }

    #[test]
    fn parse_and_round_trip() {
        let c = TrainConfig::parse("# comment\nepochs = 4\n\nfilters=8, 16 # inline\nclip = false\n").unwrap();
        assert_eq!(c.epochs, 4);
        assert_eq!(c.model.filters, vec![8, 16]);
        assert!(!c.attack.clip);
        assert_eq!(TrainConfig::parse(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn unknown_keys_name_the_line() {
        let err = TrainConfig::parse("epochs = 2\nlearning_rate = 0.1\n").unwrap_err();
        match err {
            Error::Config { line, message } => {
                assert_eq!(line, 2);
                assert!(message.contains("learning_rate"));
            }
            e => panic!("{e}"),
        }
        assert!(matches!(TrainConfig::parse("epochs = many"), Err(Error::Config { line: 1, .. })));
        assert!(matches!(TrainConfig::parse("epochs"), Err(Error::Config { line: 1, .. })));
    }

    #[test]
    fn validation_rejects_nonsense() {
        for (k, v) in [("epochs", "0"), ("patience", "0"), ("initial_lr", "-1"), ("adversarial_fraction", "2")] {
            let mut c = TrainConfig::default();
            c.set(k, v).unwrap();
            assert!(c.validate().is_err(), "{k}={v}");
        }
    }
}

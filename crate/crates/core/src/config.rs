//! Flat `key=value` run configuration shared by all commands.

use std::path::Path;

use crate::attention::{BlendWeights, LossWeights};
use crate::error::{Error, Result};
use crate::model::train::{AblationMode, TrainConfig};
use crate::model::BackboneConfig;
use crate::synth::transform::TransformOptions;
use crate::synth::SynthConfig;

pub const KEYS: &[&str] = &[
    "classes",
    "samples_per_class",
    "size",
    "seed",
    "epsilon",
    "jitter",
    "channels",
    "kernel",
    "pool",
    "hook",
    "lr",
    "momentum",
    "lr_decay",
    "lr_period",
    "epochs",
    "batch_size",
    "alpha",
    "beta",
    "gamma",
    "delta",
    "lambda",
    "mu",
    "crop",
    "flip",
    "mode",
];

/// Raw settings; cross-field constraints are checked by [`RunConfig::resolve`].
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub synth: SynthConfig,
    pub backbone: BackboneConfig,
    pub train: TrainConfig,
    alpha: f64,
    beta: f64,
    gamma: f64,
    delta: f64,
    lambda: f64,
    mu: f64,
    pub mode: AblationMode,
    /// Keys explicitly set from a file or flag.
    pub set_keys: Vec<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let b = BlendWeights::DEFAULT;
        let l = LossWeights::DEFAULT;
        Self {
            synth: SynthConfig::default(),
            backbone: BackboneConfig::default(),
            train: TrainConfig::default(),
            alpha: b.alpha(),
            beta: b.beta(),
            gamma: b.gamma(),
            delta: l.delta,
            lambda: l.lambda,
            mu: l.mu,
            mode: AblationMode::Full,
            set_keys: Vec::new(),
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for key {key:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!(
            "invalid boolean {value:?} for key {key:?}"
        ))),
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "classes" => {
                self.synth.classes = parse(key, value)?;
                self.backbone.classes = self.synth.classes;
            }
            "samples_per_class" => self.synth.samples_per_class = parse(key, value)?,
            "size" => {
                self.synth.size = parse(key, value)?;
                self.backbone.input_size = self.synth.size;
            }
            "seed" => {
                self.synth.seed = parse(key, value)?;
                self.train.seed = self.synth.seed;
            }
            "epsilon" => self.synth.epsilon = parse(key, value)?,
            "jitter" => self.synth.jitter = parse(key, value)?,
            "channels" => {
                self.backbone.channels = value
                    .split(',')
                    .map(|c| parse(key, c))
                    .collect::<Result<_>>()?
            }
            "kernel" => self.backbone.kernel = parse(key, value)?,
            "pool" => self.backbone.pool = parse(key, value)?,
            "hook" => self.backbone.hook = parse(key, value)?,
            "lr" => self.train.lr = parse(key, value)?,
            "momentum" => self.train.momentum = parse(key, value)?,
            "lr_decay" => self.train.lr_decay = parse(key, value)?,
            "lr_period" => self.train.lr_period = parse(key, value)?,
            "epochs" => self.train.epochs = parse(key, value)?,
            "batch_size" => self.train.batch_size = parse(key, value)?,
            "alpha" => self.alpha = parse(key, value)?,
            "beta" => self.beta = parse(key, value)?,
            "gamma" => self.gamma = parse(key, value)?,
            "delta" => self.delta = parse(key, value)?,
            "lambda" => self.lambda = parse(key, value)?,
            "mu" => self.mu = parse(key, value)?,
            "crop" => self.train.augment.crop = parse_bool(key, value)?,
            "flip" => self.train.augment.flip = parse_bool(key, value)?,
            "mode" => self.mode = value.trim().parse()?,
            other => {
                return Err(Error::Config(format!(
                    "unknown configuration key {other:?}"
                )))
            }
        }
        self.set_keys.push(key.to_string());
        Ok(())
    }

    pub fn is_set(&self, key: &str) -> bool {
        self.set_keys.iter().any(|k| k == key)
    }

    /// Applies `key=value` lines; blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str, file: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                file: file.to_string(),
                line: i + 1,
                message: format!("expected key=value, got {line:?}"),
            })?;
            self.set(key.trim(), value).map_err(|e| Error::Parse {
                file: file.to_string(),
                line: i + 1,
                message: e.to_string(),
            })?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.apply_text(&text, &path.display().to_string())
    }

    /// Validates everything and folds blend/loss weights and the ablation
    /// mode into the training config.
    pub fn resolve(mut self) -> Result<RunConfig> {
        let blend = BlendWeights::new(self.alpha, self.beta, self.gamma)?;
        let loss = LossWeights::new(self.delta, self.lambda, self.mu)?;
        let (blend, loss) = self.mode.apply(blend, loss);
        self.train.blend = blend;
        self.train.loss = loss;
        self.synth.validate()?;
        self.backbone.validate()?;
        self.train.validate()?;
        Ok(self)
    }

    pub fn augment(&self) -> TransformOptions {
        self.train.augment
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_file_and_resolves() {
        let mut c = RunConfig::default();
        c.apply_text(
            "# run\nalpha=0.5\nbeta = 0.5\ngamma=0\nseed=42\nchannels=4,8\n",
            "run.cfg",
        )
        .unwrap();
        let r = c.resolve().unwrap();
        assert_eq!(r.train.blend, BlendWeights::new(0.5, 0.5, 0.0).unwrap());
        assert_eq!((r.synth.seed, r.train.seed), (42, 42));
        assert_eq!(r.backbone.channels, vec![4, 8]);
    }

    #[test]
    fn unknown_key_is_named() {
        let mut c = RunConfig::default();
        let err = c
            .apply_text("alhpa=0.3\n", "run.cfg")
            .unwrap_err()
            .to_string();
        assert!(err.contains("alhpa") && err.contains(":1:"), "{err}");
    }

    #[test]
    fn blend_constraint_enforced() {
        let mut c = RunConfig::default();
        c.set("alpha", "0.5").unwrap();
        assert!(c.resolve().is_err());
    }

    #[test]
    fn baseline_mode_zeroes_attention_terms() {
        let mut c = RunConfig::default();
        c.set("mode", "baseline").unwrap();
        let r = c.resolve().unwrap();
        assert!(r.train.blend.is_identity());
        assert_eq!((r.train.loss.delta, r.train.loss.lambda), (0.0, 0.0));
    }
}

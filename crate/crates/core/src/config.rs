//! Flat `key = value` experiment configuration.
//!
//! A config file is a TOML document without tables. Every key maps onto one
//! field of the training, pipeline, generator or classifier configuration;
//! later assignments (for instance command-line overrides) win.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::Value;

use crate::classifier::{ClassifierConfig, ClassifierInput};
use crate::generator::{GeneratorConfig, TapLayer};
use crate::losses::RegressionTarget;
use crate::pipeline::{InputMode, PipelineConfig};
use crate::trainer::TrainConfig;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub train: TrainConfig,
    pub pipeline: PipelineConfig,
    pub generator: GeneratorConfig,
    pub classifier: ClassifierConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let pipeline = PipelineConfig::default();
        let generator = GeneratorConfig {
            input_size: pipeline.patch_size,
            ..Default::default()
        };
        Self {
            train: TrainConfig::default(),
            pipeline,
            generator,
            classifier: ClassifierConfig::default(),
        }
    }
}

/// Every accepted key, in documentation order.
pub const KEYS: &[&str] = &[
    "batch_size",
    "epochs",
    "base_lr",
    "decay_factor",
    "decay_every_steps",
    "warmup",
    "adam_beta1",
    "adam_beta2",
    "adam_eps",
    "alpha1",
    "alpha2",
    "alpha3",
    "margin",
    "regression_target",
    "seed",
    "checkpoint_dir",
    "checkpoint_every_steps",
    "max_steps",
    "input_mode",
    "patch_size",
    "eval_patches",
    "encoder_widths",
    "decoder_widths",
    "use_pretrained_encoder",
    "pretrained_path",
    "tap_layers",
    "classifier_input",
    "classifier_widths",
];

fn bad(key: &str, v: &Value, want: &str) -> Error {
    Error::Config(format!("{key}: expected {want}, got {v}"))
}

fn as_u64(key: &str, v: &Value) -> Result<u64> {
    v.as_integer()
        .and_then(|i| u64::try_from(i).ok())
        .ok_or_else(|| bad(key, v, "a non-negative integer"))
}

fn as_f64(key: &str, v: &Value) -> Result<f64> {
    v.as_float()
        .or_else(|| v.as_integer().map(|i| i as f64))
        .ok_or_else(|| bad(key, v, "a number"))
}

fn as_bool(key: &str, v: &Value) -> Result<bool> {
    v.as_bool().ok_or_else(|| bad(key, v, "true or false"))
}

fn as_str<'a>(key: &str, v: &'a Value) -> Result<&'a str> {
    v.as_str().ok_or_else(|| bad(key, v, "a string"))
}

fn as_widths<const N: usize>(key: &str, v: &Value) -> Result<[usize; N]> {
    let arr = v.as_array().ok_or_else(|| bad(key, v, "an array"))?;
    let items: Vec<usize> = arr
        .iter()
        .map(|x| as_u64(key, x).map(|u| u as usize))
        .collect::<Result<_>>()?;
    items
        .try_into()
        .map_err(|_| bad(key, v, &format!("an array of {N} integers")))
}

impl ExperimentConfig {
    /// Applies one assignment.
    pub fn set(&mut self, key: &str, v: &Value) -> Result<()> {
        let t = &mut self.train;
        match key {
            "batch_size" => t.batch_size = as_u64(key, v)? as usize,
            "epochs" => t.epochs = as_u64(key, v)?,
            "base_lr" => t.base_lr = as_f64(key, v)?,
            "decay_factor" => t.decay_factor = as_f64(key, v)?,
            "decay_every_steps" => t.decay_every_steps = as_u64(key, v)?,
            "warmup" => t.warmup = as_bool(key, v)?,
            "adam_beta1" => t.adam.beta1 = as_f64(key, v)?,
            "adam_beta2" => t.adam.beta2 = as_f64(key, v)?,
            "adam_eps" => t.adam.eps = as_f64(key, v)?,
            "alpha1" => t.loss_weights.alpha1 = as_f64(key, v)?,
            "alpha2" => t.loss_weights.alpha2 = as_f64(key, v)?,
            "alpha3" => t.loss_weights.alpha3 = as_f64(key, v)?,
            "margin" => t.triplet.margin = as_f64(key, v)?,
            "regression_target" => {
                t.regression_target = match as_str(key, v)? {
                    "live_only" => RegressionTarget::LiveOnly,
                    "live_and_spoof" => RegressionTarget::LiveAndSpoof,
                    _ => return Err(bad(key, v, "\"live_only\" or \"live_and_spoof\"")),
                }
            }
            "seed" => {
                let s = as_u64(key, v)?;
                t.seed = s;
                self.pipeline.seed = s;
            }
            "checkpoint_dir" => t.checkpoint_dir = PathBuf::from(as_str(key, v)?),
            "checkpoint_every_steps" => t.checkpoint_every_steps = as_u64(key, v)?,
            "max_steps" => t.max_steps = as_u64(key, v)?,
            "input_mode" => self.pipeline.input_mode = InputMode::parse(as_str(key, v)?)?,
            "patch_size" => {
                let s = as_u64(key, v)? as usize;
                self.pipeline.patch_size = s;
                self.generator.input_size = s;
            }
            "eval_patches" => self.pipeline.eval_patches = as_u64(key, v)? as usize,
            "encoder_widths" => self.generator.encoder_widths = as_widths(key, v)?,
            "decoder_widths" => self.generator.decoder_widths = as_widths(key, v)?,
            "use_pretrained_encoder" => self.generator.use_pretrained_encoder = as_bool(key, v)?,
            "pretrained_path" => {
                self.generator.pretrained_path = Some(PathBuf::from(as_str(key, v)?))
            }
            "tap_layers" => {
                let arr = v.as_array().ok_or_else(|| bad(key, v, "an array of layer names"))?;
                self.generator.tap_layers = arr
                    .iter()
                    .map(|x| TapLayer::parse(as_str(key, x)?))
                    .collect::<Result<_>>()?;
            }
            "classifier_input" => {
                self.classifier.input_mode = match as_str(key, v)? {
                    "overlay" => ClassifierInput::Overlay,
                    "cue_only" => ClassifierInput::CueOnly,
                    _ => return Err(bad(key, v, "\"overlay\" or \"cue_only\"")),
                }
            }
            "classifier_widths" => self.classifier.backbone_widths = as_widths(key, v)?,
            _ => {
                return Err(Error::Config(format!(
                    "unknown key {key:?}; valid keys: {}",
                    KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }

    /// Applies every assignment of a flat TOML document.
    pub fn apply_toml(&mut self, text: &str, origin: &Path) -> Result<()> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Parse {
            path: origin.to_path_buf(),
            line: e
                .span()
                .map(|s| text[..s.start].matches('\n').count() + 1)
                .unwrap_or(0),
            message: e.message().to_string(),
        })?;
        for (k, v) in &table {
            if v.is_table() {
                return Err(Error::Config(format!(
                    "{}: tables are not supported (key {k:?})",
                    origin.display()
                )));
            }
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::default();
        cfg.apply_toml(&text, path)?;
        Ok(cfg)
    }

    /// `key=value` override; the value is read as TOML and falls back to a
    /// bare string.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (k, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
        let (k, raw) = (k.trim(), raw.trim());
        let v = format!("v = {raw}")
            .parse::<toml::Table>()
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| Value::String(raw.to_string()));
        self.set(k, &v)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.pipeline.validate()?;
        self.generator.validate()?;
        self.classifier.validate()?;
        if self.generator.input_size != self.pipeline.patch_size {
            return Err(Error::Config(format!(
                "generator input_size {} differs from patch_size {}",
                self.generator.input_size, self.pipeline.patch_size
            )));
        }
        Ok(())
    }
}

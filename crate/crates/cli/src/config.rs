//! Flat `key = value` run configuration.

use std::collections::HashSet;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use cpc_core::data::{AnomalyKind, SynthConfig};
use cpc_core::model::{default_encoder_layers, CpcConfig};
use cpc_core::scorer::Ridge;
use cpc_core::trainer::TrainConfig;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{origin}: unknown key {key:?} (see --help for the list)")]
    UnknownKey { origin: String, key: String },
    #[error("{origin}: expected `key = value`, got {line:?}")]
    Syntax { origin: String, line: String },
    #[error("{origin}: key {key:?} given twice")]
    Duplicate { origin: String, key: String },
    #[error("{origin}: {key} = {value:?}: {reason}")]
    Value {
        origin: String,
        key: String,
        value: String,
        reason: String,
    },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

/// Every option of every subcommand. `0` in the model-shape keys means
/// "derive from the channel count".
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub length: usize,
    pub test_length: usize,
    pub channels: usize,
    pub anomaly_fraction: f64,
    pub anomaly_kinds: Vec<AnomalyKind>,
    pub noise_scale: f64,
    pub obs_len: usize,
    pub pred_len: usize,
    pub stride: usize,
    pub latent_dim: usize,
    pub context_dim: usize,
    pub encoder_layers: usize,
    pub encoder_hidden: usize,
    pub ar_layers: usize,
    pub head_hidden: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub epochs: usize,
    pub batch_m: usize,
    pub steps_per_epoch: usize,
    pub ridge: Ridge,
    pub out: PathBuf,
    pub checkpoint: Option<PathBuf>,
    pub report: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let synth = SynthConfig::default();
        let train = TrainConfig::default();
        Self {
            seed: synth.seed,
            length: synth.length,
            test_length: synth.length,
            channels: synth.channels,
            anomaly_fraction: synth.anomaly_fraction,
            anomaly_kinds: synth.kinds,
            noise_scale: synth.noise_scale,
            obs_len: 10,
            pred_len: 10,
            stride: 1,
            latent_dim: 0,
            context_dim: 0,
            encoder_layers: 0,
            encoder_hidden: 32,
            ar_layers: 2,
            head_hidden: 32,
            learning_rate: train.learning_rate,
            beta1: train.beta1,
            beta2: train.beta2,
            epsilon: train.epsilon,
            epochs: train.epochs,
            batch_m: train.batch_m,
            steps_per_epoch: train.steps_per_epoch,
            ridge: Ridge::Auto,
            out: PathBuf::from("cpc-out"),
            checkpoint: None,
            report: None,
        }
    }
}

/// `(key, description)` in help order.
pub const KEYS: [(&str, &str); 27] = [
    ("seed", "seed for data synthesis, initialization and batch sampling"),
    ("length", "synthetic training rows T"),
    ("test_length", "synthetic test rows continuing the training series"),
    ("channels", "synthetic channels m"),
    ("anomaly_fraction", "fraction of labeled test rows, in [0, 0.5]"),
    ("anomaly_kinds", "comma list of spike, level-shift, correlation-break, stuck-channel"),
    ("noise_scale", "synthetic noise standard deviation"),
    ("obs_len", "observation window length"),
    ("pred_len", "prediction horizon k (one head per step)"),
    ("stride", "window stride"),
    ("latent_dim", "latent dimension n (0: max(1, m/2))"),
    ("context_dim", "context dimension (0: 2n)"),
    ("encoder_layers", "encoder affine layers (0: derived from m)"),
    ("encoder_hidden", "encoder hidden width"),
    ("ar_layers", "stacked recurrent layers"),
    ("head_hidden", "prediction head hidden width"),
    ("learning_rate", "Adam step size"),
    ("beta1", "Adam first-moment decay"),
    ("beta2", "Adam second-moment decay"),
    ("epsilon", "Adam denominator offset"),
    ("epochs", "training epochs"),
    ("batch_m", "candidates per contrastive batch M"),
    ("steps_per_epoch", "optimizer steps per epoch"),
    ("ridge", "covariance ridge: auto or a non-negative number"),
    ("out", "output directory for synth and full"),
    ("checkpoint", "checkpoint path (empty: <out>/model.ckpt)"),
    ("report", "evaluation report path (empty: <out>/report.json)"),
];

fn parse<T: FromStr>(origin: &str, key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: Display,
{
    value.parse().map_err(|e: T::Err| ConfigError::Value {
        origin: origin.into(),
        key: key.into(),
        value: value.into(),
        reason: e.to_string(),
    })
}

fn optional_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

impl RunConfig {
    /// Current value of `key` as it would be written in a config file.
    pub fn get(&self, key: &str) -> Option<String> {
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        Some(match key {
            "seed" => self.seed.to_string(),
            "length" => self.length.to_string(),
            "test_length" => self.test_length.to_string(),
            "channels" => self.channels.to_string(),
            "anomaly_fraction" => self.anomaly_fraction.to_string(),
            "anomaly_kinds" => self.anomaly_kinds.iter().map(|k| k.as_str()).collect::<Vec<_>>().join(","),
            "noise_scale" => self.noise_scale.to_string(),
            "obs_len" => self.obs_len.to_string(),
            "pred_len" => self.pred_len.to_string(),
            "stride" => self.stride.to_string(),
            "latent_dim" => self.latent_dim.to_string(),
            "context_dim" => self.context_dim.to_string(),
            "encoder_layers" => self.encoder_layers.to_string(),
            "encoder_hidden" => self.encoder_hidden.to_string(),
            "ar_layers" => self.ar_layers.to_string(),
            "head_hidden" => self.head_hidden.to_string(),
            "learning_rate" => self.learning_rate.to_string(),
            "beta1" => self.beta1.to_string(),
            "beta2" => self.beta2.to_string(),
            "epsilon" => self.epsilon.to_string(),
            "epochs" => self.epochs.to_string(),
            "batch_m" => self.batch_m.to_string(),
            "steps_per_epoch" => self.steps_per_epoch.to_string(),
            "ridge" => match self.ridge {
                Ridge::Auto => "auto".into(),
                Ridge::Fixed(v) => v.to_string(),
            },
            "out" => self.out.display().to_string(),
            "checkpoint" => path(&self.checkpoint),
            "report" => path(&self.report),
            _ => return None,
        })
    }

    /// Sets one key from its text form. `origin` names the source in errors.
    pub fn set(&mut self, origin: &str, key: &str, value: &str) -> Result<(), ConfigError> {
        let value = value.trim();
        match key {
            "seed" => self.seed = parse(origin, key, value)?,
            "length" => self.length = parse(origin, key, value)?,
            "test_length" => self.test_length = parse(origin, key, value)?,
            "channels" => self.channels = parse(origin, key, value)?,
            "anomaly_fraction" => self.anomaly_fraction = parse(origin, key, value)?,
            "anomaly_kinds" => {
                self.anomaly_kinds = value
                    .split(',')
                    .filter(|s| !s.trim().is_empty())
                    .map(|s| parse(origin, key, s))
                    .collect::<Result<_, _>>()?
            }
            "noise_scale" => self.noise_scale = parse(origin, key, value)?,
            "obs_len" => self.obs_len = parse(origin, key, value)?,
            "pred_len" => self.pred_len = parse(origin, key, value)?,
            "stride" => self.stride = parse(origin, key, value)?,
            "latent_dim" => self.latent_dim = parse(origin, key, value)?,
            "context_dim" => self.context_dim = parse(origin, key, value)?,
            "encoder_layers" => self.encoder_layers = parse(origin, key, value)?,
            "encoder_hidden" => self.encoder_hidden = parse(origin, key, value)?,
            "ar_layers" => self.ar_layers = parse(origin, key, value)?,
            "head_hidden" => self.head_hidden = parse(origin, key, value)?,
            "learning_rate" => self.learning_rate = parse(origin, key, value)?,
            "beta1" => self.beta1 = parse(origin, key, value)?,
            "beta2" => self.beta2 = parse(origin, key, value)?,
            "epsilon" => self.epsilon = parse(origin, key, value)?,
            "epochs" => self.epochs = parse(origin, key, value)?,
            "batch_m" => self.batch_m = parse(origin, key, value)?,
            "steps_per_epoch" => self.steps_per_epoch = parse(origin, key, value)?,
            "ridge" => {
                self.ridge = if value == "auto" {
                    Ridge::Auto
                } else {
                    Ridge::Fixed(parse(origin, key, value)?)
                }
            }
            "out" => self.out = PathBuf::from(value),
            "checkpoint" => self.checkpoint = optional_path(value),
            "report" => self.report = optional_path(value),
            _ => {
                return Err(ConfigError::UnknownKey {
                    origin: origin.into(),
                    key: key.into(),
                })
            }
        }
        Ok(())
    }

    /// Applies `key = value` lines. Blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str, name: &str) -> Result<(), ConfigError> {
        let mut seen = HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let origin = format!("{name}:{}", i + 1);
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                origin: origin.clone(),
                line: raw.into(),
            })?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(ConfigError::Duplicate {
                    origin,
                    key: key.into(),
                });
            }
            self.set(&origin, key, value)?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<(), ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.into(),
            source,
        })?;
        self.apply_text(&text, &path.display().to_string())
    }

    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            length: self.length,
            channels: self.channels,
            seed: self.seed,
            anomaly_fraction: self.anomaly_fraction,
            kinds: self.anomaly_kinds.clone(),
            noise_scale: self.noise_scale,
            ..SynthConfig::default()
        }
    }

    /// Model shape for data with `channels` columns.
    pub fn cpc_config(&self, channels: usize) -> CpcConfig {
        let latent_dim = if self.latent_dim == 0 { (channels / 2).max(1) } else { self.latent_dim };
        CpcConfig {
            channels,
            latent_dim,
            context_dim: if self.context_dim == 0 { 2 * latent_dim } else { self.context_dim },
            horizon: self.pred_len,
            obs_len: self.obs_len,
            encoder_layers: if self.encoder_layers == 0 {
                default_encoder_layers(channels)
            } else {
                self.encoder_layers
            },
            encoder_hidden: self.encoder_hidden,
            ar_layers: self.ar_layers,
            head_hidden: self.head_hidden,
            seed: self.seed,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
            epochs: self.epochs,
            batch_m: self.batch_m,
            steps_per_epoch: self.steps_per_epoch,
            seed: self.seed,
            checkpoint_every: 0,
            checkpoint_path: None,
        }
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.checkpoint.clone().unwrap_or_else(|| self.out.join("model.ckpt"))
    }

    pub fn report_path(&self) -> PathBuf {
        self.report.clone().unwrap_or_else(|| self.out.join("report.json"))
    }

    /// Checks every derived config, so no command starts with bad settings.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |e: &dyn Display| ConfigError::Invalid(e.to_string());
        self.synth_config().validate().map_err(|e| invalid(&e))?;
        if self.test_length == 0 {
            return Err(ConfigError::Invalid("test_length must be ≥ 1".into()));
        }
        if self.stride == 0 {
            return Err(ConfigError::Invalid("stride must be ≥ 1".into()));
        }
        self.cpc_config(self.channels).validate().map_err(|e| invalid(&e))?;
        self.train_config().validate().map_err(|e| invalid(&e))?;
        if let Ridge::Fixed(r) = self.ridge {
            if !(r >= 0.0 && r.is_finite()) {
                return Err(ConfigError::Invalid(format!("ridge must be auto or ≥ 0, got {r}")));
            }
        }
        Ok(())
    }

    /// Help text listing every key with its default.
    pub fn keys_help() -> String {
        let defaults = RunConfig::default();
        let mut s = String::from("Config keys (file: one `key = value` per line, # comments; flags override):\n");
        for (key, about) in KEYS {
            let value = defaults.get(key).expect("listed key has a value");
            let shown = if value.is_empty() { "\"\"".to_string() } else { value };
            s.push_str(&format!("  {key:<16} {shown:<28} {about}\n"));
        }
        s
    }
}

//! Training configuration and its flat dotted-key text form.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{BaseAugConfig, DatasetSpec};
use crate::encoder::{Architecture, EncoderConfig, Tap};
use crate::error::{Error, Result};
use crate::eval::ProbeConfig;
use crate::sam::{SamConfig, DEFAULT_RHO};

/// Dotted key to raw value text.
pub type FlatConfig = BTreeMap<String, String>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamSettings {
    pub enabled: bool,
    pub rho: f64,
    pub adaptive: bool,
    pub grad_eps: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FftSettings {
    pub enabled: bool,
    pub alpha: f64,
    /// Epochs trained with base views only before mixing starts.
    pub warmup_epochs: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchKind {
    Mlp,
    SmallConv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderSettings {
    pub arch: ArchKind,
    pub hidden: Vec<usize>,
    pub channels: [usize; 3],
    pub feature_dim: usize,
    pub projection_hidden: usize,
    pub projection_dim: usize,
}

impl EncoderSettings {
    pub fn build(&self, input: (usize, usize, usize)) -> EncoderConfig {
        EncoderConfig {
            architecture: match self.arch {
                ArchKind::Mlp => Architecture::Mlp {
                    hidden: self.hidden.clone(),
                },
                ArchKind::SmallConv => Architecture::SmallConv { channels: self.channels },
            },
            input,
            feature_dim: self.feature_dim,
            projection_hidden: self.projection_hidden,
            projection_dim: self.projection_dim,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub data: DatasetSpec,
    pub batch_size: usize,
    pub epochs: usize,
    pub tau: f64,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub lr: f64,
    pub sam: SamSettings,
    pub fft: FftSettings,
    pub encoder: EncoderSettings,
    pub aug: BaseAugConfig,
    pub probe: ProbeConfig,
    /// Also checkpoint every this many epochs; 0 writes only at the end.
    pub checkpoint_every: usize,
    /// Record elapsed seconds in the metrics stream. Off by default so that
    /// repeated runs produce identical streams.
    pub record_wall_clock: bool,
    pub resume: Option<PathBuf>,
    /// Fault injection: the objective returns NaN at this global step.
    pub nan_at_step: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            data: DatasetSpec::default(),
            batch_size: 16,
            epochs: 50,
            tau: 0.5,
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            lr: 0.05,
            sam: SamSettings {
                enabled: false,
                rho: DEFAULT_RHO,
                adaptive: false,
                grad_eps: 1e-12,
            },
            fft: FftSettings {
                enabled: false,
                alpha: 0.2,
                warmup_epochs: 0,
            },
            encoder: EncoderSettings {
                arch: ArchKind::Mlp,
                hidden: vec![128],
                channels: [8, 16, 32],
                feature_dim: 64,
                projection_hidden: 64,
                projection_dim: 32,
            },
            aug: BaseAugConfig::default(),
            probe: ProbeConfig::default(),
            checkpoint_every: 0,
            record_wall_clock: false,
            resume: None,
            nan_at_step: None,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse `{value}`")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

fn parse_opt_path(value: &str) -> Option<PathBuf> {
    let v = value.trim();
    (!v.is_empty() && v != "none").then(|| PathBuf::from(v))
}

impl TrainConfig {
    /// Sets one dotted key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "data" => self.data = value.parse()?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "tau" => self.tau = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "output_dir" => self.output_dir = PathBuf::from(value),
            "optimizer.lr" => self.lr = parse(key, value)?,
            "sam.enabled" => self.sam.enabled = parse(key, value)?,
            "sam.rho" => self.sam.rho = parse(key, value)?,
            "sam.adaptive" => self.sam.adaptive = parse(key, value)?,
            "sam.grad_eps" => self.sam.grad_eps = parse(key, value)?,
            "fft.enabled" => self.fft.enabled = parse(key, value)?,
            "fft.alpha" => self.fft.alpha = parse(key, value)?,
            "fft.warmup_epochs" => self.fft.warmup_epochs = parse(key, value)?,
            "encoder.arch" => {
                self.encoder.arch = match value.trim() {
                    "mlp" => ArchKind::Mlp,
                    "small_conv" => ArchKind::SmallConv,
                    other => return Err(Error::Config(format!("{key}: unknown architecture `{other}`"))),
                }
            }
            "encoder.hidden" => self.encoder.hidden = parse_list(key, value)?,
            "encoder.channels" => {
                let v = parse_list(key, value)?;
                self.encoder.channels = v
                    .try_into()
                    .map_err(|_| Error::Config(format!("{key}: expected three channel counts")))?;
            }
            "encoder.feature_dim" => self.encoder.feature_dim = parse(key, value)?,
            "encoder.projection_hidden" => self.encoder.projection_hidden = parse(key, value)?,
            "encoder.projection_dim" => self.encoder.projection_dim = parse(key, value)?,
            "aug.crop_min_scale" => self.aug.crop_scale.0 = parse(key, value)?,
            "aug.crop_max_scale" => self.aug.crop_scale.1 = parse(key, value)?,
            "aug.crop_min_ratio" => self.aug.crop_ratio.0 = parse(key, value)?,
            "aug.crop_max_ratio" => self.aug.crop_ratio.1 = parse(key, value)?,
            "aug.flip_p" => self.aug.flip_p = parse(key, value)?,
            "aug.jitter_strength" => self.aug.jitter_strength = parse(key, value)?,
            "aug.jitter_p" => self.aug.jitter_p = parse(key, value)?,
            "aug.grayscale_p" => self.aug.grayscale_p = parse(key, value)?,
            "probe.epochs" => self.probe.epochs = parse(key, value)?,
            "probe.lr" => self.probe.lr = parse(key, value)?,
            "probe.tau" => self.probe.tau = parse(key, value)?,
            "probe.seed" => self.probe.seed = parse(key, value)?,
            "probe.batch_size" => self.probe.batch_size = parse(key, value)?,
            "probe.tap" => {
                self.probe.tap = match value.trim() {
                    "backbone" => Tap::Backbone,
                    "projection" => Tap::Projection,
                    other => return Err(Error::Config(format!("{key}: unknown tap `{other}`"))),
                }
            }
            "checkpoint.every" => self.checkpoint_every = parse(key, value)?,
            "metrics.wall_clock" => self.record_wall_clock = parse(key, value)?,
            "resume" => self.resume = parse_opt_path(value),
            "fault.nan_at_step" => {
                self.nan_at_step = match value.trim() {
                    "" | "none" => None,
                    v => Some(parse(key, v)?),
                }
            }
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn apply(&mut self, flat: &FlatConfig) -> Result<()> {
        for (k, v) in flat {
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn from_flat(flat: &FlatConfig) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply(flat)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config(format!(
                "batch_size must be at least 2 for in-batch negatives, got {}",
                self.batch_size
            )));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if !(self.tau > 0.0) {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        self.sam_config().validate()?;
        if !(0.0..=1.0).contains(&self.fft.alpha) {
            return Err(Error::Config(format!("fft.alpha must lie in [0, 1], got {}", self.fft.alpha)));
        }
        let e = &self.encoder;
        if e.feature_dim == 0 || e.projection_hidden == 0 || e.projection_dim == 0 || e.hidden.contains(&0) || e.channels.contains(&0) {
            return Err(Error::Config("encoder dimensions must be positive".into()));
        }
        self.aug.validate()?;
        self.probe.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    /// Optimizer settings with `eta` taken from `optimizer.lr`.
    pub fn sam_config(&self) -> SamConfig {
        SamConfig {
            rho: self.sam.rho,
            eta: self.lr,
            adaptive: self.sam.adaptive,
            grad_eps: self.sam.grad_eps,
        }
    }

    /// SHA-256 over every setting that influences the learned parameters.
    /// Paths, run length and logging switches are excluded so that a run
    /// can be resumed with more epochs or from another directory.
    pub fn config_hash(&self) -> String {
        let mut view = self.clone();
        view.output_dir = PathBuf::new();
        view.epochs = 0;
        view.checkpoint_every = 0;
        view.record_wall_clock = false;
        view.resume = None;
        view.nan_at_step = None;
        view.probe = ProbeConfig::default();
        let json = serde_json::to_vec(&view).expect("config serialises");
        hex::encode(Sha256::digest(json))
    }
}

/// Reads flat dotted-key text (`sam.rho = 0.05`, tables allowed) into raw
/// string values. Arrays become comma-separated lists.
pub fn parse_flat(text: &str) -> Result<FlatConfig> {
    let table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
    let mut out = FlatConfig::new();
    flatten("", &toml::Value::Table(table), &mut out)?;
    Ok(out)
}

fn flatten(prefix: &str, value: &toml::Value, out: &mut FlatConfig) -> Result<()> {
    use toml::Value;
    let text = match value {
        Value::Table(t) => {
            for (k, v) in t {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, v, out)?;
            }
            return Ok(());
        }
        Value::String(s) => s.clone(),
        Value::Integer(i) => i.to_string(),
        Value::Float(f) => f.to_string(),
        Value::Boolean(b) => b.to_string(),
        Value::Array(items) => {
            let mut parts = Vec::with_capacity(items.len());
            for item in items {
                match item {
                    Value::Integer(i) => parts.push(i.to_string()),
                    Value::Float(f) => parts.push(f.to_string()),
                    Value::String(s) => parts.push(s.clone()),
                    _ => return Err(Error::Config(format!("{prefix}: unsupported array element"))),
                }
            }
            parts.join(",")
        }
        Value::Datetime(_) => return Err(Error::Config(format!("{prefix}: datetimes are not supported"))),
    };
    out.insert(prefix.to_string(), text);
    Ok(())
}

pub fn load_flat(path: &Path) -> Result<FlatConfig> {
    parse_flat(&fs::read_to_string(path)?)
}

/// Splits a `key=value` override.
pub fn parse_override(text: &str) -> Result<(String, String)> {
    let (k, v) = text
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{text}` is not key=value")))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

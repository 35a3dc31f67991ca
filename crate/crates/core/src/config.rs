//! Training configuration and its `key = value` file format.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::{AggregationMode, Norm};

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum InitStrategy {
    #[default]
    Random,
    /// Warm start E and R from a checkpoint; the projection is still drawn at
    /// random.
    Pretrained(PathBuf),
}

impl fmt::Display for InitStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            InitStrategy::Random => f.write_str("random"),
            InitStrategy::Pretrained(p) => write!(f, "{}", p.display()),
        }
    }
}

/// Joint image/structure model or the structure-only baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ModelKind {
    #[default]
    Ikrl,
    Transe,
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ikrl" => Ok(ModelKind::Ikrl),
            "transe" => Ok(ModelKind::Transe),
            other => Err(Error::Config(format!(
                "unknown model {other:?} (expected ikrl|transe)"
            ))),
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::Ikrl => "ikrl",
            ModelKind::Transe => "transe",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub model: ModelKind,
    pub margin: f64,
    pub lr_start: f64,
    pub lr_end: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub aggregation: AggregationMode,
    pub norm: Norm,
    pub init: InitStrategy,
    pub seed: u64,
    /// Stop gradients from flowing into `e_S` through the attention weights.
    pub attention_detached: bool,
    pub entity_dim: usize,
    pub image_dim: usize,
    pub max_images: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelKind::Ikrl,
            margin: 4.0,
            lr_start: 0.001,
            lr_end: 0.0002,
            epochs: 1000,
            batch_size: 100,
            aggregation: AggregationMode::Att,
            norm: Norm::L1,
            init: InitStrategy::Random,
            seed: 0,
            attention_detached: false,
            entity_dim: 50,
            image_dim: 4096,
            max_images: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if !(self.margin > 0.0 && self.margin.is_finite()) {
            return fail(format!("margin must be positive, got {}", self.margin));
        }
        if !(self.lr_end > 0.0 && self.lr_start >= self.lr_end && self.lr_start.is_finite()) {
            return fail(format!(
                "learning rates must satisfy lr_start >= lr_end > 0, got {} and {}",
                self.lr_start, self.lr_end
            ));
        }
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1".to_owned());
        }
        if self.entity_dim == 0 || self.image_dim == 0 {
            return fail("dimensions must be at least 1".to_owned());
        }
        if self.max_images == 0 {
            return fail("max_images must be at least 1".to_owned());
        }
        Ok(())
    }

    /// Learning rate for epoch `k` of `epochs`, declining linearly from
    /// `lr_start` to `lr_end`.
    pub fn learning_rate(&self, epoch: usize) -> f64 {
        if self.epochs <= 1 {
            return self.lr_start;
        }
        let frac = epoch as f64 / (self.epochs - 1) as f64;
        self.lr_start * (1.0 - frac) + self.lr_end * frac
    }

    /// Applies one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
        }
        match key {
            "model" => self.model = value.parse()?,
            "margin" => self.margin = num(key, value)?,
            "lr_start" => self.lr_start = num(key, value)?,
            "lr_end" => self.lr_end = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "aggregation" => self.aggregation = value.parse()?,
            "norm" => self.norm = value.parse()?,
            "init" => {
                self.init = match value {
                    "random" => InitStrategy::Random,
                    path => InitStrategy::Pretrained(PathBuf::from(path)),
                }
            }
            "seed" => self.seed = num(key, value)?,
            "attention_detached" => self.attention_detached = num(key, value)?,
            "entity_dim" => self.entity_dim = num(key, value)?,
            "image_dim" => self.image_dim = num(key, value)?,
            "max_images" => self.max_images = num(key, value)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn to_config_string(&self) -> String {
        format!(
            "model = {}\nmargin = {}\nlr_start = {}\nlr_end = {}\nepochs = {}\nbatch_size = {}\n\
             aggregation = {}\nnorm = {}\ninit = {}\nseed = {}\nattention_detached = {}\n\
             entity_dim = {}\nimage_dim = {}\nmax_images = {}\n",
            self.model,
            self.margin,
            self.lr_start,
            self.lr_end,
            self.epochs,
            self.batch_size,
            self.aggregation,
            self.norm,
            self.init,
            self.seed,
            self.attention_detached,
            self.entity_dim,
            self.image_dim,
            self.max_images,
        )
    }
}

pub fn load_config(path: impl AsRef<Path>) -> Result<TrainConfig> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text, path)
}

/// Missing keys keep their defaults; unknown keys are rejected.
pub fn parse_config(text: &str, path: &Path) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_owned(),
            line: i + 1,
            message,
        };
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| parse_err(format!("expected `key = value`, found {line:?}")))?;
        let (key, value) = (key.trim(), value.trim());
        if key.is_empty() || value.is_empty() {
            return Err(parse_err(format!("expected `key = value`, found {line:?}")));
        }
        cfg.set(key, value).map_err(|e| parse_err(e.to_string()))?;
    }
    cfg.validate()?;
    Ok(cfg)
}

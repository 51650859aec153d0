use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dsd::DsdConfig;
use crate::error::{io_err, Error, Result};
use crate::losses::LossWeights;
use crate::satn::SatnConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weights: LossWeights,
    pub dsd: DsdConfig,
    pub satn: SatnConfig,
    pub seed: u64,
    pub sorting_enabled: bool,
    pub disc_enabled: bool,
    /// Runs exactly this many optimizer steps instead of `epochs` passes.
    pub max_steps: Option<usize>,
    /// Probability of taking the sorting branch on a SATN step.
    pub sort_prob: f64,
    /// Width of the Gaussian sorting targets.
    pub sort_sigma: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            batch_size: 16,
            lr: 1e-4,
            momentum: 0.9,
            weights: LossWeights::default(),
            dsd: DsdConfig::default(),
            satn: SatnConfig::default(),
            seed: 0,
            sorting_enabled: true,
            disc_enabled: true,
            max_steps: None,
            sort_prob: 0.5,
            sort_sigma: 1.0,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{value}`")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("lr must be nonnegative, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if !(0.0..=1.0).contains(&self.sort_prob) {
            return Err(Error::Config(format!("sort_prob must lie in [0, 1], got {}", self.sort_prob)));
        }
        if !(self.sort_sigma > 0.0) {
            return Err(Error::Config(format!("sort_sigma must be positive, got {}", self.sort_sigma)));
        }
        if self.max_steps == Some(0) {
            return Err(Error::Config("max_steps must be positive".into()));
        }
        if self.dsd.fused_dim != self.satn.model_dim {
            return Err(Error::Config(format!(
                "dsd.fused_dim {} must equal satn.model_dim {}",
                self.dsd.fused_dim, self.satn.model_dim
            )));
        }
        self.weights.validate()?;
        self.dsd.validate()?;
        self.satn.validate()
    }

    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "epochs" => self.epochs = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "momentum" => self.momentum = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "sorting_enabled" => self.sorting_enabled = parse(key, value)?,
            "disc_enabled" => self.disc_enabled = parse(key, value)?,
            "max_steps" => self.max_steps = Some(parse(key, value)?),
            "sort_prob" => self.sort_prob = parse(key, value)?,
            "sort_sigma" => self.sort_sigma = parse(key, value)?,
            "w_pm" => self.weights.pm = parse(key, value)?,
            "w_3d" => self.weights.j3d = parse(key, value)?,
            "w_2d" => self.weights.j2d = parse(key, value)?,
            "w_r" => self.weights.r = parse(key, value)?,
            "w_2dj" => self.weights.j2dj = parse(key, value)?,
            "w_s" => self.weights.s = parse(key, value)?,
            "dsd.detail_dim" => self.dsd.detail_dim = parse(key, value)?,
            "dsd.fused_dim" => self.dsd.fused_dim = parse(key, value)?,
            "dsd.detail_hidden" => self.dsd.detail_hidden = parse(key, value)?,
            "dsd.deconv_channels" => self.dsd.deconv_channels = parse(key, value)?,
            "dsd.encoder_channels" => {
                let v = parse_list(key, value)?;
                self.dsd.encoder_channels = v
                    .try_into()
                    .map_err(|_| Error::Config("`dsd.encoder_channels` needs four widths".into()))?;
            }
            "satn.seq_len" => self.satn.seq_len = parse(key, value)?,
            "satn.model_dim" => self.satn.model_dim = parse(key, value)?,
            "satn.heads" => self.satn.heads = parse(key, value)?,
            "satn.attn_blocks" => self.satn.attn_blocks = parse(key, value)?,
            "satn.tcn_dilations" => self.satn.tcn_dilations = parse_list(key, value)?,
            "satn.ffn_mult" => self.satn.ffn_mult = parse(key, value)?,
            "satn.sort_conv_blocks" => self.satn.sort_conv_blocks = parse(key, value)?,
            "satn.standardize" => self.satn.standardize = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Parses line-based `key = value` text over the defaults. Blank lines
    /// and lines starting with `#` are ignored.
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::parse_str(&text)
    }

    /// Number of optimizer steps for `samples` training items.
    pub fn total_steps(&self, samples: usize) -> usize {
        let per_epoch = samples.div_ceil(self.batch_size).max(1);
        self.max_steps.unwrap_or(per_epoch * self.epochs)
    }
}

//! Effective experiment configuration and its layered overrides.
//!
//! Precedence is built-in defaults, then a TOML config file, then
//! command-line flags. Each layer is an [`Overrides`] whose `Some` fields
//! replace the layer below.

use std::path::Path;

use clap::Args;
use serde::{Deserialize, Serialize};

use crate::data::RatingScale;
use crate::error::{Error, Result};
use crate::regressor::{TrainConfig, DEFAULT_HIDDEN_DIMS};

/// Everything needed to train and evaluate one model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub train: TrainConfig,
    pub hidden_dims: [usize; 2],
    pub val_fraction: f64,
    pub by_system_split: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            hidden_dims: DEFAULT_HIDDEN_DIMS,
            val_fraction: 0.1,
            by_system_split: false,
        }
    }
}

impl ExperimentConfig {
    pub fn scale(&self) -> RatingScale {
        RatingScale {
            min: self.train.loss.scale_min,
            max: self.train.loss.scale_max,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.train.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.hidden_dims.contains(&0) {
            return Err(Error::domain("hidden layer widths must be >= 1"));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::domain("val_fraction must lie in (0, 1)"));
        }
        Ok(())
    }
}

/// Optional replacements for [`ExperimentConfig`] fields. Used both as the
/// schema of the TOML config file and as the shared command-line flags.
#[derive(Debug, Clone, Default, PartialEq, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Overrides {
    /// Margin scaling factor of the adaptive margin.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Preference factor of the quality weight (1 disables weighting).
    #[arg(long)]
    pub beta: Option<f64>,
    /// Margin of the fixed-margin ranking loss.
    #[arg(long)]
    pub fixed_margin: Option<f64>,
    #[arg(long)]
    pub huber_delta: Option<f64>,
    /// Weight of the ranking term (0 trains with Huber only).
    #[arg(long)]
    pub lambda_rank: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// SGD learning rate.
    #[arg(long = "lr")]
    #[serde(alias = "lr")]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    /// SGD momentum (0 = plain SGD).
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub scale_min: Option<f64>,
    #[arg(long)]
    pub scale_max: Option<f64>,
    /// Hold out whole systems instead of clips.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub by_system_split: Option<bool>,
    #[arg(long)]
    pub val_fraction: Option<f64>,
    /// Hidden layer widths, e.g. `128,64`.
    #[arg(long, value_delimiter = ',', num_args = 2)]
    pub hidden_dims: Option<Vec<usize>>,
}

impl Overrides {
    pub fn from_toml_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e
                .span()
                .map(|s| text[..s.start].matches('\n').count() + 1)
                .unwrap_or(0),
            message: e.message().to_string(),
        })
    }

    /// Layers `self` on top of `base` and validates the result.
    pub fn apply(&self, base: ExperimentConfig) -> Result<ExperimentConfig> {
        let mut cfg = base;
        let t = &mut cfg.train;
        let l = &mut t.loss;
        macro_rules! set {
            ($($src:ident => $dst:expr),* $(,)?) => {
                $(if let Some(v) = self.$src.clone() { $dst = v; })*
            };
        }
        set! {
            alpha => l.alpha,
            beta => l.beta,
            fixed_margin => l.fixed_margin,
            huber_delta => l.huber_delta,
            lambda_rank => l.lambda_rank,
            scale_min => l.scale_min,
            scale_max => l.scale_max,
            batch_size => t.batch_size,
            learning_rate => t.learning_rate,
            patience => t.patience,
            max_epochs => t.max_epochs,
            momentum => t.momentum,
            seed => t.seed,
            by_system_split => cfg.by_system_split,
            val_fraction => cfg.val_fraction,
        }
        if let Some(dims) = &self.hidden_dims {
            cfg.hidden_dims = <[usize; 2]>::try_from(dims.as_slice())
                .map_err(|_| Error::domain("hidden_dims needs exactly two widths"))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Resolves defaults < optional config file < flags.
pub fn resolve(config_file: Option<&Path>, flags: &Overrides) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::default();
    if let Some(path) = config_file {
        cfg = Overrides::from_toml_file(path)?.apply(cfg)?;
    }
    flags.apply(cfg)
}

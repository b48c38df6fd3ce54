//! Flat key=value run configuration. Unknown keys are errors; every key has
//! a documented default. CLI flags override file values.

use std::path::Path;

use crate::model::{Arch, ModelError, ModelSpec};
use crate::train::TrainConfig;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("config {path}:{line}: {detail}")]
    Parse { path: String, line: usize, detail: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// The full run configuration: training hyperparameters, architecture knobs,
/// and tiling geometry.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub arch: Arch,
    pub base_width: usize,
    pub dense_units: usize,
    pub attn_ratio: usize,
    pub se_ratio: usize,
    pub spatial_kernel: usize,
    pub tile: usize,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            arch: Arch::Proposed,
            base_width: 32,
            dense_units: 2,
            attn_ratio: 8,
            se_ratio: 16,
            spatial_kernel: 7,
            tile: 128,
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn model_spec(&self) -> ModelSpec {
        let mut spec = ModelSpec::with_base_width(self.arch, self.base_width);
        spec.dense_units = self.dense_units;
        spec.attn_ratio = self.attn_ratio.min(self.base_width);
        spec.se_ratio = self.se_ratio.min(self.base_width);
        spec.spatial_kernel = self.spatial_kernel;
        spec
    }

    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        let mut cfg = RunConfig::default();
        cfg.apply_text(&text, &path.display().to_string())?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str, path: &str) -> Result<(), ConfigError> {
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::Parse {
                path: path.to_string(),
                line: line_no,
                detail: format!("expected key=value, got {raw:?}"),
            })?;
            self.set(key.trim(), value.trim()).map_err(|detail| ConfigError::Parse {
                path: path.to_string(),
                line: line_no,
                detail,
            })?;
        }
        Ok(())
    }

    /// Apply one key. Returns a description of the problem on failure.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, String> {
            value.parse().map_err(|_| format!("invalid value {value:?} for key {key}"))
        }
        match key {
            "arch" => self.arch = Arch::parse(value).map_err(|e| e.to_string())?,
            "base_width" => self.base_width = num(key, value)?,
            "dense_units" => self.dense_units = num(key, value)?,
            "attn_ratio" => self.attn_ratio = num(key, value)?,
            "se_ratio" => self.se_ratio = num(key, value)?,
            "spatial_kernel" => self.spatial_kernel = num(key, value)?,
            "tile" => self.tile = num(key, value)?,
            "lambda_dice" => self.train.lambda_dice = num(key, value)?,
            "lambda_bce" => self.train.lambda_bce = num(key, value)?,
            "lr0" => self.train.lr0 = num(key, value)?,
            "weight_decay" => self.train.weight_decay = num(key, value)?,
            "beta1" => self.train.beta1 = num(key, value)?,
            "beta2" => self.train.beta2 = num(key, value)?,
            "adam_eps" => self.train.adam_eps = num(key, value)?,
            "lr_gamma" => self.train.lr_gamma = num(key, value)?,
            "lr_step" => self.train.lr_step = num(key, value)?,
            "epochs" => self.train.epochs = num(key, value)?,
            "batch_size" => self.train.batch_size = num(key, value)?,
            "dice_smooth" => self.train.dice_smooth = num(key, value)?,
            "threshold" => self.train.threshold = num(key, value)?,
            "seed" => self.train.seed = num(key, value)?,
            other => return Err(format!("unknown config key {other:?}")),
        }
        Ok(())
    }
}

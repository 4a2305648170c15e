//! Run configuration: one TOML file wiring data, training, the predictor,
//! and evaluation. Unknown keys are rejected with the offending key named.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bench::{BacktestPlan, ModelKind};
use crate::data::SynthSpec;
use crate::predictor::PredictorConfig;
use crate::spatial::WeightNormalization;
use crate::stgan::GanConfig;
use crate::train::{SplitFractions, TrainConfig, TrainOptions, TrainingMode};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// Where the panel comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synth,
    Csv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub source: DataSource,
    /// Panel CSV path for `source = "csv"` (the `--data` flag overrides).
    pub csv_path: Option<PathBuf>,
    pub n_regions: usize,
    pub n_steps: usize,
    pub synth_seed: u64,
    pub synth: SynthSpec,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            source: DataSource::Synth,
            csv_path: None,
            n_regions: 4,
            n_steps: 400,
            synth_seed: 1,
            synth: SynthSpec::default(),
        }
    }
}

/// Predictor architecture without the window sizes (those live in
/// `[windows]` and are merged in).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PredictorSection {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ffn: usize,
    pub dropout: f64,
    pub conv_kernel: usize,
}

impl Default for PredictorSection {
    fn default() -> Self {
        PredictorSection {
            d_model: 512,
            n_heads: 8,
            n_layers: 6,
            d_ffn: 2048,
            dropout: 0.1,
            conv_kernel: 3,
        }
    }
}

impl PredictorSection {
    pub fn desk_scale() -> Self {
        PredictorSection {
            d_model: 64,
            n_heads: 4,
            n_layers: 2,
            d_ffn: 128,
            dropout: 0.0,
            conv_kernel: 3,
        }
    }

    pub fn to_config(self, window: usize, horizon: usize) -> PredictorConfig {
        PredictorConfig {
            d_model: self.d_model,
            n_heads: self.n_heads,
            n_layers: self.n_layers,
            d_ffn: self.d_ffn,
            dropout: self.dropout,
            conv_kernel: self.conv_kernel,
            horizon,
            window,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WindowSection {
    pub q: usize,
    pub p: usize,
}

impl Default for WindowSection {
    fn default() -> Self {
        WindowSection { q: 90, p: 14 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BacktestSection {
    pub horizons: Vec<usize>,
    pub season: usize,
    pub quality_windows: usize,
    pub models: Vec<ModelKind>,
}

impl Default for BacktestSection {
    fn default() -> Self {
        BacktestSection {
            horizons: vec![1, 3, 5, 14],
            season: 7,
            quality_windows: 16,
            models: vec![
                ModelKind::Ours,
                ModelKind::SeasonalNaive,
                ModelKind::Persistence,
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct PathsSection {
    pub checkpoint_dir: Option<PathBuf>,
    pub report_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModeSection {
    /// Serial, seeded execution. The implementation is always serial; the
    /// flag is accepted for compatibility and must stay `true`.
    pub deterministic: bool,
    /// Swap in the down-scaled predictor so runs finish in minutes.
    pub desk_scale: bool,
    pub training: TrainingMode,
}

impl Default for ModeSection {
    fn default() -> Self {
        ModeSection {
            deterministic: true,
            desk_scale: false,
            training: TrainingMode::Joint,
        }
    }
}

/// The whole run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataSection,
    pub windows: WindowSection,
    pub split: SplitFractions,
    pub normalization: WeightNormalization,
    pub predictor: PredictorSection,
    pub gan: GanConfig,
    pub train: TrainConfig,
    pub backtest: BacktestSection,
    pub paths: PathsSection,
    pub mode: ModeSection,
}

impl RunConfig {
    pub fn from_path(path: &Path) -> Result<RunConfig, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn from_toml(text: &str) -> Result<RunConfig, ConfigError> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if !self.mode.deterministic {
            return Err(ConfigError::Invalid(
                "mode.deterministic = false is not supported; execution is always serial"
                    .into(),
            ));
        }
        if self.windows.q < 2 || self.windows.p < 1 {
            return Err(ConfigError::Invalid(format!(
                "windows.q = {} and windows.p = {} must satisfy q >= 2, p >= 1",
                self.windows.q, self.windows.p
            )));
        }
        self.effective_predictor()
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.train
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.split
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(())
    }

    /// Predictor configuration after the desk-scale swap.
    pub fn effective_predictor(&self) -> PredictorConfig {
        let section = if self.mode.desk_scale {
            PredictorSection::desk_scale()
        } else {
            self.predictor
        };
        section.to_config(self.windows.q, self.windows.p)
    }

    pub fn train_options(&self) -> TrainOptions {
        TrainOptions {
            q: self.windows.q,
            p: self.windows.p,
            fractions: self.split,
            predictor: self.effective_predictor(),
            gan: self.gan,
            train: self.train.clone(),
            normalization: self.normalization,
            mode: self.mode.training,
        }
    }

    pub fn backtest_plan(&self) -> BacktestPlan {
        BacktestPlan {
            q: self.windows.q,
            p: self.windows.p,
            horizons: self.backtest.horizons.clone(),
            fractions: self.split,
            models: self.backtest.models.clone(),
            season: self.backtest.season,
            quality_windows: self.backtest.quality_windows,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_parse_and_validate() {
        let cfg = RunConfig::from_toml("").unwrap();
        assert_eq!(cfg.windows.q, 90);
        assert_eq!(cfg.effective_predictor().d_model, 512);
        assert!(cfg.train_options().train.lr_g > 0.0);
    }

    #[test]
    fn unknown_keys_are_named() {
        let err = RunConfig::from_toml("[train]\nlr_gg = 0.1\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("lr_gg"), "message must name the key: {msg}");
        let err = RunConfig::from_toml("[nonsense]\nx = 1\n").unwrap_err();
        assert!(err.to_string().contains("nonsense"));
    }

    #[test]
    fn desk_scale_swaps_predictor() {
        let cfg = RunConfig::from_toml("[mode]\ndesk_scale = true\n").unwrap();
        let pc = cfg.effective_predictor();
        assert_eq!(pc.d_model, 64);
        assert_eq!(pc.n_layers, 2);
        assert_eq!(pc.n_heads, 4);
        assert_eq!(pc.d_ffn, 128);
    }

    #[test]
    fn sections_round_trip() {
        let toml_text = r#"
[data]
source = "synth"
n_regions = 4
n_steps = 400
synth_seed = 7

[data.synth]
seasonal_period = 7
base_level = 120.0
start_date = "2018-06-01"

[windows]
q = 30
p = 3

[split]
train = 0.7
val = 0.1
test = 0.2

[train]
seed = 42
max_iters = 10
pretrain_epochs = 5

[backtest]
horizons = [1, 3]
season = 7

[mode]
desk_scale = true
"#;
        let cfg = RunConfig::from_toml(toml_text).unwrap();
        assert_eq!(cfg.data.synth.seasonal_period, 7);
        assert_eq!(cfg.windows.q, 30);
        assert_eq!(cfg.train.seed, 42);
        assert_eq!(cfg.backtest.horizons, vec![1, 3]);
        let opts = cfg.train_options();
        assert_eq!(opts.predictor.window, 30);
        assert_eq!(opts.predictor.horizon, 3);
    }

    #[test]
    fn nondeterministic_mode_rejected() {
        let err = RunConfig::from_toml("[mode]\ndeterministic = false\n").unwrap_err();
        assert!(matches!(err, ConfigError::Invalid(_)));
    }
}

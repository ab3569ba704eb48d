//! Run configuration: defaults, then the TOML file, then command-line flags.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use ucell_core::adaptation::AdaptConfig;
use ucell_core::flowfield::PostprocessConfig;
use ucell_core::model::ModelConfig;
use ucell_core::synth::SynthConfig;
use ucell_core::training::TrainConfig;

use crate::CliError;

/// Environment variable naming the default output root.
pub const OUTPUT_ROOT_ENV: &str = "UCELL_OUTPUT_ROOT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Copied into the training and adaptation seeds.
    pub seed: u64,
    pub output_dir: Option<PathBuf>,
    /// `error`, `warn`, `info`, `debug` or `trace`.
    pub log_level: String,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub adapt: AdaptConfig,
    pub data: DataConfig,
    pub postprocess: PostprocessConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = ModelConfig::default();
        let mut train = TrainConfig::default();
        train.augment.crop_size = model.input_size;
        let mut adapt = AdaptConfig::default();
        adapt.train.augment.crop_size = model.input_size;
        Self {
            seed: 0,
            output_dir: None,
            log_level: "info".into(),
            model,
            train,
            adapt,
            data: DataConfig::default(),
            postprocess: PostprocessConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Dataset manifest; synthetic data is generated when unset. Relative
    /// paths resolve against the config file's directory.
    pub manifest: Option<PathBuf>,
    pub synthetic: SynthConfig,
    pub synthetic_count: usize,
    /// Held-out images for adaptation scoring.
    pub heldout_count: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { manifest: None, synthetic: SynthConfig::default(), synthetic_count: 16, heldout_count: 8 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub iou_threshold: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { iou_threshold: 0.5 }
    }
}

impl RunConfig {
    /// Defaults overlaid with `path` when given.
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: RunConfig =
            toml::from_str(&text).map_err(|e| CliError::Usage(format!("invalid config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        if let Some(m) = &cfg.data.manifest {
            if m.is_relative() {
                cfg.data.manifest = Some(base.join(m));
            }
        }
        Ok(cfg)
    }

    /// Output directory: flag, then config, then the environment default,
    /// then `ucell-out`.
    pub fn resolve_output(&mut self, flag: Option<PathBuf>) -> PathBuf {
        let dir = flag
            .or_else(|| self.output_dir.clone())
            .or_else(|| std::env::var_os(OUTPUT_ROOT_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("ucell-out"));
        self.output_dir = Some(dir.clone());
        dir
    }

    /// Pushes shared settings down into the nested configs.
    pub fn finalize(&mut self) -> Result<(), CliError> {
        self.train.seed = self.seed;
        self.adapt.train.seed = self.seed;
        // training crops always match the model input
        self.train.augment.crop_size = self.model.input_size;
        self.adapt.train.augment.crop_size = self.model.input_size;
        self.model.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        self.postprocess.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        if !(0.0..=1.0).contains(&self.eval.iou_threshold) {
            return Err(CliError::Usage("eval.iou_threshold must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

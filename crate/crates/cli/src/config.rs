//! The run configuration file: TOML with one section per stage and a
//! mandatory top-level seed.

use std::path::Path;

use rscn_core::detector::DetectorConfig;
use rscn_core::eval::EvalConfig;
use rscn_core::losses::LossWeights;
use rscn_core::synthbench::{SceneSpec, SplitSizes};
use rscn_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const ECHO_FILE: &str = "config.toml";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub source_train: usize,
    pub target_train: usize,
    pub target_val: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            source_train: 200,
            target_train: 200,
            target_val: 100,
        }
    }
}

impl DataSection {
    pub fn sizes(&self) -> SplitSizes {
        SplitSizes::new(self.source_train, self.target_train, self.target_val)
    }
}

/// File layout. Every section and key is optional except `seed`.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfigFile {
    pub seed: Option<u64>,
    #[serde(default)]
    pub scene: SceneSpec,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub model: DetectorConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub weights: LossWeights,
    #[serde(default)]
    pub eval: EvalConfig,
}

/// A parsed file with the seed resolved.
#[derive(Clone, Debug)]
pub struct RunConfig {
    pub seed: u64,
    pub file: RunConfigFile,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let file: RunConfigFile =
            toml::from_str(text).map_err(|e| CliError::Usage(format!("config: {}", e.message())))?;
        let seed = file.seed.ok_or_else(|| CliError::Usage("seed required".into()))?;
        file.scene.validate()?;
        file.weights.validate()?;
        let cfg = RunConfig { seed, file };
        cfg.train_config().validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Trainer settings with model, weights, eval and seed filled in.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            model: self.file.model,
            weights: self.file.weights,
            eval: self.file.eval,
            ..self.file.train.clone()
        }
    }

    /// Fully resolved TOML, defaults included.
    pub fn echo(&self) -> String {
        let mut file = self.file.clone();
        file.seed = Some(self.seed);
        toml::to_string(&file).expect("config serializes")
    }

    pub fn write_echo(&self, dir: &Path) -> Result<(), CliError> {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        let path = dir.join(ECHO_FILE);
        std::fs::write(&path, self.echo()).map_err(|e| CliError::io(&path, e))
    }
}

//! Experiment configuration: JSON document with defaults filled in, all
//! sections optional, unknown keys rejected. The resolved form is
//! re-emitted into every run directory.

use serde::{Deserialize, Serialize};

use fedsr_core::degrade::{TestParams, TrainRanges};
use fedsr_core::error::{Error, Result};
use fedsr_core::federation::{AggregateMode, TrainConfig};
use fedsr_core::model::{LossKind, ModelConfig};
use fedsr_core::partition::{proportion_preset, DirichletParams, ProportionSource};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub data: DataSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub federation: FederationSection,
    pub partition: PartitionSection,
    pub degradation: DegradationSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            data: DataSection::default(),
            model: ModelSection::default(),
            train: TrainSection::default(),
            federation: FederationSection::default(),
            partition: PartitionSection::default(),
            degradation: DegradationSection::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub hr_dir: String,
    pub patch: usize,
    pub stride: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            hr_dir: "data/hr".to_string(),
            patch: 128,
            stride: 128,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub preset: Option<String>,
    pub features: usize,
    pub blocks: usize,
    pub scale: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            preset: None,
            features: 16,
            blocks: 2,
            scale: 4,
        }
    }
}

impl ModelSection {
    pub fn resolve(&self) -> Result<ModelConfig> {
        match &self.preset {
            Some(name) => ModelConfig::preset(name),
            None => Ok(ModelConfig {
                features: self.features,
                blocks: self.blocks,
                scale: self.scale,
                in_channels: 3,
            }),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub rounds: usize,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub loss: LossKind,
    pub checkpoint_interval: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            rounds: 200,
            local_epochs: 1,
            batch_size: 16,
            lr: 2e-4,
            loss: LossKind::L1,
            checkpoint_interval: 10,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FederationSection {
    pub num_clients: usize,
    pub aggregate: AggregateMode,
}

impl Default for FederationSection {
    fn default() -> Self {
        FederationSection {
            num_clients: 4,
            aggregate: AggregateMode::Weighted,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PartitionSection {
    /// "uniform", "dirichlet", or a named proportion preset.
    pub mode: String,
    pub alpha: Vec<f64>,
}

impl Default for PartitionSection {
    fn default() -> Self {
        PartitionSection {
            mode: "uniform".to_string(),
            alpha: vec![0.5; 4],
        }
    }
}

impl PartitionSection {
    pub fn resolve(&self) -> Result<ProportionSource> {
        match self.mode.as_str() {
            "uniform" => Ok(ProportionSource::Uniform),
            "dirichlet" => Ok(ProportionSource::Dirichlet(DirichletParams {
                alpha: self.alpha.clone(),
            })),
            name => match proportion_preset(name) {
                Some(p) => Ok(ProportionSource::Fixed(p)),
                None => Err(Error::invalid_argument(format!(
                    "partition mode '{name}' is not uniform, dirichlet, or a known preset"
                ))),
            },
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct DegradationSection {
    pub ranges: TrainRanges,
    pub test_params: TestParams,
}

impl ExperimentConfig {
    pub fn load(path: &std::path::Path) -> Result<ExperimentConfig> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_slice(&bytes)?)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let model = self.model.resolve()?;
        Ok(TrainConfig {
            rounds: self.train.rounds,
            local_epochs: self.train.local_epochs,
            batch_size: self.train.batch_size,
            lr: self.train.lr,
            patch_size: self.data.patch,
            scale: model.scale,
            loss: self.train.loss,
            model,
            seed: self.seed,
            aggregate: self.federation.aggregate,
            ranges: self.degradation.ranges,
        })
    }
}

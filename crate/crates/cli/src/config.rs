//! Run configuration: one JSON document for every command.

use std::path::Path;

use anytime4d_core::evalmetrics::{DepthAlignment, RansacConfig, TrackAlignment, DEFAULT_APD_THRESHOLDS};
use anytime4d_core::scenegen::{AugmentConfig, SceneRanges};
use anytime4d_nn::model::ModelConfig;
use anytime4d_nn::training::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Sequences written by `gen`.
    pub count: usize,
    pub seed: u64,
    pub scene: SceneRanges,
    /// Frames per training clip.
    pub clip_len: usize,
    pub max_stride: usize,
    pub augment: bool,
    pub augmentation: AugmentConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            count: 8,
            seed: 0,
            scene: SceneRanges {
                num_frames: (6, 6),
                ..SceneRanges::default()
            },
            clip_len: 6,
            max_stride: 1,
            augment: false,
            augmentation: AugmentConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsConfig {
    pub apd_thresholds: Vec<f64>,
    pub ransac: RansacConfig,
    /// `sim3_ransac`, `median_scale` or `none`.
    pub track_alignment: String,
    /// `scale` or `scale_shift`.
    pub depth_alignment: String,
    pub knn_for_normals: usize,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            apd_thresholds: DEFAULT_APD_THRESHOLDS.to_vec(),
            ransac: RansacConfig::default(),
            track_alignment: "sim3_ransac".into(),
            depth_alignment: "scale".into(),
            knn_for_normals: 10,
        }
    }
}

impl MetricsConfig {
    pub fn track_alignment(&self) -> CliResult<TrackAlignment> {
        self.track_alignment.parse().map_err(|_| {
            CliError::Config(format!(
                "unknown track alignment {:?}; expected sim3_ransac, median_scale or none",
                self.track_alignment
            ))
        })
    }

    pub fn depth_alignment(&self) -> CliResult<DepthAlignment> {
        match self.depth_alignment.as_str() {
            "scale" => Ok(DepthAlignment::Scale),
            "scale_shift" => Ok(DepthAlignment::ScaleShift),
            other => Err(CliError::Config(format!(
                "unknown depth alignment {other:?}; expected scale or scale_shift"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub metrics: MetricsConfig,
    /// Steps between checkpoints; 0 keeps only the initial and final ones.
    pub checkpoint_every: usize,
    /// Streaming queries may start from offline weights.
    pub allow_offline_weights_for_streaming: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: DataConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            metrics: MetricsConfig::default(),
            checkpoint_every: 500,
            allow_offline_weights_for_streaming: false,
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> CliResult<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> CliResult<()> {
        self.model.validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.train.validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.metrics.track_alignment()?;
        self.metrics.depth_alignment()?;
        if self.data.clip_len < 2 {
            return Err(CliError::Config("data.clip_len must be at least 2".into()));
        }
        if self.metrics.apd_thresholds.is_empty() {
            return Err(CliError::Config("metrics.apd_thresholds is empty".into()));
        }
        Ok(())
    }

    /// Writes the effective configuration as `config.json` in `dir`.
    pub fn dump(&self, dir: &Path) -> CliResult<()> {
        std::fs::create_dir_all(dir).map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))?;
        let text = serde_json::to_string_pretty(self).expect("config serializes");
        std::fs::write(dir.join("config.json"), text + "\n").map_err(|e| CliError::Data(e.to_string()))
    }
}

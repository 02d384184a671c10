//! Training, inference, evaluation and the stage ablation.

mod ablate;
mod infer;
mod train;

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::emd::DEFAULT_MAX_EXACT;
use crate::error::{Error, Result};
use crate::filter::FilterConfig;
use crate::losses::LossWeights;
use crate::nn::Architecture;

pub use ablate::{ablate, AblationReport, AblationTable, GroupMse};
pub use infer::{denoise, denoise_cloud, evaluate, evaluate_clouds, DenoiseOutput, EvalRecord};
pub use train::{
    patch_loss, train, train_models, train_models_observed, train_observed, BatchRecord,
    EpochSummary, LossTerms, PatchEvent, PatchLoss, PatchSample, TrainModel, TrainReport,
};

/// Which parts of the pipeline are active.
///
/// * `S1`: spatial network trained with the assignment loss only.
/// * `S2`: adds the triangle-normal loss.
/// * `S3`: adds the normal network and the final bilateral update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    S1,
    S2,
    S3,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::S1, Stage::S2, Stage::S3];

    pub fn as_str(&self) -> &'static str {
        match self {
            Stage::S1 => "S1",
            Stage::S2 => "S2",
            Stage::S3 => "S3",
        }
    }

    /// Loss terms and weights used when training for this stage.
    pub fn loss_terms(&self, weights: LossWeights) -> (LossTerms, LossWeights) {
        match self {
            Stage::S1 => (
                LossTerms {
                    emd: true,
                    vn: false,
                    rn: false,
                },
                LossWeights {
                    alpha: 1.0,
                    beta: 0.0,
                },
            ),
            Stage::S2 => (
                LossTerms {
                    emd: true,
                    vn: true,
                    rn: false,
                },
                LossWeights {
                    alpha: weights.alpha,
                    beta: 0.0,
                },
            ),
            Stage::S3 => (LossTerms::all(), weights),
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "s1" => Ok(Stage::S1),
            "s2" => Ok(Stage::S2),
            "s3" => Ok(Stage::S3),
            _ => Err(Error::invalid(format!(
                "unknown stage {s:?}; expected s1, s2 or s3"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    /// One backward pass through the combined loss per batch.
    #[default]
    Joint,
    /// The spatial network first, then the normal network on frozen outputs.
    Sequential,
}

impl FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "joint" => Ok(TrainMode::Joint),
            "sequential" => Ok(TrainMode::Sequential),
            _ => Err(Error::invalid(format!(
                "unknown train mode {s:?}; expected joint or sequential"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub patch_size: usize,
    pub patches_per_model: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub loss: LossWeights,
    /// Triangles per patch for the virtual-normal loss.
    pub vn_count: usize,
    /// Minimum triangle edge as a fraction of the clean patch's bounding-box diagonal.
    pub vn_edge_fraction: f64,
    /// Neighborhood size of PCA normals.
    pub pca_k: usize,
    pub momentum: f64,
    /// Learning rate of the first epoch; decays geometrically to `lr_final`.
    pub lr_initial: f64,
    pub lr_final: f64,
    /// Multiplier on the learning rate of the normal network.
    pub ngcn_lr_scale: f64,
    pub architecture: Architecture,
    pub filter: FilterConfig,
    pub rng_seed: u64,
    pub train_mode: TrainMode,
    /// Stage whose losses are trained.
    pub stage: Stage,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            patch_size: 128,
            patches_per_model: 256,
            batch_size: 64,
            epochs: 10,
            loss: LossWeights::default(),
            vn_count: 100,
            vn_edge_fraction: 0.1,
            pca_k: 16,
            momentum: crate::optim::DEFAULT_MOMENTUM,
            lr_initial: crate::optim::INITIAL_LR,
            lr_final: crate::optim::FINAL_LR,
            ngcn_lr_scale: 1.0,
            architecture: Architecture::default(),
            filter: FilterConfig::default(),
            rng_seed: 0,
            train_mode: TrainMode::Joint,
            stage: Stage::S3,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("patch_size", self.patch_size),
            ("patches_per_model", self.patches_per_model),
            ("batch_size", self.batch_size),
            ("epochs", self.epochs),
            ("vn_count", self.vn_count),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::invalid(format!("{name} must be positive")));
        }
        if self.patch_size > DEFAULT_MAX_EXACT {
            return Err(Error::invalid(format!(
                "patch_size {} exceeds the exact assignment limit {DEFAULT_MAX_EXACT}",
                self.patch_size
            )));
        }
        if self.pca_k < 2 || self.pca_k >= self.patch_size {
            return Err(Error::invalid(format!(
                "pca_k {} must lie in [2, patch_size)",
                self.pca_k
            )));
        }
        if self.architecture.edge_k >= self.patch_size {
            return Err(Error::invalid(format!(
                "edge_k {} must be below patch_size {}",
                self.architecture.edge_k, self.patch_size
            )));
        }
        if !(self.vn_edge_fraction >= 0.0 && self.vn_edge_fraction.is_finite()) {
            return Err(Error::invalid("vn_edge_fraction must be non-negative"));
        }
        let rates = [self.lr_initial, self.lr_final, self.ngcn_lr_scale];
        if !rates.iter().all(|r| *r > 0.0 && r.is_finite()) {
            return Err(Error::invalid("learning rates must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid(format!(
                "momentum {} outside [0, 1)",
                self.momentum
            )));
        }
        self.loss.validate()?;
        self.architecture.validate()?;
        self.filter.validate()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text)
            .map_err(|e| Error::invalid(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

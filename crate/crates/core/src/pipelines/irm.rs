//! IRM with ground-truth context labels as environments.

use crate::data::DatasetTriple;
use crate::error::{Error, Result};
use crate::pipelines::erm::{grouped_classifier_training, GroupedLoss};
use crate::pipelines::{Method, RunRecord, TrainConfig};

/// Optimize Σ_e mean_i [ CE_i + λ(∂CE_i/∂θ)² ] over context environments,
/// with λ warmed up from zero. Requires ground-truth context labels, so
/// this runs on synthetic data only.
pub fn train_irm(data: &DatasetTriple, cfg: &TrainConfig) -> Result<RunRecord> {
    if cfg.method != Method::Irm {
        return Err(Error::invalid(format!(
            "train_irm called with method {}",
            cfg.method
        )));
    }
    grouped_classifier_training(data, cfg, GroupedLoss::Irm, Method::Irm)
}

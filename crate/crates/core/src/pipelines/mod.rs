//! End-to-end trainers: ERM, IRM over ground-truth context environments,
//! LfF-style joint reweighting, and the IRMCon-IPW stages.

mod erm;
mod irm;
mod irmcon;
mod lff;
mod record;
mod sampler;

pub use erm::{train_bias_model, train_erm, train_erm_grouped};
pub use irm::train_irm;
pub use irmcon::{train_irmcon, train_irmcon_ipw, IrmconModels};
pub use lff::train_lff_ipw;
pub use record::{save_metrics_csv, MetricRow, RunRecord};
pub use sampler::WeightedSampler;

use crate::checkpoint::Checkpoint;
use crate::data::SyntheticDataset;
use crate::error::{Error, Result};
use crate::eval::{unbiased_accuracy, AccuracyBreakdown};
use crate::losses::{ConPenalty, DummyTheta, IrmPenalty};
use crate::nn::Mlp;
use crate::rng::rng_for;
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Erm,
    Irm,
    LffIpw,
    IrmconIpw,
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Method::Erm => write!(f, "erm"),
            Method::Irm => write!(f, "irm"),
            Method::LffIpw => write!(f, "lff_ipw"),
            Method::IrmconIpw => write!(f, "irmcon_ipw"),
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "erm" => Ok(Method::Erm),
            "irm" => Ok(Method::Irm),
            "lff_ipw" => Ok(Method::LffIpw),
            "irmcon_ipw" => Ok(Method::IrmconIpw),
            other => Err(Error::invalid(format!(
                "unknown method {other:?}; valid options: erm, irm, lff_ipw, irmcon_ipw"
            ))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub method: Method,
    /// Epochs per training stage.
    pub epochs: usize,
    /// Epochs for the bias head on frozen context features. Training the
    /// head long past the extractor sharpens its confidence on aligned
    /// samples, which is what keeps their weights suppressed.
    pub stage2_epochs: usize,
    pub batch_size: usize,
    /// Mini-batch drawn from each environment per step (IRM / IRMCon).
    pub per_env_batch: usize,
    pub lr: f64,
    pub lambda: f64,
    /// Fraction of epochs with the invariance penalty held at zero.
    pub warmup_frac: f64,
    /// GCE exponent.
    pub q: f64,
    /// Clamp for the weight formulas.
    pub epsilon: f64,
    pub sigma_aug: f64,
    pub flip_prob: f64,
    /// Add a GCE classification term to the IRMCon objective, for
    /// augmentation-dominated contexts.
    pub aux_gce_on_context: bool,
    /// Draw context-balanced IRMCon mini-batches using weights from a short
    /// preliminary bias model.
    pub weighted_sampling: bool,
    pub hidden_dim: usize,
    pub feat_dim: usize,
    pub context_feat_dim: usize,
    /// Literal contrastive denominator (self-similarity, no positive).
    pub include_self: bool,
    pub normalize_contrastive: bool,
    pub temperature: f64,
    pub irm_penalty: IrmPenalty,
    pub con_penalty: ConPenalty,
    /// Diagnostic: replace every IPW weight with 1 (reduces to ERM).
    pub force_uniform_weights: bool,
    pub seed: u64,
    /// Evaluate val/test accuracy every this many epochs.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            method: Method::Erm,
            epochs: 100,
            stage2_epochs: 1500,
            batch_size: 128,
            per_env_batch: 32,
            lr: 0.001,
            lambda: 5.0,
            warmup_frac: 0.2,
            q: 0.7,
            epsilon: 1e-8,
            sigma_aug: 0.05,
            flip_prob: 0.5,
            aux_gce_on_context: false,
            weighted_sampling: true,
            hidden_dim: 64,
            feat_dim: 32,
            context_feat_dim: 32,
            include_self: false,
            normalize_contrastive: false,
            temperature: 1.0,
            irm_penalty: IrmPenalty::PerSampleSquared,
            con_penalty: ConPenalty::AbsMean,
            force_uniform_weights: false,
            seed: 0,
            eval_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda < 0.0 {
            return Err(Error::invalid("lambda must be nonnegative"));
        }
        if !(0.0..=1.0).contains(&self.warmup_frac) {
            return Err(Error::invalid("warmup_frac must lie in [0, 1]"));
        }
        if self.q <= 0.0 || self.q > 1.0 {
            return Err(Error::invalid(format!("q must lie in (0, 1], got {}", self.q)));
        }
        if self.epsilon <= 0.0 {
            return Err(Error::invalid("epsilon must be positive"));
        }
        if self.batch_size == 0 || self.per_env_batch == 0 {
            return Err(Error::invalid("batch sizes must be positive"));
        }
        if matches!(self.method, Method::IrmconIpw) && self.per_env_batch < 2 {
            return Err(Error::invalid(
                "contrastive training needs per_env_batch >= 2",
            ));
        }
        if self.eval_every == 0 {
            return Err(Error::invalid("eval_every must be positive"));
        }
        Ok(())
    }

    /// λ after warmup; zero during the first `warmup_frac` of epochs.
    pub fn lambda_at(&self, epoch: usize) -> f64 {
        let warmup_epochs = (self.warmup_frac * self.epochs as f64).floor() as usize;
        if epoch < warmup_epochs {
            0.0
        } else {
            self.lambda
        }
    }
}

/// The five learnable pieces plus the fixed dummy scalar.
#[derive(Debug, Clone)]
pub struct ModelBundle {
    pub phi_c: Mlp,
    pub f: Mlp,
    pub phi_b: Mlp,
    pub f_b: Mlp,
    pub phi_t: Mlp,
    pub f_b_on_xt: Mlp,
    pub theta: DummyTheta,
}

impl ModelBundle {
    pub fn new(obs_dim: usize, num_classes: usize, cfg: &TrainConfig) -> Result<Self> {
        let h = cfg.hidden_dim;
        Ok(ModelBundle {
            phi_c: new_extractor(obs_dim, h, cfg.feat_dim, cfg.seed, "init.phi_c")?,
            f: new_head(cfg.feat_dim, num_classes, cfg.seed, "init.f")?,
            phi_b: new_extractor(obs_dim, h, cfg.feat_dim, cfg.seed, "init.phi_b")?,
            f_b: new_head(cfg.feat_dim, num_classes, cfg.seed, "init.f_b")?,
            phi_t: new_extractor(obs_dim, h, cfg.context_feat_dim, cfg.seed, "init.phi_t")?,
            f_b_on_xt: new_head(cfg.context_feat_dim, num_classes, cfg.seed, "init.f_b_on_xt")?,
            theta: DummyTheta::default(),
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut ckpt = Checkpoint::new();
        ckpt.push_mlp("phi_c", &self.phi_c);
        ckpt.push_mlp("f", &self.f);
        ckpt.push_mlp("phi_b", &self.phi_b);
        ckpt.push_mlp("f_b", &self.f_b);
        ckpt.push_mlp("phi_t", &self.phi_t);
        ckpt.push_mlp("f_b_on_xt", &self.f_b_on_xt);
        ckpt.push("theta", &Tensor::scalar(self.theta.value()));
        ckpt
    }
}

/// Three-affine-layer feature extractor: obs → hidden → hidden → features.
pub(crate) fn new_extractor(
    obs_dim: usize,
    hidden: usize,
    out: usize,
    seed: u64,
    label: &str,
) -> Result<Mlp> {
    Mlp::new(&[obs_dim, hidden, hidden, out], &mut rng_for(seed, label))
}

pub(crate) fn new_head(feat: usize, classes: usize, seed: u64, label: &str) -> Result<Mlp> {
    Mlp::new(&[feat, classes], &mut rng_for(seed, label))
}

/// Shuffled index batches for one epoch.
pub(crate) fn shuffled_batches(
    n: usize,
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

/// Tracks the best-validation epoch and keeps the matching snapshot; model
/// selection never looks at test accuracy.
pub(crate) struct BestTracker {
    pub best_val: f64,
    pub best_epoch: usize,
    pub test_at_best: AccuracyBreakdown,
    pub snapshot: Vec<Mlp>,
}

impl BestTracker {
    pub fn new() -> Self {
        BestTracker {
            best_val: f64::NEG_INFINITY,
            best_epoch: 0,
            test_at_best: AccuracyBreakdown {
                overall: 0.0,
                per_class: Vec::new(),
                aligned: 0.0,
                conflicting: 0.0,
            },
            snapshot: Vec::new(),
        }
    }

    pub fn observe(
        &mut self,
        epoch: usize,
        val: f64,
        test: AccuracyBreakdown,
        models: &[&Mlp],
    ) {
        if val > self.best_val {
            self.best_val = val;
            self.best_epoch = epoch;
            self.test_at_best = test;
            self.snapshot = models.iter().map(|m| (*m).clone()).collect();
        }
    }
}

/// Evaluate a classifier pair on val and test, append metric rows, and
/// update the best tracker.
#[allow(clippy::too_many_arguments)]
pub(crate) fn eval_epoch(
    epoch: usize,
    phi: &Mlp,
    head: &Mlp,
    val: &SyntheticDataset,
    test: &SyntheticDataset,
    metrics: &mut Vec<MetricRow>,
    tracker: &mut BestTracker,
) -> Result<()> {
    let val_acc = unbiased_accuracy(phi, head, val, false)?;
    let test_acc = unbiased_accuracy(phi, head, test, false)?;
    metrics.push(MetricRow::new(epoch, "val", "accuracy", val_acc.overall));
    metrics.push(MetricRow::new(epoch, "test", "accuracy", test_acc.overall));
    metrics.push(MetricRow::new(epoch, "test", "aligned_accuracy", test_acc.aligned));
    metrics.push(MetricRow::new(
        epoch,
        "test",
        "conflicting_accuracy",
        test_acc.conflicting,
    ));
    tracker.observe(epoch, val_acc.overall, test_acc, &[phi, head]);
    Ok(())
}

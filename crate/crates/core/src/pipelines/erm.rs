//! Plain ERM training, its per-environment-summed variant, and the
//! GCE-trained bias model.

use crate::data::{split_environments, DatasetTriple, EnvKind, SyntheticDataset};
use crate::error::{Error, Result};
use crate::losses::{erm_loss, gce_loss, irm_loss, DummyTheta};
use crate::nn::Mlp;
use crate::optim::Optimizer;
use crate::pipelines::{
    eval_epoch, new_extractor, new_head, shuffled_batches, BestTracker, MetricRow, Method,
    RunRecord, TrainConfig,
};
use crate::rng::{derive_seed_indexed, rng_for, rng_from};
use crate::tape::Tape;
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

/// Train φ_c and f with mean cross entropy.
pub fn train_erm(data: &DatasetTriple, cfg: &TrainConfig) -> Result<RunRecord> {
    cfg.validate()?;
    if cfg.method != Method::Erm {
        return Err(Error::invalid(format!(
            "train_erm called with method {}",
            cfg.method
        )));
    }
    let start = Instant::now();
    let train = &data.train;
    let n_classes = train.spec.num_classes;
    let mut phi_c = new_extractor(
        train.spec.observation_dim(),
        cfg.hidden_dim,
        cfg.feat_dim,
        cfg.seed,
        "init.phi_c",
    )?;
    let mut f = new_head(cfg.feat_dim, n_classes, cfg.seed, "init.f")?;
    let mut opt = Optimizer::adam(cfg.lr);
    let mut shuffle_rng = rng_for(cfg.seed, "shuffle.main");

    let mut metrics = Vec::new();
    let mut tracker = BestTracker::new();
    eval_epoch(0, &phi_c, &f, &data.val, &data.test, &mut metrics, &mut tracker)?;

    for epoch in 1..=cfg.epochs {
        let mut loss_sum = 0.0;
        for batch in shuffled_batches(train.len(), cfg.batch_size, &mut shuffle_rng) {
            let xs = train.observations(&batch);
            let ys = train.labels(&batch);
            let tape = Tape::new();
            let pv = phi_c.attach(&tape);
            let fv = f.attach(&tape);
            let logits = fv.forward(&pv.forward(&tape.constant(xs))?)?;
            let loss = erm_loss(&logits, &ys)?;
            loss_sum += loss.item() * batch.len() as f64;
            let grads = loss.backward()?;
            let grad_list: Vec<Tensor> = pv
                .params()
                .into_iter()
                .chain(fv.params())
                .map(|v| grads.wrt(v))
                .collect();
            let mut params = phi_c.params_mut();
            params.extend(f.params_mut());
            opt.step(&mut params, &grad_list)?;
        }
        metrics.push(MetricRow::new(epoch, "train", "loss", loss_sum / train.len() as f64));
        if epoch % cfg.eval_every == 0 || epoch == cfg.epochs {
            eval_epoch(epoch, &phi_c, &f, &data.val, &data.test, &mut metrics, &mut tracker)?;
        }
    }

    Ok(finish_classifier_record(cfg, Method::Erm, metrics, tracker, start))
}

pub(crate) fn finish_classifier_record(
    cfg: &TrainConfig,
    method: Method,
    metrics: Vec<MetricRow>,
    tracker: BestTracker,
    start: Instant,
) -> RunRecord {
    let mut ckpt = crate::checkpoint::Checkpoint::new();
    if let [phi, head] = tracker.snapshot.as_slice() {
        ckpt.push_mlp("phi_c", phi);
        ckpt.push_mlp("f", head);
    }
    RunRecord {
        method,
        seed: cfg.seed,
        metrics,
        best_epoch: tracker.best_epoch,
        best_val_accuracy: tracker.best_val,
        test_accuracy: tracker.test_at_best.overall,
        aligned_accuracy: tracker.test_at_best.aligned,
        conflicting_accuracy: tracker.test_at_best.conflicting,
        checkpoint: ckpt,
        weight_table: None,
        wall_clock_s: start.elapsed().as_secs_f64(),
    }
}

/// Bias model: a fresh extractor/head pair trained with GCE on raw
/// observations, deliberately amplifying the easiest (shortcut) signal.
pub fn train_bias_model(train: &SyntheticDataset, cfg: &TrainConfig) -> Result<(Mlp, Mlp)> {
    cfg.validate()?;
    train_gce_pair(train, cfg, cfg.epochs, "bias")
}

/// Shared GCE training loop; `ns` namespaces the RNG streams so the
/// standalone bias model and the preliminary sampler model stay independent.
pub(crate) fn train_gce_pair(
    train: &SyntheticDataset,
    cfg: &TrainConfig,
    epochs: usize,
    ns: &str,
) -> Result<(Mlp, Mlp)> {
    let n_classes = train.spec.num_classes;
    let mut phi_b = new_extractor(
        train.spec.observation_dim(),
        cfg.hidden_dim,
        cfg.feat_dim,
        cfg.seed,
        &format!("init.{ns}.phi_b"),
    )?;
    let mut f_b = new_head(cfg.feat_dim, n_classes, cfg.seed, &format!("init.{ns}.f_b"))?;
    let mut opt = Optimizer::adam(cfg.lr);
    let mut shuffle_rng = rng_for(cfg.seed, &format!("shuffle.{ns}"));

    for _ in 0..epochs {
        for batch in shuffled_batches(train.len(), cfg.batch_size, &mut shuffle_rng) {
            let xs = train.observations(&batch);
            let ys = train.labels(&batch);
            let tape = Tape::new();
            let pv = phi_b.attach(&tape);
            let fv = f_b.attach(&tape);
            let logits = fv.forward(&pv.forward(&tape.constant(xs))?)?;
            let loss = gce_loss(&logits, &ys, cfg.q)?;
            let grads = loss.backward()?;
            let grad_list: Vec<Tensor> = pv
                .params()
                .into_iter()
                .chain(fv.params())
                .map(|v| grads.wrt(v))
                .collect();
            let mut params = phi_b.params_mut();
            params.extend(f_b.params_mut());
            opt.step(&mut params, &grad_list)?;
        }
    }
    Ok((phi_b, f_b))
}

/// Shuffled per-environment queue; reshuffles when it wraps.
pub(crate) struct EnvCursor {
    indices: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl EnvCursor {
    pub fn new(indices: Vec<usize>, seed: u64) -> Self {
        let mut cursor = EnvCursor { indices, pos: 0, rng: rng_from(seed) };
        cursor.indices.shuffle(&mut cursor.rng);
        cursor
    }

    pub fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        for _ in 0..size.min(self.indices.len()).max(1) {
            if self.pos == self.indices.len() {
                self.indices.shuffle(&mut self.rng);
                self.pos = 0;
            }
            out.push(self.indices[self.pos]);
            self.pos += 1;
        }
        out
    }
}

pub(crate) enum GroupedLoss {
    /// Σ_e mean-CE: ERM over the same per-environment batching.
    PlainSum,
    /// Full IRM objective with the warmup λ schedule.
    Irm,
}

/// Shared loop for IRM and its penalty-free twin; identical RNG streams and
/// float operations except for the penalty term, so λ=0 and PlainSum yield
/// bit-identical trajectories.
pub(crate) fn grouped_classifier_training(
    data: &DatasetTriple,
    cfg: &TrainConfig,
    mode: GroupedLoss,
    method: Method,
) -> Result<RunRecord> {
    cfg.validate()?;
    let start = Instant::now();
    let train = &data.train;
    let envs = split_environments(train, EnvKind::ByContext)?;
    if envs.len() < 2 {
        return Err(Error::invalid(format!(
            "grouped training needs at least 2 context environments, got {}",
            envs.len()
        )));
    }
    let theta = DummyTheta::default();
    let n_classes = train.spec.num_classes;
    let mut phi_c = new_extractor(
        train.spec.observation_dim(),
        cfg.hidden_dim,
        cfg.feat_dim,
        cfg.seed,
        "init.phi_c",
    )?;
    let mut f = new_head(cfg.feat_dim, n_classes, cfg.seed, "init.f")?;
    let mut opt = Optimizer::adam(cfg.lr);

    let mut cursors: Vec<EnvCursor> = envs
        .iter()
        .map(|e| {
            EnvCursor::new(
                e.indices.clone(),
                derive_seed_indexed(cfg.seed, "shuffle.env", e.env_id as u64),
            )
        })
        .collect();
    let max_env = envs.iter().map(|e| e.len()).max().unwrap();
    let steps_per_epoch = max_env.div_ceil(cfg.per_env_batch).max(1);

    let mut metrics = Vec::new();
    let mut tracker = BestTracker::new();
    eval_epoch(0, &phi_c, &f, &data.val, &data.test, &mut metrics, &mut tracker)?;

    for epoch in 1..=cfg.epochs {
        let lambda = cfg.lambda_at(epoch - 1);
        let mut loss_sum = 0.0;
        for _ in 0..steps_per_epoch {
            let tape = Tape::new();
            let pv = phi_c.attach(&tape);
            let fv = f.attach(&tape);
            let mut env_terms = Vec::with_capacity(cursors.len());
            for cursor in &mut cursors {
                let batch = cursor.next_batch(cfg.per_env_batch);
                let xs = train.observations(&batch);
                let ys = train.labels(&batch);
                let logits = fv.forward(&pv.forward(&tape.constant(xs))?)?;
                env_terms.push((logits, ys));
            }
            let loss = match mode {
                GroupedLoss::PlainSum => {
                    let mut total: Option<crate::tape::Var> = None;
                    for (logits, ys) in &env_terms {
                        let term = erm_loss(logits, ys)?;
                        total = Some(match total {
                            None => term,
                            Some(t) => t.add(&term)?,
                        });
                    }
                    total.unwrap()
                }
                GroupedLoss::Irm => irm_loss(&env_terms, lambda, &theta, cfg.irm_penalty)?,
            };
            loss_sum += loss.item();
            let grads = loss.backward()?;
            let grad_list: Vec<Tensor> = pv
                .params()
                .into_iter()
                .chain(fv.params())
                .map(|v| grads.wrt(v))
                .collect();
            let mut params = phi_c.params_mut();
            params.extend(f.params_mut());
            opt.step(&mut params, &grad_list)?;
        }
        metrics.push(MetricRow::new(
            epoch,
            "train",
            "loss",
            loss_sum / steps_per_epoch as f64,
        ));
        if epoch % cfg.eval_every == 0 || epoch == cfg.epochs {
            eval_epoch(epoch, &phi_c, &f, &data.val, &data.test, &mut metrics, &mut tracker)?;
        }
    }

    Ok(finish_classifier_record(cfg, method, metrics, tracker, start))
}

/// ERM over the same per-environment batch stream IRM uses, with the
/// per-environment-summed loss. The λ=0 reference trajectory.
pub fn train_erm_grouped(data: &DatasetTriple, cfg: &TrainConfig) -> Result<RunRecord> {
    grouped_classifier_training(data, cfg, GroupedLoss::PlainSum, Method::Erm)
}

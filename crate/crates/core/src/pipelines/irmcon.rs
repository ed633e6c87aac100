//! Context-extractor training with classes as environments, and the full
//! three-stage reweighting pipeline built on top of it.

use crate::data::{augment, split_environments, AugmentConfig, DatasetTriple, EnvKind,
    SyntheticDataset};
use crate::error::{Error, Result};
use crate::eval::forward_chunked;
use crate::losses::{
    cross_entropy_values, gce_loss, ipw_erm_loss, irmcon_loss, lff_weight, ContrastiveConfig,
    DummyTheta, WeightProvenance,
};
use crate::nn::Mlp;
use crate::optim::Optimizer;
use crate::pipelines::erm::{finish_classifier_record, train_gce_pair};
use crate::pipelines::lff::weight_table_from_models;
use crate::pipelines::{
    eval_epoch, new_extractor, new_head, shuffled_batches, BestTracker, MetricRow, Method,
    RunRecord, TrainConfig, WeightedSampler,
};
use crate::rng::{derive_seed_indexed, rng_for};
use crate::tape::{concat_rows, Tape, Var};
use crate::tensor::Tensor;
use std::time::Instant;

/// Output of the IRMCon stage.
pub struct IrmconModels {
    pub phi_t: Mlp,
    /// Auxiliary GCE head over context features, when enabled.
    pub aux_head: Option<Mlp>,
    pub metrics: Vec<MetricRow>,
}

/// Per-sample sampling scores from a short, discarded preliminary run:
/// a 10-epoch CE pair supplies ce_main, a 10-epoch GCE pair supplies
/// ce_bias, and the score is the usual weight formula, so bias-conflicting
/// samples dominate the contrastive mini-batches.
fn preliminary_sampling_scores(train: &SyntheticDataset, cfg: &TrainConfig) -> Result<Vec<f64>> {
    const PRELIM_EPOCHS: usize = 10;
    let (phi_m, f_m) = train_ce_pair_short(train, cfg, PRELIM_EPOCHS)?;
    let (phi_b, f_b) = train_gce_pair(train, cfg, PRELIM_EPOCHS, "prelim")?;

    let labels: Vec<usize> = train.samples.iter().map(|s| s.y).collect();
    let feats_m = forward_chunked(&phi_m, &train.all_observations(), 256);
    let ce_main = cross_entropy_values(&forward_chunked(&f_m, &feats_m, 256), &labels)?;
    let feats_b = forward_chunked(&phi_b, &train.all_observations(), 256);
    let ce_bias = cross_entropy_values(&forward_chunked(&f_b, &feats_b, 256), &labels)?;

    ce_main
        .iter()
        .zip(&ce_bias)
        .map(|(&m, &b)| lff_weight(m, b, cfg.epsilon))
        .collect()
}

fn train_ce_pair_short(
    train: &SyntheticDataset,
    cfg: &TrainConfig,
    epochs: usize,
) -> Result<(Mlp, Mlp)> {
    let n_classes = train.spec.num_classes;
    let mut phi = new_extractor(
        train.spec.observation_dim(),
        cfg.hidden_dim,
        cfg.feat_dim,
        cfg.seed,
        "init.prelim.phi_c",
    )?;
    let mut head = new_head(cfg.feat_dim, n_classes, cfg.seed, "init.prelim.f")?;
    let mut opt = Optimizer::adam(cfg.lr);
    let mut shuffle_rng = rng_for(cfg.seed, "shuffle.prelim-ce");
    for _ in 0..epochs {
        for batch in shuffled_batches(train.len(), cfg.batch_size, &mut shuffle_rng) {
            let xs = train.observations(&batch);
            let ys = train.labels(&batch);
            let tape = Tape::new();
            let pv = phi.attach(&tape);
            let fv = head.attach(&tape);
            let logits = fv.forward(&pv.forward(&tape.constant(xs))?)?;
            let loss = crate::losses::erm_loss(&logits, &ys)?;
            let grads = loss.backward()?;
            let grad_list: Vec<Tensor> = pv
                .params()
                .into_iter()
                .chain(fv.params())
                .map(|v| grads.wrt(v))
                .collect();
            let mut params = phi.params_mut();
            params.extend(head.params_mut());
            opt.step(&mut params, &grad_list)?;
        }
    }
    Ok((phi, head))
}

/// Learn the context extractor φ_t by invariance across class environments.
pub fn train_irmcon(train: &SyntheticDataset, cfg: &TrainConfig) -> Result<IrmconModels> {
    cfg.validate()?;
    if cfg.per_env_batch < 2 {
        return Err(Error::invalid("contrastive training needs per_env_batch >= 2"));
    }
    let envs = split_environments(train, EnvKind::ByClass)?;
    if envs.len() < 2 {
        return Err(Error::invalid(format!(
            "IRMCon needs at least 2 class environments, got {}",
            envs.len()
        )));
    }
    for e in &envs {
        if e.len() < 2 {
            return Err(Error::invalid(format!(
                "class environment {} has {} sample(s); need at least 2",
                e.env_id,
                e.len()
            )));
        }
    }

    let scores = if cfg.weighted_sampling {
        preliminary_sampling_scores(train, cfg)?
    } else {
        vec![1.0; train.len()]
    };

    // one weighted sampler per class environment, over its own indices
    let mut samplers: Vec<(Vec<usize>, WeightedSampler)> = envs
        .iter()
        .map(|e| {
            let env_scores: Vec<f64> = e.indices.iter().map(|&i| scores[i]).collect();
            let sampler = WeightedSampler::new(
                &env_scores,
                derive_seed_indexed(cfg.seed, "sampler.env", e.env_id as u64),
            )?;
            Ok((e.indices.clone(), sampler))
        })
        .collect::<Result<_>>()?;

    let theta = DummyTheta::default();
    let con_cfg = ContrastiveConfig {
        include_self: cfg.include_self,
        normalize: cfg.normalize_contrastive,
        temperature: cfg.temperature,
    };
    let aug_cfg = AugmentConfig {
        flip_prob: cfg.flip_prob,
        noise_prob: 0.5,
        sigma: cfg.sigma_aug,
    };
    let mut aug_rng = rng_for(cfg.seed, "aug.irmcon");

    let mut phi_t = new_extractor(
        train.spec.observation_dim(),
        cfg.hidden_dim,
        cfg.context_feat_dim,
        cfg.seed,
        "init.phi_t",
    )?;
    let mut aux_head = if cfg.aux_gce_on_context {
        Some(new_head(cfg.context_feat_dim, train.spec.num_classes, cfg.seed, "init.aux")?)
    } else {
        None
    };
    let mut opt = Optimizer::adam(cfg.lr);

    let steps_per_epoch = train
        .len()
        .div_ceil(envs.len() * cfg.per_env_batch)
        .max(1);
    let mut metrics = Vec::new();

    for epoch in 1..=cfg.epochs {
        let lambda = cfg.lambda_at(epoch - 1);
        let mut loss_sum = 0.0;
        for _ in 0..steps_per_epoch {
            let tape = Tape::new();
            let pv = phi_t.attach(&tape);
            let av = aux_head.as_ref().map(|h| h.attach(&tape));
            let mut env_pairs: Vec<(Var, Var)> = Vec::with_capacity(samplers.len());
            let mut aux_feats: Vec<Var> = Vec::new();
            let mut aux_labels: Vec<usize> = Vec::new();
            for (indices, sampler) in &mut samplers {
                let picks = sampler.draw_batch(cfg.per_env_batch);
                if picks.len() < 2 {
                    log::warn!("skipping a degenerate environment batch of {}", picks.len());
                    continue;
                }
                let batch: Vec<usize> = picks.iter().map(|&p| indices[p]).collect();
                let xs = train.observations(&batch);
                let aug_rows: Vec<Vec<f64>> = batch
                    .iter()
                    .map(|&i| augment(&train.spec, &train.samples[i].x, &aug_cfg, &mut aug_rng))
                    .collect();
                let aug_xs = Tensor::from_rows(&aug_rows);
                let feats = pv.forward(&tape.constant(xs))?;
                let aug_feats_e = pv.forward(&tape.constant(aug_xs))?;
                if av.is_some() {
                    aux_feats.push(feats.clone());
                    aux_labels.extend(train.labels(&batch));
                }
                env_pairs.push((feats, aug_feats_e));
            }
            if env_pairs.len() < 2 {
                log::warn!("fewer than 2 usable environments this step; skipping");
                continue;
            }
            let mut loss = irmcon_loss(&env_pairs, lambda, &theta, &con_cfg, cfg.con_penalty)?;
            if let Some(ref head_vars) = av {
                let all_feats = concat_rows(&aux_feats)?;
                let logits = head_vars.forward(&all_feats)?;
                loss = loss.add(&gce_loss(&logits, &aux_labels, cfg.q)?)?;
            }
            loss_sum += loss.item();
            let grads = loss.backward()?;
            let mut vars: Vec<&Var> = pv.params();
            if let Some(ref head_vars) = av {
                vars.extend(head_vars.params());
            }
            let grad_list: Vec<Tensor> = vars.iter().map(|v| grads.wrt(v)).collect();
            let mut params = phi_t.params_mut();
            if let Some(ref mut h) = aux_head {
                params.extend(h.params_mut());
            }
            opt.step(&mut params, &grad_list)?;
        }
        metrics.push(MetricRow::new(
            epoch,
            "train",
            "irmcon_loss",
            loss_sum / steps_per_epoch as f64,
        ));
    }

    Ok(IrmconModels { phi_t, aux_head, metrics })
}

/// The full pipeline: IRMCon pretraining → frozen φ_t → GCE head on
/// context features → weighted main training.
pub fn train_irmcon_ipw(data: &DatasetTriple, cfg: &TrainConfig) -> Result<RunRecord> {
    cfg.validate()?;
    if cfg.method != Method::IrmconIpw {
        return Err(Error::invalid(format!(
            "train_irmcon_ipw called with method {}",
            cfg.method
        )));
    }
    let start = Instant::now();
    let train = &data.train;
    let n_classes = train.spec.num_classes;

    // stage 1: context extractor, then frozen for good
    let stage1 = train_irmcon(train, cfg)?;
    let phi_t = stage1.phi_t;
    let phi_t_fingerprint = phi_t.fingerprint();
    let mut metrics = stage1.metrics;

    // stage 2: GCE head on x_t = φ_t(x); φ_t only supplies values
    let xt_train = forward_chunked(&phi_t, &train.all_observations(), 256);
    let labels: Vec<usize> = train.samples.iter().map(|s| s.y).collect();
    let mut f_b_on_xt = new_head(cfg.context_feat_dim, n_classes, cfg.seed, "init.f_b_on_xt")?;
    let mut opt2 = Optimizer::adam(cfg.lr);
    let mut shuffle2 = rng_for(cfg.seed, "shuffle.stage2");
    let k = cfg.context_feat_dim;
    for epoch in 1..=cfg.stage2_epochs {
        let mut loss_sum = 0.0;
        for batch in shuffled_batches(train.len(), cfg.batch_size, &mut shuffle2) {
            let mut xdata = Vec::with_capacity(batch.len() * k);
            for &i in &batch {
                xdata.extend_from_slice(xt_train.row(i));
            }
            let xs = Tensor::matrix(batch.len(), k, xdata);
            let ys: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let tape = Tape::new();
            let hv = f_b_on_xt.attach(&tape);
            let logits = hv.forward(&tape.constant(xs))?;
            let loss = gce_loss(&logits, &ys, cfg.q)?;
            loss_sum += loss.item() * batch.len() as f64;
            let grads = loss.backward()?;
            let grad_list: Vec<Tensor> = hv.params().iter().map(|v| grads.wrt(v)).collect();
            opt2.step(&mut f_b_on_xt.params_mut(), &grad_list)?;
        }
        metrics.push(MetricRow::new(
            epoch,
            "train",
            "stage2_gce_loss",
            loss_sum / train.len() as f64,
        ));
    }
    let f_b_on_xt_fingerprint = f_b_on_xt.fingerprint();

    // frozen bias CE per train sample, computed once
    let bias_logits = forward_chunked(&f_b_on_xt, &xt_train, 256);
    let ce_bias = cross_entropy_values(&bias_logits, &labels)?;

    // stage 3: weighted main training; ce_main stays live, ce_bias frozen
    let obs_dim = train.spec.observation_dim();
    let mut phi_c = new_extractor(obs_dim, cfg.hidden_dim, cfg.feat_dim, cfg.seed, "init.phi_c")?;
    let mut f = new_head(cfg.feat_dim, n_classes, cfg.seed, "init.f")?;
    let mut opt3 = Optimizer::adam(cfg.lr);
    let mut shuffle3 = rng_for(cfg.seed, "shuffle.main");
    let mut tracker = BestTracker::new();
    eval_epoch(0, &phi_c, &f, &data.val, &data.test, &mut metrics, &mut tracker)?;

    for epoch in 1..=cfg.epochs {
        let mut loss_sum = 0.0;
        for batch in shuffled_batches(train.len(), cfg.batch_size, &mut shuffle3) {
            let xs = train.observations(&batch);
            let ys = train.labels(&batch);
            let tape = Tape::new();
            let pv = phi_c.attach(&tape);
            let fv = f.attach(&tape);
            let logits = fv.forward(&pv.forward(&tape.constant(xs))?)?;
            let weights = if cfg.force_uniform_weights {
                vec![1.0; batch.len()]
            } else {
                let ce_main = cross_entropy_values(&logits.value(), &ys)?;
                batch
                    .iter()
                    .zip(&ce_main)
                    .map(|(&i, &m)| lff_weight(m, ce_bias[i], cfg.epsilon))
                    .collect::<Result<Vec<f64>>>()?
            };
            let loss = ipw_erm_loss(&logits, &ys, &weights)?;
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
            opt3.step(&mut params, &grad_list)?;
        }
        metrics.push(MetricRow::new(epoch, "train", "loss", loss_sum / train.len() as f64));
        if epoch % cfg.eval_every == 0 || epoch == cfg.epochs {
            eval_epoch(epoch, &phi_c, &f, &data.val, &data.test, &mut metrics, &mut tracker)?;
        }
    }

    // freeze contract: stages 2 and 3 never touched φ_t, and stage 3 never
    // touched the bias head
    assert_eq!(
        phi_t_fingerprint,
        phi_t.fingerprint(),
        "phi_t changed after the IRMCon stage"
    );
    assert_eq!(
        f_b_on_xt_fingerprint,
        f_b_on_xt.fingerprint(),
        "f_b_on_xt changed during main training"
    );

    let table = weight_table_from_models(
        &phi_c,
        &f,
        &ce_bias,
        data,
        cfg.epsilon,
        WeightProvenance::IrmCon,
    )?;

    let mut record = finish_classifier_record(cfg, Method::IrmconIpw, metrics, tracker, start);
    record.checkpoint.push_mlp("phi_t", &phi_t);
    record.checkpoint.push_mlp("f_b_on_xt", &f_b_on_xt);
    if let Some(aux) = &stage1.aux_head {
        record.checkpoint.push_mlp("aux_head", aux);
    }
    record.weight_table = Some(table);
    Ok(record)
}

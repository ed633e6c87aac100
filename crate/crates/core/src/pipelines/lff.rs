//! Joint biased-model reweighting: the GCE bias pair trains alongside the
//! main classifier, and every step reweights the main loss by live
//! inverse-probability weights.

use crate::data::DatasetTriple;
use crate::error::{Error, Result};
use crate::eval::forward_chunked;
use crate::losses::{
    cross_entropy_values, gce_loss, ipw_erm_loss, lff_weight, WeightProvenance, WeightTable,
};
use crate::nn::Mlp;
use crate::optim::Optimizer;
use crate::pipelines::erm::finish_classifier_record;
use crate::pipelines::{
    eval_epoch, new_extractor, new_head, shuffled_batches, BestTracker, MetricRow, Method,
    RunRecord, TrainConfig,
};
use crate::rng::rng_for;
use crate::tape::Tape;
use crate::tensor::Tensor;
use std::time::Instant;

/// Per-sample weights from the two current CE values; the weights are
/// recomputed from live values every step and treated as constants.
fn batch_weights(
    ce_main: &[f64],
    ce_bias: &[f64],
    epsilon: f64,
    force_uniform: bool,
) -> Result<Vec<f64>> {
    if force_uniform {
        return Ok(vec![1.0; ce_main.len()]);
    }
    ce_main
        .iter()
        .zip(ce_bias)
        .map(|(&m, &b)| lff_weight(m, b, epsilon))
        .collect()
}

/// Final-state weight table over the whole train split.
pub(crate) fn weight_table_from_models(
    phi_c: &Mlp,
    f: &Mlp,
    ce_bias: &[f64],
    data: &DatasetTriple,
    epsilon: f64,
    provenance: WeightProvenance,
) -> Result<WeightTable> {
    let train = &data.train;
    let feats = forward_chunked(phi_c, &train.all_observations(), 256);
    let logits = forward_chunked(f, &feats, 256);
    let labels: Vec<usize> = train.samples.iter().map(|s| s.y).collect();
    let ce_main = cross_entropy_values(&logits, &labels)?;
    let mut table = WeightTable::new(provenance, epsilon);
    for (i, s) in train.samples.iter().enumerate() {
        table.insert(s.id, ce_main[i], ce_bias[i])?;
    }
    Ok(table)
}

/// Jointly train (φ_b, f_b) with GCE and (φ_c, f) with weighted CE, both
/// stepped simultaneously.
pub fn train_lff_ipw(data: &DatasetTriple, cfg: &TrainConfig) -> Result<RunRecord> {
    cfg.validate()?;
    if cfg.method != Method::LffIpw {
        return Err(Error::invalid(format!(
            "train_lff_ipw called with method {}",
            cfg.method
        )));
    }
    let start = Instant::now();
    let train = &data.train;
    let n_classes = train.spec.num_classes;
    let obs_dim = train.spec.observation_dim();

    let mut phi_c = new_extractor(obs_dim, cfg.hidden_dim, cfg.feat_dim, cfg.seed, "init.phi_c")?;
    let mut f = new_head(cfg.feat_dim, n_classes, cfg.seed, "init.f")?;
    let mut phi_b = new_extractor(obs_dim, cfg.hidden_dim, cfg.feat_dim, cfg.seed, "init.phi_b")?;
    let mut f_b = new_head(cfg.feat_dim, n_classes, cfg.seed, "init.f_b")?;
    let mut opt_main = Optimizer::adam(cfg.lr);
    let mut opt_bias = Optimizer::adam(cfg.lr);
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
            let bv = phi_b.attach(&tape);
            let fbv = f_b.attach(&tape);
            let x = tape.constant(xs);
            let logits_main = fv.forward(&pv.forward(&x)?)?;
            let logits_bias = fbv.forward(&bv.forward(&x)?)?;

            let ce_main = cross_entropy_values(&logits_main.value(), &ys)?;
            let ce_bias = cross_entropy_values(&logits_bias.value(), &ys)?;
            let weights = batch_weights(&ce_main, &ce_bias, cfg.epsilon, cfg.force_uniform_weights)?;

            let main_loss = ipw_erm_loss(&logits_main, &ys, &weights)?;
            let bias_loss = gce_loss(&logits_bias, &ys, cfg.q)?;
            loss_sum += main_loss.item() * batch.len() as f64;
            // disjoint parameter sets: one backward pass serves both updates
            let total = main_loss.add(&bias_loss)?;
            let grads = total.backward()?;

            let main_grads: Vec<Tensor> = pv
                .params()
                .into_iter()
                .chain(fv.params())
                .map(|v| grads.wrt(v))
                .collect();
            let mut main_params = phi_c.params_mut();
            main_params.extend(f.params_mut());
            opt_main.step(&mut main_params, &main_grads)?;

            let bias_grads: Vec<Tensor> = bv
                .params()
                .into_iter()
                .chain(fbv.params())
                .map(|v| grads.wrt(v))
                .collect();
            let mut bias_params = phi_b.params_mut();
            bias_params.extend(f_b.params_mut());
            opt_bias.step(&mut bias_params, &bias_grads)?;
        }
        metrics.push(MetricRow::new(epoch, "train", "loss", loss_sum / train.len() as f64));
        if epoch % cfg.eval_every == 0 || epoch == cfg.epochs {
            eval_epoch(epoch, &phi_c, &f, &data.val, &data.test, &mut metrics, &mut tracker)?;
        }
    }

    // record the end-of-training weights
    let bias_feats = forward_chunked(&phi_b, &train.all_observations(), 256);
    let bias_logits = forward_chunked(&f_b, &bias_feats, 256);
    let labels: Vec<usize> = train.samples.iter().map(|s| s.y).collect();
    let ce_bias_final = cross_entropy_values(&bias_logits, &labels)?;
    let table = weight_table_from_models(
        &phi_c,
        &f,
        &ce_bias_final,
        data,
        cfg.epsilon,
        WeightProvenance::Lff,
    )?;

    let mut record = finish_classifier_record(cfg, Method::LffIpw, metrics, tracker, start);
    record.checkpoint.push_mlp("phi_b", &phi_b);
    record.checkpoint.push_mlp("f_b", &f_b);
    record.weight_table = Some(table);
    Ok(record)
}

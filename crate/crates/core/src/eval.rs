//! Exact-count evaluation: unbiased accuracy with aligned/conflicting
//! breakdowns, frozen-extractor linear probes, and embedding export.

use crate::data::SyntheticDataset;
use crate::error::{Error, Result};
use crate::exec;
use crate::losses::erm_loss;
use crate::nn::Mlp;
use crate::optim::Optimizer;
use crate::rng::rng_for;
use crate::tape::Tape;
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

/// Forward a whole dataset through a model in parallel row chunks.
pub fn forward_chunked(mlp: &Mlp, xs: &Tensor, chunk: usize) -> Tensor {
    let rows = xs.rows();
    let cols = xs.cols();
    let chunk = chunk.max(1);
    let n_chunks = rows.div_ceil(chunk);
    let pieces: Vec<Vec<f64>> = exec::map_range(n_chunks, |ci| {
        let lo = ci * chunk;
        let hi = ((ci + 1) * chunk).min(rows);
        let sub = Tensor::matrix(hi - lo, cols, xs.data()[lo * cols..hi * cols].to_vec());
        mlp.forward(&sub).data().to_vec()
    });
    let mut data = Vec::with_capacity(rows * mlp.output_dim());
    for p in pieces {
        data.extend_from_slice(&p);
    }
    Tensor::matrix(rows, mlp.output_dim(), data)
}

/// Sequential twin of [`forward_chunked`], for the benchmark suite.
pub fn forward_chunked_seq(mlp: &Mlp, xs: &Tensor, chunk: usize) -> Tensor {
    let rows = xs.rows();
    let cols = xs.cols();
    let chunk = chunk.max(1);
    let n_chunks = rows.div_ceil(chunk);
    let pieces: Vec<Vec<f64>> = exec::map_range_seq(n_chunks, |ci| {
        let lo = ci * chunk;
        let hi = ((ci + 1) * chunk).min(rows);
        let sub = Tensor::matrix(hi - lo, cols, xs.data()[lo * cols..hi * cols].to_vec());
        mlp.forward(&sub).data().to_vec()
    });
    let mut data = Vec::with_capacity(rows * mlp.output_dim());
    for p in pieces {
        data.extend_from_slice(&p);
    }
    Tensor::matrix(rows, mlp.output_dim(), data)
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Argmax class predictions of head(phi(x)) for every sample.
pub fn predict(phi: &Mlp, head: &Mlp, ds: &SyntheticDataset) -> Vec<usize> {
    let feats = forward_chunked(phi, &ds.all_observations(), 256);
    let logits = forward_chunked(head, &feats, 256);
    (0..logits.rows()).map(|r| argmax(logits.row(r))).collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AccuracyBreakdown {
    pub overall: f64,
    pub per_class: Vec<f64>,
    /// Accuracy on samples whose context matches their class (c == y).
    pub aligned: f64,
    /// Accuracy on samples whose context conflicts (c != y).
    pub conflicting: f64,
}

/// Exact-count accuracy on a context-balanced split, broken down by
/// class and by bias alignment.
pub fn unbiased_accuracy(
    phi: &Mlp,
    head: &Mlp,
    ds: &SyntheticDataset,
    allow_unbalanced: bool,
) -> Result<AccuracyBreakdown> {
    if ds.is_empty() {
        return Err(Error::Empty("evaluation dataset"));
    }
    let imbalance = ds.context_imbalance();
    if imbalance > 1 {
        if allow_unbalanced {
            log::warn!(
                "evaluating on an unbalanced split (context imbalance {imbalance}); accuracies are not unbiased"
            );
        } else {
            return Err(Error::UnbalancedTestSet(format!(
                "context count imbalance {imbalance} > 1 within a class"
            )));
        }
    }
    let preds = predict(phi, head, ds);
    breakdown_from_predictions(&preds, ds)
}

pub fn breakdown_from_predictions(
    preds: &[usize],
    ds: &SyntheticDataset,
) -> Result<AccuracyBreakdown> {
    let n = ds.spec.num_classes;
    let mut class_hits = vec![0usize; n];
    let mut class_counts = vec![0usize; n];
    let (mut aligned_hits, mut aligned_total) = (0usize, 0usize);
    let (mut conf_hits, mut conf_total) = (0usize, 0usize);
    for (p, s) in preds.iter().zip(&ds.samples) {
        let hit = usize::from(*p == s.y);
        class_hits[s.y] += hit;
        class_counts[s.y] += 1;
        if s.is_aligned() {
            aligned_hits += hit;
            aligned_total += 1;
        } else {
            conf_hits += hit;
            conf_total += 1;
        }
    }
    let ratio = |h: usize, t: usize| if t == 0 { 0.0 } else { h as f64 / t as f64 };
    Ok(AccuracyBreakdown {
        overall: ratio(aligned_hits + conf_hits, ds.len()),
        per_class: class_hits
            .iter()
            .zip(&class_counts)
            .map(|(&h, &t)| ratio(h, t))
            .collect(),
        aligned: ratio(aligned_hits, aligned_total),
        conflicting: ratio(conf_hits, conf_total),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeTarget {
    Class,
    Context,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeKind {
    /// Linear head trained to predict the class from frozen features; a
    /// clean context extractor should land at chance (class leakage check).
    BiasHead,
    /// Linear head trained to recover the ground-truth context label.
    ContextRecovery,
}

/// Probe hyperparameters are fixed so probe capacity never confounds
/// comparisons; thresholds are acceptance knobs, not measurements.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// ContextRecovery passes when final test accuracy ≥ this.
    pub context_threshold: f64,
    /// BiasHead passes when final test accuracy ≤ chance + this.
    pub class_leak_margin: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            epochs: 50,
            lr: 0.001,
            batch_size: 128,
            context_threshold: 0.90,
            class_leak_margin: 0.10,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbeReport {
    pub kind: ProbeKind,
    pub target: ProbeTarget,
    pub chance: f64,
    pub threshold: f64,
    pub train_curve: Vec<f64>,
    pub test_curve: Vec<f64>,
    pub final_train_accuracy: f64,
    pub final_test_accuracy: f64,
    pub passed: bool,
}

impl ProbeReport {
    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    /// Curves as CSV: epoch,split,accuracy.
    pub fn save_curves_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(w, "epoch,split,accuracy")?;
        for (e, v) in self.train_curve.iter().enumerate() {
            writeln!(w, "{e},train,{v}")?;
        }
        for (e, v) in self.test_curve.iter().enumerate() {
            writeln!(w, "{e},test,{v}")?;
        }
        w.flush()?;
        Ok(())
    }
}

fn probe_labels(ds: &SyntheticDataset, target: ProbeTarget) -> Vec<usize> {
    match target {
        ProbeTarget::Class => ds.samples.iter().map(|s| s.y).collect(),
        ProbeTarget::Context => ds.samples.iter().map(|s| s.c).collect(),
    }
}

fn accuracy_of(logits: &Tensor, labels: &[usize]) -> f64 {
    let hits = (0..logits.rows())
        .filter(|&r| argmax(logits.row(r)) == labels[r])
        .count();
    hits as f64 / labels.len() as f64
}

/// Train a fresh affine head on frozen features and report accuracy curves.
/// The probed extractor is never updated (enforced by fingerprint).
pub fn bias_head_probe(
    phi: &Mlp,
    ds_train: &SyntheticDataset,
    ds_test: &SyntheticDataset,
    target: ProbeTarget,
    cfg: &ProbeConfig,
    seed: u64,
) -> Result<ProbeReport> {
    let fp_before = phi.fingerprint();
    let feats_train = forward_chunked(phi, &ds_train.all_observations(), 256);
    let feats_test = forward_chunked(phi, &ds_test.all_observations(), 256);
    let labels_train = probe_labels(ds_train, target);
    let labels_test = probe_labels(ds_test, target);
    let label_space = match target {
        ProbeTarget::Class => ds_train.spec.num_classes,
        ProbeTarget::Context => ds_train.spec.num_contexts,
    };

    let mut head = Mlp::new(&[phi.output_dim(), label_space], &mut rng_for(seed, "probe-head"))?;
    let mut opt = Optimizer::adam(cfg.lr);
    let mut order: Vec<usize> = (0..ds_train.len()).collect();
    let mut shuffle_rng = rng_for(seed, "probe-shuffle");

    let mut train_curve = Vec::with_capacity(cfg.epochs);
    let mut test_curve = Vec::with_capacity(cfg.epochs);
    let k = phi.output_dim();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        for batch in order.chunks(cfg.batch_size) {
            let mut data = Vec::with_capacity(batch.len() * k);
            for &i in batch {
                data.extend_from_slice(feats_train.row(i));
            }
            let xs = Tensor::matrix(batch.len(), k, data);
            let ys: Vec<usize> = batch.iter().map(|&i| labels_train[i]).collect();

            let tape = Tape::new();
            let head_vars = head.attach(&tape);
            let logits = head_vars.forward(&tape.constant(xs))?;
            let loss = erm_loss(&logits, &ys)?;
            let grads = loss.backward()?;
            let grad_list: Vec<Tensor> =
                head_vars.params().iter().map(|v| grads.wrt(v)).collect();
            opt.step(&mut head.params_mut(), &grad_list)?;
        }
        train_curve.push(accuracy_of(&forward_chunked(&head, &feats_train, 512), &labels_train));
        test_curve.push(accuracy_of(&forward_chunked(&head, &feats_test, 512), &labels_test));
    }

    assert_eq!(fp_before, phi.fingerprint(), "probe mutated the probed extractor");

    let chance = 1.0 / label_space as f64;
    let final_train = *train_curve.last().unwrap_or(&0.0);
    let final_test = *test_curve.last().unwrap_or(&0.0);
    let (kind, threshold, passed) = match target {
        ProbeTarget::Class => {
            let t = chance + cfg.class_leak_margin;
            (ProbeKind::BiasHead, t, final_test <= t)
        }
        ProbeTarget::Context => {
            let t = cfg.context_threshold;
            (ProbeKind::ContextRecovery, t, final_test >= t)
        }
    };
    Ok(ProbeReport {
        kind,
        target,
        chance,
        threshold,
        train_curve,
        test_curve,
        final_train_accuracy: final_train,
        final_test_accuracy: final_test,
        passed,
    })
}

/// CSV rows: sample id, y, c, embedding coordinates, full precision.
pub fn export_embeddings(
    phi: &Mlp,
    ds: &SyntheticDataset,
    path: impl AsRef<Path>,
) -> Result<()> {
    let feats = forward_chunked(phi, &ds.all_observations(), 256);
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(w, "id,y,c")?;
    for j in 0..phi.output_dim() {
        write!(w, ",e{j}")?;
    }
    writeln!(w)?;
    for (i, s) in ds.samples.iter().enumerate() {
        write!(w, "{},{},{}", s.id, s.y, s.c)?;
        for v in feats.row(i) {
            write!(w, ",{v}")?;
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

/// Mean intra-context minus mean inter-context cosine similarity of the
/// embeddings, over at most `cap` samples.
pub fn context_cluster_margin(phi: &Mlp, ds: &SyntheticDataset, cap: usize) -> f64 {
    let take = ds.len().min(cap);
    let idx: Vec<usize> = (0..take).collect();
    let feats = forward_chunked(phi, &ds.observations(&idx), 256);
    let k = phi.output_dim();
    let normed: Vec<Vec<f64>> = (0..take)
        .map(|i| {
            let row = feats.row(i);
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            row.iter().map(|v| v / n).collect()
        })
        .collect();
    let (mut intra, mut inter) = ((0.0, 0usize), (0.0, 0usize));
    for i in 0..take {
        for j in i + 1..take {
            let cos: f64 = (0..k).map(|d| normed[i][d] * normed[j][d]).sum();
            if ds.samples[i].c == ds.samples[j].c {
                intra.0 += cos;
                intra.1 += 1;
            } else {
                inter.0 += cos;
                inter.1 += 1;
            }
        }
    }
    let mean = |(s, c): (f64, usize)| if c == 0 { 0.0 } else { s / c as f64 };
    mean(intra) - mean(inter)
}

/// Binomial ±3σ band around chance for a probe on `n` test samples.
pub fn chance_band(chance: f64, n: usize) -> f64 {
    3.0 * (chance * (1.0 - chance) / n as f64).sqrt()
}

//! Training objectives and per-sample weight formulas.
//!
//! The dummy scalar θ is fixed at 1 and never optimized; the penalty terms
//! need only its derivative, which has a closed form when θ scales logits
//! (classification) or similarities (contrastive). Those closed forms are
//! built as first-order graph nodes, so plain reverse mode suffices.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{kernels, Tensor};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

/// Fixed multiplier on logits/similarities whose gradient magnitude
/// measures cross-environment non-invariance. Constructed, never mutated.
#[derive(Debug, Clone, Copy, Default)]
pub struct DummyTheta(());

impl DummyTheta {
    pub fn value(&self) -> f64 {
        1.0
    }
}

// ---------------------------------------------------------------------------
// Plain scalar forms (no tape): used for weights and oracles.
// ---------------------------------------------------------------------------

/// Stable −log softmax(logits)[y] on raw values.
pub fn cross_entropy_scalar(logits: &[f64], y: usize) -> Result<f64> {
    if y >= logits.len() {
        return Err(Error::ClassOutOfRange { index: y, classes: logits.len() });
    }
    let lsm = kernels::log_softmax_rows(logits, 1, logits.len());
    Ok(-lsm[y])
}

/// Per-sample CE values from a logits matrix, off-tape. Used for live
/// weight computation, where the weights are treated as constants.
pub fn cross_entropy_values(logits: &Tensor, labels: &[usize]) -> Result<Vec<f64>> {
    if logits.rows() != labels.len() {
        return Err(Error::ShapeMismatch {
            op: "cross_entropy_values",
            lhs: logits.shape().to_vec(),
            rhs: vec![labels.len()],
        });
    }
    check_labels(logits.cols(), labels)?;
    let lsm = kernels::log_softmax_rows(logits.data(), logits.rows(), logits.cols());
    Ok(labels
        .iter()
        .enumerate()
        .map(|(r, &y)| -lsm[r * logits.cols() + y])
        .collect())
}

/// Generalized cross entropy on a probability vector: (1 − p_y^q)/q.
pub fn gce(probs: &[f64], y: usize, q: f64) -> Result<f64> {
    if q <= 0.0 || q > 1.0 {
        return Err(Error::invalid(format!("q must lie in (0, 1], got {q}")));
    }
    if y >= probs.len() {
        return Err(Error::ClassOutOfRange { index: y, classes: probs.len() });
    }
    let sum: f64 = probs.iter().sum();
    if probs.iter().any(|&p| !(0.0..=1.0 + 1e-6).contains(&p)) || (sum - 1.0).abs() > 1e-6 {
        return Err(Error::invalid(format!(
            "probs must be on the simplex (sum {sum}), tolerance 1e-6"
        )));
    }
    Ok((1.0 - probs[y].powf(q)) / q)
}

/// Inverse-probability weight from a biased classifier's losses:
/// w = (ce_bias + ε) / (ce_main + ce_bias + 2ε) ∈ (0, 1).
pub fn lff_weight(ce_main: f64, ce_bias: f64, epsilon: f64) -> Result<f64> {
    if ce_main < 0.0 || ce_bias < 0.0 {
        return Err(Error::invalid(format!(
            "cross entropies must be nonnegative, got main={ce_main}, bias={ce_bias}"
        )));
    }
    if epsilon <= 0.0 {
        return Err(Error::invalid("epsilon must be positive"));
    }
    Ok((ce_bias + epsilon) / (ce_main + ce_bias + 2.0 * epsilon))
}

/// Same fraction as [`lff_weight`]; the bias loss must come from a head
/// running on frozen context features. The distinction is provenance,
/// recorded in the [`WeightTable`].
pub fn irmcon_weight(ce_main: f64, ce_bias_on_xt: f64, epsilon: f64) -> Result<f64> {
    lff_weight(ce_main, ce_bias_on_xt, epsilon)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightProvenance {
    Lff,
    IrmCon,
}

impl std::fmt::Display for WeightProvenance {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            WeightProvenance::Lff => write!(f, "lff"),
            WeightProvenance::IrmCon => write!(f, "irmcon"),
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct WeightRow {
    pub ce_main: f64,
    pub ce_bias: f64,
    pub weight: f64,
}

/// Per-sample IPW weights keyed by sample id.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WeightTable {
    pub provenance: WeightProvenance,
    pub epsilon: f64,
    rows: BTreeMap<usize, WeightRow>,
}

impl WeightTable {
    pub fn new(provenance: WeightProvenance, epsilon: f64) -> Self {
        WeightTable { provenance, epsilon, rows: BTreeMap::new() }
    }

    pub fn insert(&mut self, id: usize, ce_main: f64, ce_bias: f64) -> Result<f64> {
        let weight = lff_weight(ce_main, ce_bias, self.epsilon)?;
        self.rows.insert(id, WeightRow { ce_main, ce_bias, weight });
        Ok(weight)
    }

    pub fn weight(&self, id: usize) -> Result<f64> {
        self.rows
            .get(&id)
            .map(|r| r.weight)
            .ok_or(Error::MissingWeight { id })
    }

    pub fn get(&self, id: usize) -> Option<&WeightRow> {
        self.rows.get(&id)
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&usize, &WeightRow)> {
        self.rows.iter()
    }

    pub fn mean_weight_where(&self, mut pred: impl FnMut(usize) -> bool) -> Option<f64> {
        let picked: Vec<f64> = self
            .rows
            .iter()
            .filter(|(id, _)| pred(**id))
            .map(|(_, r)| r.weight)
            .collect();
        if picked.is_empty() {
            None
        } else {
            Some(picked.iter().sum::<f64>() / picked.len() as f64)
        }
    }

    /// CSV export: sample_id, ce_main, ce_bias, weight, provenance.
    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(w, "sample_id,ce_main,ce_bias,weight,provenance")?;
        for (id, r) in &self.rows {
            writeln!(w, "{id},{},{},{},{}", r.ce_main, r.ce_bias, r.weight, self.provenance)?;
        }
        w.flush()?;
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Tape-differentiable objectives.
// ---------------------------------------------------------------------------

fn check_labels(cols: usize, labels: &[usize]) -> Result<()> {
    for &y in labels {
        if y >= cols {
            return Err(Error::ClassOutOfRange { index: y, classes: cols });
        }
    }
    Ok(())
}

fn as_matrix(logits: &Var) -> Result<Var> {
    match logits.shape().len() {
        1 => logits.reshape(&[1, logits.value().len()]),
        2 => Ok(logits.clone()),
        _ => Err(Error::BadShape {
            op: "loss",
            expected: "a logit vector or matrix",
            got: logits.shape(),
        }),
    }
}

/// Per-sample cross entropy: logits (N×n), labels length N → (N).
pub fn cross_entropy_vec(logits: &Var, labels: &[usize]) -> Result<Var> {
    let z = as_matrix(logits)?;
    let v = z.value();
    if labels.len() != v.rows() {
        return Err(Error::ShapeMismatch {
            op: "cross_entropy",
            lhs: v.shape().to_vec(),
            rhs: vec![labels.len()],
        });
    }
    check_labels(v.cols(), labels)?;
    Ok(z.log_softmax().gather_rows(labels)?.neg())
}

/// Cross entropy of one logit vector against a class index.
pub fn cross_entropy(logits: &Var, y: usize) -> Result<Var> {
    Ok(cross_entropy_vec(logits, &[y])?.mean())
}

/// Mean cross entropy over a batch (the ERM objective).
pub fn erm_loss(logits: &Var, labels: &[usize]) -> Result<Var> {
    if labels.is_empty() {
        return Err(Error::Empty("batch"));
    }
    Ok(cross_entropy_vec(logits, labels)?.mean())
}

/// Mean GCE over a batch, on logits. Computed as (1 − exp(q·log_softmax))/q
/// so small probabilities stay stable.
pub fn gce_loss(logits: &Var, labels: &[usize], q: f64) -> Result<Var> {
    if q <= 0.0 || q > 1.0 {
        return Err(Error::invalid(format!("q must lie in (0, 1], got {q}")));
    }
    if labels.is_empty() {
        return Err(Error::Empty("batch"));
    }
    let z = as_matrix(logits)?;
    check_labels(z.value().cols(), labels)?;
    let picked = z.log_softmax().gather_rows(labels)?;
    let p_pow_q = picked.scale(q).exp();
    Ok(p_pow_q.neg().add_scalar(1.0).scale(1.0 / q).mean())
}

/// Per-sample ∂CE/∂θ at θ=1 where θ scales the logits:
/// Σ_k (softmax(z)_k − y_k) · z_k, differentiable in z. Returns (N).
pub fn theta_grad_ce(logits: &Var, labels: &[usize], theta: &DummyTheta) -> Result<Var> {
    let z = as_matrix(logits)?;
    let v = z.value();
    if labels.len() != v.rows() {
        return Err(Error::ShapeMismatch {
            op: "theta_grad_ce",
            lhs: v.shape().to_vec(),
            rhs: vec![labels.len()],
        });
    }
    check_labels(v.cols(), labels)?;
    let scaled = z.scale(theta.value());
    let probs = scaled.softmax();
    let onehot = one_hot_matrix(z.tape(), labels, v.cols());
    probs.sub(&onehot)?.mul(&scaled)?.row_sum()
}

fn one_hot_matrix(tape: &Tape, labels: &[usize], classes: usize) -> Var {
    let mut data = vec![0.0; labels.len() * classes];
    for (r, &y) in labels.iter().enumerate() {
        data[r * classes + y] = 1.0;
    }
    tape.constant(Tensor::matrix(labels.len(), classes, data))
}

/// How the environment penalty aggregates per-sample θ-derivatives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IrmPenalty {
    /// mean_i (∂CE_i/∂θ)² — the per-sample squared form.
    PerSampleSquared,
    /// (mean_i ∂CE_i/∂θ)² — squared environment-mean, for ablations.
    SquaredMean,
}

/// Σ_e mean_i [ CE_i + λ·penalty_i ] over context environments.
pub fn irm_loss(
    env_terms: &[(Var, Vec<usize>)],
    lambda: f64,
    theta: &DummyTheta,
    penalty: IrmPenalty,
) -> Result<Var> {
    if env_terms.len() < 2 {
        return Err(Error::invalid(format!(
            "IRM needs at least 2 environments, got {}",
            env_terms.len()
        )));
    }
    if lambda < 0.0 {
        return Err(Error::invalid("lambda must be nonnegative"));
    }
    let mut total: Option<Var> = None;
    for (logits, labels) in env_terms {
        if labels.is_empty() {
            return Err(Error::Empty("environment"));
        }
        let ce = cross_entropy_vec(logits, labels)?;
        let tg = theta_grad_ce(logits, labels, theta)?;
        let term = match penalty {
            IrmPenalty::PerSampleSquared => ce.add(&tg.square().scale(lambda))?.mean(),
            IrmPenalty::SquaredMean => ce.mean().add(&tg.mean().square().scale(lambda))?,
        };
        total = Some(match total {
            None => term,
            Some(t) => t.add(&term)?,
        });
    }
    Ok(total.unwrap())
}

/// Denominator convention and similarity options for the contrastive loss.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ContrastiveConfig {
    /// Default (false): denominator = augmented positive + the other
    /// samples of the environment. True restores the literal reading where
    /// the denominator sums raw pairwise similarities including the
    /// anchor's self-similarity and omits the augmented positive.
    pub include_self: bool,
    /// L2-normalize features and divide similarities by `temperature`.
    /// Off by default: raw dot products.
    pub normalize: bool,
    pub temperature: f64,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        ContrastiveConfig { include_self: false, normalize: false, temperature: 1.0 }
    }
}

fn normalize_rows(x: &Var) -> Result<Var> {
    // x / ||x||  via exp(-0.5·log(Σx² + tiny)) per row
    let sumsq = x.mul(x)?.row_sum()?.add_scalar(1e-12);
    let inv_norm = sumsq.log().scale(-0.5).exp();
    mul_rows(x, &inv_norm)
}

/// Scale row i of a matrix by v[i], built from existing ops:
/// x ⊙ (diag(v) · ones) = diag_embed(v) · x.
fn mul_rows(x: &Var, v: &Var) -> Result<Var> {
    v.diag_embed()?.matmul(x)
}

/// Per-anchor contrastive losses and θ-derivatives for one environment.
///
/// `feats` and `aug_feats` are (M×k): row i is φ_t of sample i and of its
/// augmented view. Returns (losses (M), theta_grads (M)).
pub fn contrastive_parts(
    feats: &Var,
    aug_feats: &Var,
    theta: &DummyTheta,
    cfg: &ContrastiveConfig,
) -> Result<(Var, Var)> {
    let fv = feats.value();
    if fv.shape().len() != 2 || feats.shape() != aug_feats.shape() {
        return Err(Error::ShapeMismatch {
            op: "contrastive",
            lhs: feats.shape(),
            rhs: aug_feats.shape(),
        });
    }
    let m = fv.rows();
    if m < 2 {
        return Err(Error::invalid(format!(
            "contrastive environment needs at least 2 samples, got {m}"
        )));
    }
    let (f, g) = if cfg.normalize {
        (normalize_rows(feats)?, normalize_rows(aug_feats)?)
    } else {
        (feats.clone(), aug_feats.clone())
    };
    let inv_tau = 1.0 / cfg.temperature;

    // positive similarities s⁺ and pairwise similarity matrix S
    let pos = f.mul(&g)?.row_sum()?.scale(inv_tau);
    let sims = f.matmul(&f.transpose()?)?.scale(inv_tau);

    // denominator terms per anchor: swap the diagonal for the positive in
    // the standard reading; keep raw S in the literal reading
    let denom = if cfg.include_self {
        sims
    } else {
        let off_diag_mask = {
            let mut data = vec![1.0; m * m];
            for i in 0..m {
                data[i * m + i] = 0.0;
            }
            feats.tape().constant(Tensor::matrix(m, m, data))
        };
        sims.mul(&off_diag_mask)?.add(&pos.diag_embed()?)?
    };

    let th = theta.value();
    // loss_i = −θ·s⁺_i + logsumexp_j(θ·d_ij)
    let losses = denom.scale(th).logsumexp_rows()?.sub(&pos.scale(th))?;
    // ∂loss_i/∂θ at θ=1: Σ_j softmax(θ·d_i)_j · d_ij − s⁺_i
    let probs = denom.scale(th).softmax();
    let theta_grads = probs.mul(&denom)?.row_sum()?.sub(&pos)?;
    Ok((losses, theta_grads))
}

/// Mean per-anchor InfoNCE-style loss over one class environment.
pub fn intra_class_contrastive(
    feats: &Var,
    aug_feats: &Var,
    theta: &DummyTheta,
    cfg: &ContrastiveConfig,
) -> Result<Var> {
    let (losses, _) = contrastive_parts(feats, aug_feats, theta, cfg)?;
    Ok(losses.mean())
}

/// Closed-form ∂loss/∂θ at θ=1 for one anchor, from its positive
/// similarity and denominator terms: Σ_j p_j·d_j − s⁺.
pub fn theta_grad_contrastive(s_plus: &Var, denom_terms: &Var, theta: &DummyTheta) -> Result<Var> {
    let terms = denom_terms.value();
    if terms.shape().len() != 1 || terms.is_empty() {
        return Err(Error::BadShape {
            op: "theta_grad_contrastive",
            expected: "a nonempty similarity vector",
            got: terms.shape().to_vec(),
        });
    }
    let p = denom_terms.scale(theta.value()).softmax();
    p.dot(denom_terms)?.sub(s_plus)
}

/// How the IRMCon penalty aggregates per-anchor θ-derivatives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConPenalty {
    /// |mean_i ∂loss_i/∂θ| — derivative of the environment mean.
    AbsMean,
    /// mean_i |∂loss_i/∂θ| — per-anchor absolute values, for ablations.
    MeanAbs,
}

/// Σ_e [ mean-anchor contrastive + λ·|θ-derivative| ] over class
/// environments. Equivalent to summing (1/|e|)[L_ct + λ|∇_θ L_ct|] with
/// L_ct the per-environment anchor sum.
pub fn irmcon_loss(
    envs: &[(Var, Var)],
    lambda: f64,
    theta: &DummyTheta,
    cfg: &ContrastiveConfig,
    penalty: ConPenalty,
) -> Result<Var> {
    if envs.len() < 2 {
        return Err(Error::invalid(format!(
            "IRMCon needs at least 2 class environments, got {}",
            envs.len()
        )));
    }
    if lambda < 0.0 {
        return Err(Error::invalid("lambda must be nonnegative"));
    }
    let mut total: Option<Var> = None;
    for (feats, aug) in envs {
        let (losses, tgs) = contrastive_parts(feats, aug, theta, cfg)?;
        let pen = match penalty {
            ConPenalty::AbsMean => tgs.mean().abs(),
            ConPenalty::MeanAbs => tgs.abs().mean(),
        };
        let term = losses.mean().add(&pen.scale(lambda))?;
        total = Some(match total {
            None => term,
            Some(t) => t.add(&term)?,
        });
    }
    Ok(total.unwrap())
}

/// Weighted ERM: mean_i CE_i · w̃_i with the batch weights rescaled to
/// mean 1. Bit-equal weights short-circuit to plain ERM.
pub fn ipw_erm_loss(logits: &Var, labels: &[usize], weights: &[f64]) -> Result<Var> {
    if labels.is_empty() {
        return Err(Error::Empty("batch"));
    }
    if weights.len() != labels.len() {
        return Err(Error::ShapeMismatch {
            op: "ipw_erm_loss",
            lhs: vec![labels.len()],
            rhs: vec![weights.len()],
        });
    }
    if weights.iter().any(|&w| w < 0.0 || !w.is_finite()) {
        return Err(Error::invalid("weights must be finite and nonnegative"));
    }
    let sum: f64 = weights.iter().sum();
    if sum <= 0.0 {
        return Err(Error::invalid("weights must not all be zero"));
    }
    let ce = cross_entropy_vec(logits, labels)?;
    let uniform = weights.windows(2).all(|w| w[0].to_bits() == w[1].to_bits());
    if uniform {
        return Ok(ce.mean());
    }
    let scale = labels.len() as f64 / sum;
    let rescaled: Vec<f64> = weights.iter().map(|w| w * scale).collect();
    let wv = logits.tape().constant(Tensor::vector(rescaled));
    Ok(ce.mul(&wv)?.mean())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;
    use approx::assert_relative_eq;
    use rand::Rng;

    fn tape_logits(tape: &Tape, rows: &[Vec<f64>]) -> Var {
        tape.param(&Tensor::from_rows(rows))
    }

    #[test]
    fn cross_entropy_known_values() {
        let tape = Tape::new();
        let l = tape.param(&Tensor::vector(vec![0.0, 0.0]));
        let ce = cross_entropy(&l, 0).unwrap();
        assert_relative_eq!(ce.item(), (2.0f64).ln(), max_relative = 1e-12);

        let l = tape.param(&Tensor::vector(vec![30.0, -30.0]));
        let ce = cross_entropy(&l, 0).unwrap();
        assert!(ce.item() < 1e-12, "saturated correct CE = {}", ce.item());

        assert!(cross_entropy(&l, 5).is_err());
    }

    #[test]
    fn cross_entropy_matches_compensated_oracle() {
        // oracle: explicit normalization with Neumaier summation
        fn oracle(logits: &[f64], y: usize) -> f64 {
            let mut sum = 0.0f64;
            let mut comp = 0.0f64;
            for &z in logits {
                let term = z.exp();
                let t = sum + term;
                if sum.abs() >= term.abs() {
                    comp += (sum - t) + term;
                } else {
                    comp += (term - t) + sum;
                }
                sum = t;
            }
            -(logits[y].exp() / (sum + comp)).ln()
        }
        let mut rng = rng_from(17);
        let tape = Tape::new();
        for _ in 0..200 {
            let n = rng.gen_range(2..12);
            let logits: Vec<f64> = (0..n).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let y = rng.gen_range(0..n);
            let l = tape.param(&Tensor::vector(logits.clone()));
            let got = cross_entropy(&l, y).unwrap().item();
            assert_relative_eq!(got, oracle(&logits, y), max_relative = 1e-12);
        }
    }

    #[test]
    fn gce_formula_cases() {
        assert_eq!(gce(&[1.0, 0.0], 0, 0.7).unwrap(), 0.0);
        assert_eq!(gce(&[1.0, 0.0], 0, 0.3).unwrap(), 0.0);
        assert_relative_eq!(gce(&[0.8, 0.2], 0, 1.0).unwrap(), 0.2, max_relative = 1e-12);
        assert!(gce(&[0.8, 0.2], 0, 0.0).is_err());
        assert!(gce(&[0.8, 0.3], 0, 0.5).is_err());
    }

    #[test]
    fn gce_approaches_ce_as_q_vanishes() {
        let mut rng = rng_from(23);
        for _ in 0..200 {
            // keep p_y away from 0 where the q-expansion error blows up
            let p_y = rng.gen_range(0.05..0.999);
            let p = vec![p_y, 1.0 - p_y];
            let g = gce(&p, 0, 1e-4).unwrap();
            let ce = -p_y.ln();
            assert!((g - ce).abs() < 1e-3, "q→0 gap {} at p_y={p_y}", (g - ce).abs());
        }
    }

    #[test]
    fn gce_loss_on_logits_matches_prob_form() {
        let mut rng = rng_from(31);
        let tape = Tape::new();
        for _ in 0..50 {
            let logits: Vec<f64> = (0..6).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let y = rng.gen_range(0..6);
            let q = rng.gen_range(0.1..1.0);
            let probs = kernels::softmax_rows(&logits, 1, 6);
            let want = gce(&probs, y, q).unwrap();
            let l = tape.param(&Tensor::vector(logits));
            let got = gce_loss(&l, &[y], q).unwrap().item();
            assert_relative_eq!(got, want, max_relative = 1e-10);
        }
    }

    #[test]
    fn erm_loss_mean_semantics() {
        let tape = Tape::new();
        // one perfectly classified sample
        let l = tape_logits(&tape, &[vec![40.0, 0.0, 0.0]]);
        assert!(erm_loss(&l, &[0]).unwrap().item() < 1e-12);

        // duplicating every sample leaves the mean unchanged
        let rows = vec![vec![0.3, -0.2, 1.0], vec![-1.0, 0.5, 0.1]];
        let single = erm_loss(&tape_logits(&tape, &rows), &[2, 1]).unwrap().item();
        let doubled_rows = [rows.clone(), rows].concat();
        let doubled = erm_loss(&tape_logits(&tape, &doubled_rows), &[2, 1, 2, 1])
            .unwrap()
            .item();
        assert_relative_eq!(single, doubled, max_relative = 1e-14);

        assert!(erm_loss(&l, &[]).is_err());
    }

    #[test]
    fn theta_grad_ce_known_values() {
        let theta = DummyTheta::default();
        let tape = Tape::new();
        let z = tape_logits(&tape, &[vec![0.0, 0.0]]);
        let tg = theta_grad_ce(&z, &[0], &theta).unwrap();
        assert_eq!(tg.value().data(), &[0.0]);

        let z = tape_logits(&tape, &[vec![1.0, 0.0]]);
        let tg = theta_grad_ce(&z, &[0], &theta).unwrap();
        let sigma1 = 1.0f64.exp() / (1.0f64.exp() + 1.0);
        assert_relative_eq!(tg.value().data()[0], (sigma1 - 1.0) * 1.0, max_relative = 1e-9);
        assert_relative_eq!(tg.value().data()[0], -0.268941, max_relative = 1e-5);
    }

    #[test]
    fn theta_grad_ce_matches_finite_difference_in_theta() {
        // oracle: CE(y, softmax(z·θ)) differentiated numerically at θ=1
        fn ce_at_theta(z: &[f64], y: usize, theta: f64) -> f64 {
            let scaled: Vec<f64> = z.iter().map(|v| v * theta).collect();
            cross_entropy_scalar(&scaled, y).unwrap()
        }
        let mut rng = rng_from(41);
        let theta = DummyTheta::default();
        let tape = Tape::new();
        let h = 1e-5;
        for i in 0..100 {
            let n = rng.gen_range(2..8);
            let lam = if i % 3 == 0 { rng.gen_range(0.5..4.0) } else { 1.0 };
            let z: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0) * lam).collect();
            let y = rng.gen_range(0..n);
            let zv = tape.param(&Tensor::vector(z.clone()));
            let got = theta_grad_ce(&zv, &[y], &theta).unwrap().value().data()[0];
            let fd = (ce_at_theta(&z, y, 1.0 + h) - ce_at_theta(&z, y, 1.0 - h)) / (2.0 * h);
            assert!((got - fd).abs() < 1e-6, "closed form {got} vs fd {fd}");
        }
    }

    #[test]
    fn irm_loss_identities() {
        let theta = DummyTheta::default();
        let tape = Tape::new();
        let rows = vec![vec![0.4, -0.1], vec![-0.7, 0.2], vec![0.1, 0.1]];
        let labels = vec![0, 1, 0];
        let mk = || (tape_logits(&tape, &rows), labels.clone());

        // λ = 0 reduces to per-environment-summed ERM
        let envs = vec![mk(), mk()];
        let loss0 = irm_loss(&envs, 0.0, &theta, IrmPenalty::PerSampleSquared)
            .unwrap()
            .item();
        let erm = erm_loss(&tape_logits(&tape, &rows), &labels).unwrap().item();
        assert_relative_eq!(loss0, 2.0 * erm, max_relative = 1e-12);

        // identical environments double a single-environment value
        let one_env_val = erm + {
            let tg = theta_grad_ce(&tape_logits(&tape, &rows), &labels, &theta).unwrap();
            let sq: f64 = tg.value().data().iter().map(|v| v * v).sum::<f64>() / 3.0;
            1.5 * sq
        };
        let envs = vec![mk(), mk()];
        let loss = irm_loss(&envs, 1.5, &theta, IrmPenalty::PerSampleSquared)
            .unwrap()
            .item();
        assert_relative_eq!(loss, 2.0 * one_env_val, max_relative = 1e-12);

        // all-zero logits: zero penalty contribution
        let zero_rows = vec![vec![0.0, 0.0]; 2];
        let envs = vec![
            (tape_logits(&tape, &zero_rows), vec![0, 1]),
            (tape_logits(&tape, &zero_rows), vec![1, 0]),
        ];
        let with_pen = irm_loss(&envs, 10.0, &theta, IrmPenalty::PerSampleSquared)
            .unwrap()
            .item();
        assert_relative_eq!(with_pen, 2.0 * (2.0f64).ln(), max_relative = 1e-12);

        // single environment rejected
        assert!(irm_loss(&[mk()], 1.0, &theta, IrmPenalty::PerSampleSquared).is_err());
    }

    fn random_env(tape: &Tape, m: usize, k: usize, rng: &mut impl Rng) -> (Var, Var) {
        let f: Vec<Vec<f64>> = (0..m)
            .map(|_| (0..k).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let g: Vec<Vec<f64>> = (0..m)
            .map(|_| (0..k).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        (tape.param(&Tensor::from_rows(&f)), tape.param(&Tensor::from_rows(&g)))
    }

    /// Naive per-anchor loop; independent of the matrix construction.
    fn contrastive_oracle(
        f: &[Vec<f64>],
        g: &[Vec<f64>],
        include_self: bool,
    ) -> (Vec<f64>, Vec<f64>) {
        let m = f.len();
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let mut losses = Vec::with_capacity(m);
        let mut tgs = Vec::with_capacity(m);
        for i in 0..m {
            let s_plus = dot(&f[i], &g[i]);
            let mut terms = Vec::new();
            if include_self {
                for j in 0..m {
                    terms.push(dot(&f[i], &f[j]));
                }
            } else {
                terms.push(s_plus);
                for j in 0..m {
                    if j != i {
                        terms.push(dot(&f[i], &f[j]));
                    }
                }
            }
            let mx = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + terms.iter().map(|t| (t - mx).exp()).sum::<f64>().ln();
            losses.push(lse - s_plus);
            let probs: Vec<f64> = terms.iter().map(|t| (t - lse).exp()).collect();
            tgs.push(probs.iter().zip(&terms).map(|(p, t)| p * t).sum::<f64>() - s_plus);
        }
        (losses, tgs)
    }

    #[test]
    fn contrastive_matches_naive_loop() {
        let mut rng = rng_from(55);
        let theta = DummyTheta::default();
        for include_self in [false, true] {
            let cfg = ContrastiveConfig { include_self, ..Default::default() };
            for _ in 0..25 {
                let m = rng.gen_range(2..=8);
                let tape = Tape::new();
                let (fv, gv) = random_env(&tape, m, 5, &mut rng);
                let f: Vec<Vec<f64>> = (0..m).map(|i| fv.value().row(i).to_vec()).collect();
                let g: Vec<Vec<f64>> = (0..m).map(|i| gv.value().row(i).to_vec()).collect();
                let (want_losses, want_tgs) = contrastive_oracle(&f, &g, include_self);

                let (losses, tgs) = contrastive_parts(&fv, &gv, &theta, &cfg).unwrap();
                for (got, want) in losses.value().data().iter().zip(&want_losses) {
                    assert!((got - want).abs() < 1e-10, "{got} vs {want}");
                }
                for (got, want) in tgs.value().data().iter().zip(&want_tgs) {
                    assert!((got - want).abs() < 1e-10, "{got} vs {want}");
                }
            }
        }
    }

    #[test]
    fn contrastive_uniform_and_saturated_cases() {
        let theta = DummyTheta::default();
        let cfg = ContrastiveConfig::default();
        // constant features: every similarity equal → loss = ln(M), M = |env|
        let m = 6;
        let tape = Tape::new();
        let rows = vec![vec![0.5, -0.25, 1.0]; m];
        let f = tape.param(&Tensor::from_rows(&rows));
        let g = tape.param(&Tensor::from_rows(&rows));
        let loss = intra_class_contrastive(&f, &g, &theta, &cfg).unwrap().item();
        assert!((loss - (m as f64).ln()).abs() < 1e-12);
        // same under the literal reading
        let lit = ContrastiveConfig { include_self: true, ..Default::default() };
        let loss = intra_class_contrastive(&f, &g, &theta, &lit).unwrap().item();
        assert!((loss - (m as f64).ln()).abs() < 1e-12);

        // saturated: positive at +20, negatives at −20
        let tape = Tape::new();
        let s_plus = tape.constant_scalar(20.0);
        let terms = tape.constant(Tensor::vector(vec![20.0, -20.0, -20.0]));
        let p = terms.softmax();
        let anchor_loss = -(p.value().data()[0]).ln();
        assert!(anchor_loss < 1e-8);
        // θ-derivative: all terms equal v makes p uniform, derivative v − v
        let flat = tape.constant(Tensor::vector(vec![3.3; 4]));
        let tg = theta_grad_contrastive(&tape.constant_scalar(3.3), &flat, &theta).unwrap();
        assert!(tg.item().abs() < 1e-12, "flat-terms derivative {}", tg.item());
        // one positive at 1, one negative at 0: derivative = p⁺ − 1 < 0
        let terms = tape.constant(Tensor::vector(vec![1.0, 0.0]));
        let tg = theta_grad_contrastive(&tape.constant_scalar(1.0), &terms, &theta).unwrap();
        let p_plus = 1.0f64.exp() / (1.0f64.exp() + 1.0);
        assert_relative_eq!(tg.item(), p_plus - 1.0, max_relative = 1e-12);
        assert!(tg.item() < 0.0);
        let _ = s_plus;
    }

    #[test]
    fn theta_grad_contrastive_matches_finite_difference() {
        // oracle: loss(θ) = −s⁺θ + log Σ exp(d_j θ), differenced at θ=1
        fn loss_at_theta(s_plus: f64, terms: &[f64], theta: f64) -> f64 {
            let scaled: Vec<f64> = terms.iter().map(|t| t * theta).collect();
            let mx = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + scaled.iter().map(|t| (t - mx).exp()).sum::<f64>().ln();
            lse - s_plus * theta
        }
        let mut rng = rng_from(77);
        let theta = DummyTheta::default();
        let tape = Tape::new();
        let h = 1e-5;
        for _ in 0..100 {
            let k = rng.gen_range(2..10);
            let terms: Vec<f64> = (0..k).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let s_plus = rng.gen_range(-2.0..2.0);
            let got = theta_grad_contrastive(
                &tape.constant_scalar(s_plus),
                &tape.constant(Tensor::vector(terms.clone())),
                &theta,
            )
            .unwrap()
            .item();
            let fd = (loss_at_theta(s_plus, &terms, 1.0 + h)
                - loss_at_theta(s_plus, &terms, 1.0 - h))
                / (2.0 * h);
            assert!((got - fd).abs() < 1e-6, "closed form {got} vs fd {fd}");
        }
    }

    #[test]
    fn irmcon_composes_from_sub_ops() {
        let mut rng = rng_from(91);
        let theta = DummyTheta::default();
        let cfg = ContrastiveConfig::default();
        let tape = Tape::new();
        let envs: Vec<(Var, Var)> = (0..3).map(|_| random_env(&tape, 8, 4, &mut rng)).collect();
        let lambda = 0.8;

        let total = irmcon_loss(&envs, lambda, &theta, &cfg, ConPenalty::AbsMean)
            .unwrap()
            .item();
        let mut want = 0.0;
        for (f, g) in &envs {
            let (losses, tgs) = contrastive_parts(f, g, &theta, &cfg).unwrap();
            let lmean =
                losses.value().data().iter().sum::<f64>() / losses.value().len() as f64;
            let tmean = tgs.value().data().iter().sum::<f64>() / tgs.value().len() as f64;
            want += lmean + lambda * tmean.abs();
        }
        assert!((total - want).abs() < 1e-10, "{total} vs {want}");

        // λ = 0 sums the per-environment means
        let total0 = irmcon_loss(&envs, 0.0, &theta, &cfg, ConPenalty::AbsMean)
            .unwrap()
            .item();
        let mut want0 = 0.0;
        for (f, g) in &envs {
            want0 += intra_class_contrastive(f, g, &theta, &cfg).unwrap().item();
        }
        assert!((total0 - want0).abs() < 1e-12);

        // constant features: loss = Σ ln(M), penalty exactly 0
        let tape = Tape::new();
        let rows = vec![vec![1.0, 2.0]; 5];
        let envs: Vec<(Var, Var)> = (0..2)
            .map(|_| {
                (
                    tape.param(&Tensor::from_rows(&rows)),
                    tape.param(&Tensor::from_rows(&rows)),
                )
            })
            .collect();
        let v = irmcon_loss(&envs, 5.0, &theta, &cfg, ConPenalty::AbsMean)
            .unwrap()
            .item();
        assert!((v - 2.0 * (5.0f64).ln()).abs() < 1e-10);

        assert!(irmcon_loss(&envs[..1], 1.0, &theta, &cfg, ConPenalty::AbsMean).is_err());
    }

    #[test]
    fn weight_formula_cases() {
        let eps = 1e-8;
        assert_relative_eq!(lff_weight(2.0, 2.0, eps).unwrap(), 0.5, max_relative = 1e-9);
        let crushed = lff_weight(1.0, 0.0, eps).unwrap();
        assert!(crushed < 2e-8, "bias-aligned weight {crushed}");
        let kept = lff_weight(0.0, 1.0, eps).unwrap();
        assert!(kept > 0.9999999, "bias-conflicting weight {kept}");
        assert!(lff_weight(-0.1, 1.0, eps).is_err());
        // identical inputs give identical outputs across both formulas
        assert_eq!(
            lff_weight(0.7, 1.3, eps).unwrap(),
            irmcon_weight(0.7, 1.3, eps).unwrap()
        );
    }

    #[test]
    fn ipw_loss_rescales_to_mean_one() {
        let tape = Tape::new();
        let rows = vec![vec![0.0, 0.0], vec![0.0, 0.0]];
        // CE = ln2 for both; engineer CE = [1, 3] with crafted logits instead
        let z1 = vec![0.0, logit_for_ce(1.0)];
        let z2 = vec![0.0, logit_for_ce(3.0)];
        let l = tape_logits(&tape, &[z1, z2]);
        let loss = ipw_erm_loss(&l, &[0, 0], &[1.0, 0.5]).unwrap().item();
        assert_relative_eq!(loss, 5.0 / 3.0, max_relative = 1e-9);

        // all weights equal: exactly the ERM value
        let l2 = tape_logits(&tape, &rows);
        let erm = erm_loss(&l2, &[0, 1]).unwrap().item();
        let ipw = ipw_erm_loss(&l2, &[0, 1], &[0.37, 0.37]).unwrap().item();
        assert_eq!(erm, ipw);

        // a zero weight removes that sample
        let l3 = tape_logits(&tape, &rows);
        let only_second = ipw_erm_loss(&l3, &[0, 1], &[0.0, 1.0]).unwrap().item();
        assert_relative_eq!(only_second, (2.0f64).ln(), max_relative = 1e-12);

        assert!(ipw_erm_loss(&l3, &[0, 1], &[1.0]).is_err());
        assert!(ipw_erm_loss(&l3, &[0, 1], &[0.0, 0.0]).is_err());
    }

    /// Logit z such that CE([0, z], label 0) == target.
    fn logit_for_ce(target: f64) -> f64 {
        // CE = ln(1 + e^z) = target  ⇒  z = ln(e^target − 1)
        (target.exp() - 1.0).ln()
    }

    #[test]
    fn weight_table_roundtrip_and_bounds() {
        let mut table = WeightTable::new(WeightProvenance::IrmCon, 1e-8);
        table.insert(3, 0.5, 2.0).unwrap();
        table.insert(1, 2.0, 0.1).unwrap();
        assert_eq!(table.len(), 2);
        assert!(table.weight(3).unwrap() > table.weight(1).unwrap());
        assert!(matches!(table.weight(99), Err(Error::MissingWeight { id: 99 })));

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("weights.csv");
        table.save_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("sample_id,ce_main,ce_bias,weight,provenance\n"));
        // BTreeMap keys: rows come out id-sorted
        let lines: Vec<&str> = text.lines().collect();
        assert!(lines[1].starts_with("1,"));
        assert!(lines[2].starts_with("3,"));
        assert!(lines[1].ends_with(",irmcon"));
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn weights_stay_in_unit_interval(
                ce_main in 0.0..50.0f64,
                ce_bias in 0.0..50.0f64,
            ) {
                let w = lff_weight(ce_main, ce_bias, 1e-8).unwrap();
                prop_assert!(w > 0.0 && w <= 1.0);
                // monotone: more bias loss ⇒ larger weight
                let w2 = lff_weight(ce_main, ce_bias + 0.5, 1e-8).unwrap();
                prop_assert!(w2 >= w);
                // more main loss ⇒ smaller weight
                let w3 = lff_weight(ce_main + 0.5, ce_bias, 1e-8).unwrap();
                prop_assert!(w3 <= w);
            }

            #[test]
            fn gce_monotone_decreasing_in_confidence(
                p in 0.01..0.98f64,
                q in 0.05..1.0f64,
            ) {
                let lo = gce(&[p, 1.0 - p], 0, q).unwrap();
                let hi = gce(&[p + 0.01, 1.0 - p - 0.01], 0, q).unwrap();
                prop_assert!(hi <= lo);
            }

            #[test]
            fn contrastive_is_permutation_invariant(seed in 0u64..500) {
                let mut rng = rng_from(seed);
                let theta = DummyTheta::default();
                let cfg = ContrastiveConfig::default();
                let m = 6;
                let f: Vec<Vec<f64>> = (0..m)
                    .map(|_| (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect())
                    .collect();
                let g: Vec<Vec<f64>> = (0..m)
                    .map(|_| (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect())
                    .collect();
                let tape = Tape::new();
                let base = intra_class_contrastive(
                    &tape.param(&Tensor::from_rows(&f)),
                    &tape.param(&Tensor::from_rows(&g)),
                    &theta,
                    &cfg,
                ).unwrap().item();

                let mut order: Vec<usize> = (0..m).collect();
                use rand::seq::SliceRandom;
                order.shuffle(&mut rng);
                let fp: Vec<Vec<f64>> = order.iter().map(|&i| f[i].clone()).collect();
                let gp: Vec<Vec<f64>> = order.iter().map(|&i| g[i].clone()).collect();
                let permuted = intra_class_contrastive(
                    &tape.param(&Tensor::from_rows(&fp)),
                    &tape.param(&Tensor::from_rows(&gp)),
                    &theta,
                    &cfg,
                ).unwrap().item();
                prop_assert!((base - permuted).abs() < 1e-10);
            }

            #[test]
            fn penalties_are_nonnegative(seed in 0u64..200) {
                let mut rng = rng_from(seed);
                let theta = DummyTheta::default();
                let tape = Tape::new();
                let rows: Vec<Vec<f64>> = (0..4)
                    .map(|_| (0..3).map(|_| rng.gen_range(-2.0..2.0)).collect())
                    .collect();
                let labels = vec![0, 1, 2, 0];
                let envs = vec![
                    (tape.param(&Tensor::from_rows(&rows)), labels.clone()),
                    (tape.param(&Tensor::from_rows(&rows)), labels.clone()),
                ];
                let lam0 = irm_loss(&envs, 0.0, &theta, IrmPenalty::PerSampleSquared)
                    .unwrap().item();
                let envs = vec![
                    (tape.param(&Tensor::from_rows(&rows)), labels.clone()),
                    (tape.param(&Tensor::from_rows(&rows)), labels),
                ];
                let lam1 = irm_loss(&envs, 1.0, &theta, IrmPenalty::PerSampleSquared)
                    .unwrap().item();
                prop_assert!(lam1 >= lam0 - 1e-12);
            }
        }
    }

    #[test]
    fn normalized_mode_bounds_similarities() {
        let mut rng = rng_from(3);
        let theta = DummyTheta::default();
        let cfg = ContrastiveConfig { normalize: true, temperature: 0.5, ..Default::default() };
        let tape = Tape::new();
        let (f, g) = random_env(&tape, 5, 4, &mut rng);
        let (losses, _) = contrastive_parts(&f, &g, &theta, &cfg).unwrap();
        assert!(losses.value().is_finite());
        // cosine similarities scaled by 1/τ are bounded by 1/τ
        let fr = f.value();
        let n0: f64 = fr.row(0).iter().map(|v| v * v).sum::<f64>();
        assert!(n0 > 0.0);
    }
}

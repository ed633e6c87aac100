//! Synthetic two-factor datasets with a controllable context bias.
//!
//! Every observation is rendered from a class factor and a context factor,
//! `x = g(x_c, x_t)`. The train split pairs class k with context k for a
//! fraction `rho` of its samples; val and test splits distribute contexts
//! uniformly within each class. Ground-truth factor labels ride along on
//! every sample, which is what makes the probe measurements possible.

use crate::error::{Error, Result};
use crate::exec;
use crate::rng::{derive_seed_indexed, rng_for, rng_from};
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorKind {
    /// x = [class_prototype(y) + noise ; context_prototype(c) + noise]
    VectorConcat,
    /// p×p×3 image: a class-dependent binary glyph tinted by a
    /// context-dependent RGB color, plus pixel noise.
    ColorGrid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Split::Train => write!(f, "train"),
            Split::Val => write!(f, "val"),
            Split::Test => write!(f, "test"),
        }
    }
}

/// The generative process: factor prototypes plus rendering parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorSpec {
    pub kind: GeneratorKind,
    pub num_classes: usize,
    pub num_contexts: usize,
    /// VectorConcat: class block prototypes (n × d_c).
    /// ColorGrid: binary glyphs flattened to p² values in {0,1}.
    pub class_prototypes: Vec<Vec<f64>>,
    /// VectorConcat: context block prototypes (m × d_t).
    /// ColorGrid: RGB colors in [0,1]³.
    pub context_prototypes: Vec<Vec<f64>>,
    pub sigma_gen: f64,
    /// ColorGrid edge length; 0 for VectorConcat.
    pub grid_size: usize,
}

fn l2_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn min_pairwise(protos: &[Vec<f64>]) -> f64 {
    let mut best = f64::INFINITY;
    for i in 0..protos.len() {
        for j in i + 1..protos.len() {
            best = best.min(l2_dist(&protos[i], &protos[j]));
        }
    }
    best
}

/// Greedy farthest-point pick of `count` vectors of norm `scale` in `dim`
/// dimensions, drawn from a seeded candidate pool.
fn spread_prototypes(count: usize, dim: usize, scale: f64, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let pool: Vec<Vec<f64>> = (0..count.max(4) * 50)
        .map(|_| {
            let raw: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0f64)).collect();
            let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            raw.iter().map(|v| v / norm * scale).collect()
        })
        .collect();
    let mut chosen: Vec<Vec<f64>> = vec![pool[0].clone()];
    while chosen.len() < count {
        let next = pool
            .iter()
            .max_by(|a, b| {
                let da = chosen.iter().map(|c| l2_dist(a, c)).fold(f64::INFINITY, f64::min);
                let db = chosen.iter().map(|c| l2_dist(b, c)).fold(f64::INFINITY, f64::min);
                da.partial_cmp(&db).unwrap()
            })
            .unwrap();
        chosen.push(next.clone());
    }
    chosen
}

impl FactorSpec {
    /// Validates the prototype-separation invariant.
    pub fn new(
        kind: GeneratorKind,
        class_prototypes: Vec<Vec<f64>>,
        context_prototypes: Vec<Vec<f64>>,
        sigma_gen: f64,
        grid_size: usize,
    ) -> Result<Self> {
        if class_prototypes.is_empty() || context_prototypes.is_empty() {
            return Err(Error::Empty("factor prototypes"));
        }
        if sigma_gen < 0.0 {
            return Err(Error::invalid("sigma_gen must be nonnegative"));
        }
        if kind == GeneratorKind::ColorGrid {
            for g in &class_prototypes {
                if g.len() != grid_size * grid_size {
                    return Err(Error::invalid(format!(
                        "glyph length {} does not match grid {}x{}",
                        g.len(),
                        grid_size,
                        grid_size
                    )));
                }
            }
            for c in &context_prototypes {
                if c.len() != 3 {
                    return Err(Error::invalid("context colors must be RGB triples"));
                }
            }
        }
        let spec = FactorSpec {
            kind,
            num_classes: class_prototypes.len(),
            num_contexts: context_prototypes.len(),
            class_prototypes,
            context_prototypes,
            sigma_gen,
            grid_size,
        };
        let sep = 4.0 * sigma_gen;
        let class_min = min_pairwise(&spec.class_prototypes);
        let ctx_min = min_pairwise(&spec.context_prototypes);
        if class_min <= sep || ctx_min <= sep {
            return Err(Error::invalid(format!(
                "prototypes too close for sigma_gen={sigma_gen}: min class distance {class_min:.4}, min context distance {ctx_min:.4}, need > {sep:.4}"
            )));
        }
        Ok(spec)
    }

    /// Seeded VectorConcat process. Separate scales let the context block be
    /// an easier (higher-SNR) signal than the class block, mirroring the
    /// color-vs-shape asymmetry of image benchmarks.
    #[allow(clippy::too_many_arguments)]
    pub fn vector_concat(
        num_classes: usize,
        num_contexts: usize,
        class_dim: usize,
        context_dim: usize,
        sigma_gen: f64,
        class_scale: f64,
        context_scale: f64,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = rng_for(seed, "factor-spec-vector");
        let class = spread_prototypes(num_classes, class_dim, class_scale, &mut rng);
        let ctx = spread_prototypes(num_contexts, context_dim, context_scale, &mut rng);
        FactorSpec::new(GeneratorKind::VectorConcat, class, ctx, sigma_gen, 0)
    }

    /// Seeded ColorGrid process: random binary glyphs, evenly spaced hues.
    pub fn color_grid(
        num_classes: usize,
        num_contexts: usize,
        grid_size: usize,
        sigma_gen: f64,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = rng_for(seed, "factor-spec-grid");
        let glyphs: Vec<Vec<f64>> = (0..num_classes)
            .map(|_| {
                (0..grid_size * grid_size)
                    .map(|_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 })
                    .collect()
            })
            .collect();
        let colors: Vec<Vec<f64>> = (0..num_contexts)
            .map(|j| hsv_to_rgb(j as f64 / num_contexts as f64, 1.0, 1.0))
            .collect();
        FactorSpec::new(GeneratorKind::ColorGrid, glyphs, colors, sigma_gen, grid_size)
    }

    pub fn observation_dim(&self) -> usize {
        match self.kind {
            GeneratorKind::VectorConcat => {
                self.class_prototypes[0].len() + self.context_prototypes[0].len()
            }
            GeneratorKind::ColorGrid => self.grid_size * self.grid_size * 3,
        }
    }

    pub fn class_dim(&self) -> usize {
        self.class_prototypes[0].len()
    }

    pub fn context_dim(&self) -> usize {
        self.context_prototypes[0].len()
    }

    fn render(&self, y: usize, c: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let noise = Normal::new(0.0, self.sigma_gen.max(0.0)).unwrap();
        match self.kind {
            GeneratorKind::VectorConcat => {
                let mut x = Vec::with_capacity(self.observation_dim());
                for v in &self.class_prototypes[y] {
                    x.push(v + noise.sample(rng));
                }
                for v in &self.context_prototypes[c] {
                    x.push(v + noise.sample(rng));
                }
                x
            }
            GeneratorKind::ColorGrid => {
                let glyph = &self.class_prototypes[y];
                let color = &self.context_prototypes[c];
                let mut x = Vec::with_capacity(self.observation_dim());
                for g in glyph {
                    for ch in color {
                        x.push(g * ch + noise.sample(rng));
                    }
                }
                x
            }
        }
    }

    /// Deterministic coordinate-order flip: VectorConcat reverses within
    /// each factor block, ColorGrid mirrors horizontally.
    pub fn flip(&self, x: &[f64]) -> Vec<f64> {
        match self.kind {
            GeneratorKind::VectorConcat => {
                let dc = self.class_dim();
                let mut out = x.to_vec();
                out[..dc].reverse();
                out[dc..].reverse();
                out
            }
            GeneratorKind::ColorGrid => {
                let p = self.grid_size;
                let mut out = vec![0.0; x.len()];
                for i in 0..p {
                    for j in 0..p {
                        for ch in 0..3 {
                            out[(i * p + j) * 3 + ch] = x[(i * p + (p - 1 - j)) * 3 + ch];
                        }
                    }
                }
                out
            }
        }
    }
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> Vec<f64> {
    let i = (h * 6.0).floor();
    let f = h * 6.0 - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - f * s);
    let t = v * (1.0 - (1.0 - f) * s);
    match (i as i64).rem_euclid(6) {
        0 => vec![v, t, p],
        1 => vec![q, v, p],
        2 => vec![p, v, t],
        3 => vec![p, q, v],
        4 => vec![t, p, v],
        _ => vec![v, p, q],
    }
}

/// One labeled observation with its ground-truth factors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: usize,
    pub x: Vec<f64>,
    /// Class label.
    pub y: usize,
    /// Ground-truth context label (known because the data is synthetic).
    pub c: usize,
}

impl Sample {
    pub fn one_hot_y(&self, num_classes: usize) -> Vec<f64> {
        let mut v = vec![0.0; num_classes];
        v[self.y] = 1.0;
        v
    }

    /// Bias-aligned means the context matches the class's dominant context.
    pub fn is_aligned(&self) -> bool {
        self.y == self.c
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticDataset {
    pub samples: Vec<Sample>,
    pub rho: f64,
    pub split: Split,
    pub spec: FactorSpec,
    pub seed: u64,
}

impl SyntheticDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Observations for the given sample indices as a (B×d) matrix.
    pub fn observations(&self, indices: &[usize]) -> Tensor {
        let d = self.spec.observation_dim();
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(&self.samples[i].x);
        }
        Tensor::matrix(indices.len(), d, data)
    }

    pub fn all_observations(&self) -> Tensor {
        let idx: Vec<usize> = (0..self.len()).collect();
        self.observations(&idx)
    }

    pub fn labels(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.samples[i].y).collect()
    }

    pub fn contexts(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.samples[i].c).collect()
    }

    /// Empirical P(c == y), i.e. the realized bias ratio.
    pub fn aligned_fraction(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        self.samples.iter().filter(|s| s.is_aligned()).count() as f64 / self.len() as f64
    }

    /// Max−min context count within any class; 0 or 1 for balanced splits.
    pub fn context_imbalance(&self) -> usize {
        let (n, m) = (self.spec.num_classes, self.spec.num_contexts);
        let mut counts = vec![vec![0usize; m]; n];
        for s in &self.samples {
            counts[s.y][s.c] += 1;
        }
        counts
            .iter()
            .map(|row| row.iter().max().unwrap() - row.iter().min().unwrap())
            .max()
            .unwrap_or(0)
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        // val/test follow the 20/80 split convention of the evaluation pool
        SplitSizes { train: 5000, val: 2000, test: 8000 }
    }
}

pub struct DatasetTriple {
    pub train: SyntheticDataset,
    pub val: SyntheticDataset,
    pub test: SyntheticDataset,
}

/// Per-class sample counts: remainder spread over the first classes.
fn class_counts(total: usize, n: usize) -> Vec<usize> {
    let base = total / n;
    let rem = total % n;
    (0..n).map(|k| base + usize::from(k < rem)).collect()
}

/// Generate a biased train split plus balanced val/test splits.
pub fn generate(spec: &FactorSpec, rho: f64, sizes: SplitSizes, seed: u64) -> Result<DatasetTriple> {
    let (n, m) = (spec.num_classes, spec.num_contexts);
    if n != m {
        return Err(Error::invalid(format!(
            "aligned pairing requires num_classes == num_contexts, got {n} vs {m}"
        )));
    }
    let lo = 1.0 / m as f64;
    if !(lo..=1.0).contains(&rho) {
        return Err(Error::invalid(format!(
            "rho must lie in [1/m, 1] = [{lo:.4}, 1], got {rho}"
        )));
    }

    let train = build_split(spec, rho, sizes.train, Split::Train, seed)?;
    let val = build_split(spec, rho, sizes.val, Split::Val, seed)?;
    let test = build_split(spec, rho, sizes.test, Split::Test, seed)?;
    Ok(DatasetTriple { train, val, test })
}

fn build_split(
    spec: &FactorSpec,
    rho: f64,
    total: usize,
    split: Split,
    seed: u64,
) -> Result<SyntheticDataset> {
    if total == 0 {
        return Err(Error::Empty("split size"));
    }
    let (n, m) = (spec.num_classes, spec.num_contexts);
    let split_seed = derive_seed_indexed(seed, "split", split as u64);

    // (y, c) assignment per sample
    let mut pairs: Vec<(usize, usize)> = Vec::with_capacity(total);
    for (k, &count) in class_counts(total, n).iter().enumerate() {
        match split {
            Split::Train => {
                let aligned = (rho * count as f64).round() as usize;
                let aligned = aligned.min(count);
                for _ in 0..aligned {
                    pairs.push((k, k));
                }
                // spread the conflicting remainder cyclically over the
                // other contexts, starting just after the aligned one
                let mut ctx = (k + 1) % m;
                for _ in aligned..count {
                    pairs.push((k, ctx));
                    ctx = (ctx + 1) % m;
                    if ctx == k {
                        ctx = (ctx + 1) % m;
                    }
                }
            }
            Split::Val | Split::Test => {
                for i in 0..count {
                    pairs.push((k, i % m));
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..total).collect();
    order.shuffle(&mut rng_from(derive_seed_indexed(split_seed, "order", 0)));

    // render in parallel; each sample owns a derived RNG stream
    let samples: Vec<Sample> = exec::map_range(total, |id| {
        let (y, c) = pairs[order[id]];
        let mut rng = rng_from(derive_seed_indexed(split_seed, "render", order[id] as u64));
        Sample { id, x: spec.render(y, c, &mut rng), y, c }
    });

    Ok(SyntheticDataset { samples, rho, split, spec: spec.clone(), seed })
}

/// Stochastic augmentation: an independent coin for the coordinate flip and
/// another for additive Gaussian noise.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub flip_prob: f64,
    pub noise_prob: f64,
    pub sigma: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig { flip_prob: 0.5, noise_prob: 0.5, sigma: 0.05 }
    }
}

pub fn augment(spec: &FactorSpec, x: &[f64], cfg: &AugmentConfig, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let do_flip = cfg.flip_prob > 0.0 && rng.gen_bool(cfg.flip_prob.min(1.0));
    let do_noise = cfg.noise_prob > 0.0 && rng.gen_bool(cfg.noise_prob.min(1.0));
    let mut out = if do_flip { spec.flip(x) } else { x.to_vec() };
    if do_noise && cfg.sigma > 0.0 {
        let noise = Normal::new(0.0, cfg.sigma).unwrap();
        for v in &mut out {
            *v += noise.sample(rng);
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvKind {
    /// Environments share a ground-truth context label (IRM).
    ByContext,
    /// Environments share a class label (IRMCon).
    ByClass,
}

/// A subset of dataset indices sharing one environment id.
#[derive(Debug, Clone)]
pub struct EnvironmentBatch {
    pub env_id: usize,
    pub kind: EnvKind,
    /// Indices into the source dataset's samples.
    pub indices: Vec<usize>,
}

impl EnvironmentBatch {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Partition a dataset into environments; env ids ascend and every sample
/// lands in exactly one batch.
pub fn split_environments(ds: &SyntheticDataset, kind: EnvKind) -> Result<Vec<EnvironmentBatch>> {
    if ds.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    let groups = match kind {
        EnvKind::ByContext => ds.spec.num_contexts,
        EnvKind::ByClass => ds.spec.num_classes,
    };
    let mut envs: Vec<EnvironmentBatch> = (0..groups)
        .map(|env_id| EnvironmentBatch { env_id, kind, indices: Vec::new() })
        .collect();
    for (i, s) in ds.samples.iter().enumerate() {
        let g = match kind {
            EnvKind::ByContext => s.c,
            EnvKind::ByClass => s.y,
        };
        envs[g].indices.push(i);
    }
    envs.retain(|e| !e.indices.is_empty());
    Ok(envs)
}

// ---------------------------------------------------------------------------
// Dataset file format: one JSON header line, then CSV rows `id,y,c,x...`.
// Floats print in shortest round-trip form, so save/load is bit-exact.
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct DatasetHeader {
    format: String,
    spec: FactorSpec,
    rho: f64,
    seed: u64,
    split: Split,
    n_samples: usize,
}

pub const DATASET_FORMAT: &str = "invlab-dataset-v1";

pub fn save_dataset(ds: &SyntheticDataset, path: impl AsRef<Path>) -> Result<()> {
    let header = DatasetHeader {
        format: DATASET_FORMAT.to_string(),
        spec: ds.spec.clone(),
        rho: ds.rho,
        seed: ds.seed,
        split: ds.split,
        n_samples: ds.len(),
    };
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "{}", serde_json::to_string(&header)?)?;
    write!(w, "id,y,c")?;
    for j in 0..ds.spec.observation_dim() {
        write!(w, ",x{j}")?;
    }
    writeln!(w)?;
    for s in &ds.samples {
        write!(w, "{},{},{}", s.id, s.y, s.c)?;
        for v in &s.x {
            write!(w, ",{v}")?;
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<SyntheticDataset> {
    let f = std::fs::File::open(path)?;
    let mut lines = BufReader::new(f).lines();
    let header_line = lines
        .next()
        .ok_or_else(|| Error::Parse { line: 1, msg: "missing header".into() })??;
    let header: DatasetHeader = serde_json::from_str(&header_line)?;
    if header.format != DATASET_FORMAT {
        return Err(Error::invalid(format!(
            "unsupported dataset format {:?}, expected {DATASET_FORMAT:?}",
            header.format
        )));
    }
    let _columns = lines
        .next()
        .ok_or_else(|| Error::Parse { line: 2, msg: "missing column row".into() })??;

    let d = header.spec.observation_dim();
    let mut samples = Vec::with_capacity(header.n_samples);
    for (lineno, line) in lines.enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split(',');
        let parse_err = |msg: String| Error::Parse { line: lineno + 3, msg };
        let id: usize = fields
            .next()
            .ok_or_else(|| parse_err("missing id".into()))?
            .parse()
            .map_err(|e| parse_err(format!("bad id: {e}")))?;
        let y: usize = fields
            .next()
            .ok_or_else(|| parse_err("missing y".into()))?
            .parse()
            .map_err(|e| parse_err(format!("bad y: {e}")))?;
        let c: usize = fields
            .next()
            .ok_or_else(|| parse_err("missing c".into()))?
            .parse()
            .map_err(|e| parse_err(format!("bad c: {e}")))?;
        let x: Vec<f64> = fields
            .map(|v| v.parse::<f64>().map_err(|e| parse_err(format!("bad value: {e}"))))
            .collect::<Result<_>>()?;
        if x.len() != d {
            return Err(parse_err(format!("expected {d} coordinates, got {}", x.len())));
        }
        samples.push(Sample { id, x, y, c });
    }
    if samples.len() != header.n_samples {
        return Err(Error::invalid(format!(
            "header announces {} samples, file has {}",
            header.n_samples,
            samples.len()
        )));
    }
    Ok(SyntheticDataset {
        samples,
        rho: header.rho,
        split: header.split,
        spec: header.spec,
        seed: header.seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_spec() -> FactorSpec {
        FactorSpec::vector_concat(10, 10, 8, 8, 0.25, 1.3, 2.6, 7).unwrap()
    }

    #[test]
    fn bias_arithmetic_999_of_1000() {
        let spec = tiny_spec();
        let sizes = SplitSizes { train: 10_000, val: 1000, test: 1000 };
        let t = generate(&spec, 0.999, sizes, 1).unwrap();
        // per class: 999 aligned + 1 conflicting
        for k in 0..10 {
            let class: Vec<_> = t.train.samples.iter().filter(|s| s.y == k).collect();
            assert_eq!(class.len(), 1000);
            let aligned = class.iter().filter(|s| s.c == k).count();
            assert_eq!(aligned, 999, "class {k}");
        }
        assert!((t.train.aligned_fraction() - 0.999).abs() < 1e-9);
    }

    #[test]
    fn balanced_split_has_exact_cells() {
        let spec = tiny_spec();
        let sizes = SplitSizes { train: 100, val: 100, test: 10_000 };
        let t = generate(&spec, 0.99, sizes, 3).unwrap();
        let mut cells = vec![vec![0usize; 10]; 10];
        for s in &t.test.samples {
            cells[s.y][s.c] += 1;
        }
        for row in &cells {
            for &v in row {
                assert_eq!(v, 100);
            }
        }
        assert_eq!(t.test.context_imbalance(), 0);
        assert_eq!(t.val.context_imbalance(), 0);
    }

    #[test]
    fn rho_at_uniform_floor_is_balanced() {
        let spec = tiny_spec();
        let sizes = SplitSizes { train: 1000, val: 100, test: 100 };
        let t = generate(&spec, 0.1, sizes, 5).unwrap();
        assert!(t.train.context_imbalance() <= 1);
        assert!((t.train.aligned_fraction() - 0.1).abs() < 0.02);
    }

    #[test]
    fn generation_is_reproducible() {
        let spec = tiny_spec();
        let sizes = SplitSizes { train: 300, val: 100, test: 100 };
        let a = generate(&spec, 0.95, sizes, 9).unwrap();
        let b = generate(&spec, 0.95, sizes, 9).unwrap();
        assert_eq!(a.train.samples, b.train.samples);
        assert_eq!(a.test.samples, b.test.samples);
        let c = generate(&spec, 0.95, sizes, 10).unwrap();
        assert_ne!(a.train.samples, c.train.samples);
    }

    #[test]
    fn invalid_rho_and_mismatched_factors_rejected() {
        let spec = tiny_spec();
        let sizes = SplitSizes::default();
        assert!(generate(&spec, 0.05, sizes, 0).is_err());
        assert!(generate(&spec, 1.01, sizes, 0).is_err());
        let lopsided = FactorSpec::vector_concat(4, 8, 8, 8, 0.25, 1.3, 2.6, 7).unwrap();
        assert!(generate(&lopsided, 0.5, sizes, 0).is_err());
    }

    #[test]
    fn prototype_separation_enforced() {
        let protos = vec![vec![0.0, 0.0], vec![0.1, 0.0]];
        let err = FactorSpec::new(GeneratorKind::VectorConcat, protos.clone(), protos, 0.25, 0);
        assert!(err.is_err());
    }

    #[test]
    fn augment_identity_when_nothing_drawn() {
        let spec = tiny_spec();
        let x: Vec<f64> = (0..16).map(|i| i as f64).collect();
        let cfg = AugmentConfig { flip_prob: 0.0, noise_prob: 0.0, sigma: 0.0 };
        let mut rng = rng_from(0);
        assert_eq!(augment(&spec, &x, &cfg, &mut rng), x);
    }

    #[test]
    fn flip_is_an_involution() {
        let vec_spec = tiny_spec();
        let x: Vec<f64> = (0..16).map(|i| i as f64 * 0.5).collect();
        assert_eq!(vec_spec.flip(&vec_spec.flip(&x)), x);

        let grid_spec = FactorSpec::color_grid(4, 4, 8, 0.1, 3).unwrap();
        let img: Vec<f64> = (0..192).map(|i| (i % 13) as f64).collect();
        assert_eq!(grid_spec.flip(&grid_spec.flip(&img)), img);
    }

    #[test]
    fn augment_noise_is_centered() {
        let spec = tiny_spec();
        let x: Vec<f64> = (0..16).map(|i| (i as f64).sin()).collect();
        let cfg = AugmentConfig { flip_prob: 0.0, noise_prob: 0.5, sigma: 0.05 };
        let mut rng = rng_from(11);
        let trials = 10_000;
        let mut mean = vec![0.0; x.len()];
        for _ in 0..trials {
            let a = augment(&spec, &x, &cfg, &mut rng);
            for (m, v) in mean.iter_mut().zip(&a) {
                *m += v / trials as f64;
            }
        }
        let tol = 3.0 * cfg.sigma / (trials as f64).sqrt();
        for (m, v) in mean.iter().zip(&x) {
            assert!((m - v).abs() < tol, "|{m} - {v}| >= {tol}");
        }
    }

    #[test]
    fn environments_partition_the_dataset() {
        let spec = tiny_spec();
        let sizes = SplitSizes { train: 500, val: 100, test: 1000 };
        let t = generate(&spec, 0.99, sizes, 4).unwrap();

        for kind in [EnvKind::ByClass, EnvKind::ByContext] {
            let envs = split_environments(&t.test, kind).unwrap();
            let mut seen = vec![false; t.test.len()];
            for e in &envs {
                for &i in &e.indices {
                    assert!(!seen[i], "sample {i} in two environments");
                    seen[i] = true;
                }
            }
            assert!(seen.iter().all(|&s| s));
            let ids: Vec<usize> = envs.iter().map(|e| e.env_id).collect();
            let mut sorted = ids.clone();
            sorted.sort_unstable();
            assert_eq!(ids, sorted);
        }

        // ByClass on a balanced set: equal batch sizes
        let envs = split_environments(&t.test, EnvKind::ByClass).unwrap();
        assert_eq!(envs.len(), 10);
        assert!(envs.iter().all(|e| e.len() == 100));

        // ByContext on a biased train set: dominated by the aligned class
        let envs = split_environments(&t.train, EnvKind::ByContext).unwrap();
        for e in &envs {
            let own = e
                .indices
                .iter()
                .filter(|&&i| t.train.samples[i].y == e.env_id)
                .count();
            let frac = own as f64 / e.len() as f64;
            assert!(frac > 0.9, "context env {} only {frac:.3} aligned", e.env_id);
        }
    }

    #[test]
    fn dataset_file_roundtrip_is_bit_exact() {
        let spec = tiny_spec();
        let sizes = SplitSizes { train: 120, val: 40, test: 40 };
        let t = generate(&spec, 0.95, sizes, 21).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train.csv");
        save_dataset(&t.train, &path).unwrap();
        let back = load_dataset(&path).unwrap();
        assert_eq!(back.samples, t.train.samples);
        assert_eq!(back.rho, t.train.rho);
        assert_eq!(back.split, t.train.split);
        assert_eq!(back.spec, t.train.spec);
        // saving again produces identical bytes
        let path2 = dir.path().join("again.csv");
        save_dataset(&back, &path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }
}

//! Multinomial batch sampling with replacement, probability ∝ score.

use crate::error::{Error, Result};
use crate::rng::rng_from;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Deterministic weighted sampler over item positions `0..n`.
pub struct WeightedSampler {
    cumulative: Vec<f64>,
    total: f64,
    rng: ChaCha8Rng,
}

impl WeightedSampler {
    pub fn new(scores: &[f64], seed: u64) -> Result<Self> {
        if scores.is_empty() {
            return Err(Error::Empty("sampler scores"));
        }
        if scores.iter().any(|&s| s < 0.0 || !s.is_finite()) {
            return Err(Error::invalid("sampler scores must be finite and nonnegative"));
        }
        let mut cumulative = Vec::with_capacity(scores.len());
        let mut acc = 0.0;
        for &s in scores {
            acc += s;
            cumulative.push(acc);
        }
        if acc <= 0.0 {
            return Err(Error::invalid("sampler scores must not all be zero"));
        }
        Ok(WeightedSampler { cumulative, total: acc, rng: rng_from(seed) })
    }

    pub fn draw(&mut self) -> usize {
        let u = self.rng.gen_range(0.0..self.total);
        // first index whose cumulative weight exceeds u
        self.cumulative.partition_point(|&c| c <= u).min(self.cumulative.len() - 1)
    }

    /// One mini-batch, drawn with replacement.
    pub fn draw_batch(&mut self, size: usize) -> Vec<usize> {
        (0..size).map(|_| self.draw()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// 0.999-quantile of χ²(df) via the Wilson–Hilferty approximation.
    fn chi2_crit(df: usize) -> f64 {
        let df = df as f64;
        let z = 3.090_23; // Φ⁻¹(0.999)
        df * (1.0 - 2.0 / (9.0 * df) + z * (2.0 / (9.0 * df)).sqrt()).powi(3)
    }

    #[test]
    fn uniform_scores_sample_uniformly() {
        let n = 100;
        let draws = 100_000;
        let mut sampler = WeightedSampler::new(&vec![1.0; n], 7).unwrap();
        let mut counts = vec![0usize; n];
        for _ in 0..draws {
            counts[sampler.draw()] += 1;
        }
        let expected = draws as f64 / n as f64;
        let stat: f64 = counts
            .iter()
            .map(|&c| {
                let d = c as f64 - expected;
                d * d / expected
            })
            .sum();
        let crit = chi2_crit(n - 1);
        assert!(stat < crit, "chi-square {stat:.1} exceeds {crit:.1}");
    }

    #[test]
    fn dominant_score_dominates_batches() {
        let mut scores = vec![1.0; 50];
        scores[17] = 1e6;
        let mut sampler = WeightedSampler::new(&scores, 3).unwrap();
        let batch = sampler.draw_batch(1000);
        let hits = batch.iter().filter(|&&i| i == 17).count();
        assert!(hits > 950, "dominant item drawn only {hits}/1000 times");
    }

    #[test]
    fn fixed_seed_reproduces_the_stream() {
        let scores: Vec<f64> = (1..=20).map(|i| i as f64).collect();
        let mut a = WeightedSampler::new(&scores, 11).unwrap();
        let mut b = WeightedSampler::new(&scores, 11).unwrap();
        assert_eq!(a.draw_batch(500), b.draw_batch(500));
        let mut c = WeightedSampler::new(&scores, 12).unwrap();
        assert_ne!(a.draw_batch(500), c.draw_batch(500));
    }

    #[test]
    fn degenerate_scores_rejected() {
        assert!(WeightedSampler::new(&[], 0).is_err());
        assert!(WeightedSampler::new(&[0.0, 0.0], 0).is_err());
        assert!(WeightedSampler::new(&[1.0, -0.5], 0).is_err());
    }
}

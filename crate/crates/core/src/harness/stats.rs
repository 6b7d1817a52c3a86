//! Chi-square checks on the distributions the server can observe.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::Serialize;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::client::{ClientConfig, ClientState};
use crate::database::{Geometry, PrpKey};
use crate::ggm::{
    default_max_attempts, leaf_offset, puncture, resample, subtree_leaves, IndexConstraint, Seed,
    TreePath,
};
use crate::server::ParityMatrix;
use crate::wire::AnswerPayload;

pub const SIGNIFICANCE: f64 = 0.001;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ChiSquareOutcome {
    pub statistic: f64,
    pub dof: usize,
    pub p_value: f64,
    pub samples: u64,
}

impl ChiSquareOutcome {
    pub fn passes(&self, significance: f64) -> bool {
        self.p_value >= significance
    }
}

fn p_value(statistic: f64, dof: usize) -> f64 {
    if dof == 0 {
        return 1.0;
    }
    ChiSquared::new(dof as f64).expect("positive dof").sf(statistic)
}

/// Goodness of fit of `counts` against the uniform distribution.
pub fn chi_square_uniform(counts: &[u64]) -> ChiSquareOutcome {
    let total: u64 = counts.iter().sum();
    let expected = total as f64 / counts.len() as f64;
    let statistic = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    let dof = counts.len().saturating_sub(1);
    ChiSquareOutcome { statistic, dof, p_value: p_value(statistic, dof), samples: total }
}

/// Homogeneity of two histograms over the same bins; empty bins are
/// dropped from the degrees of freedom.
pub fn chi_square_two_sample(a: &[u64], b: &[u64]) -> ChiSquareOutcome {
    assert_eq!(a.len(), b.len());
    let (na, nb) = (a.iter().sum::<u64>() as f64, b.iter().sum::<u64>() as f64);
    let (ka, kb) = ((nb / na).sqrt(), (na / nb).sqrt());
    let mut statistic = 0.0;
    let mut bins = 0usize;
    for (&x, &y) in a.iter().zip(b) {
        if x + y == 0 {
            continue;
        }
        bins += 1;
        statistic += (ka * x as f64 - kb * y as f64).powi(2) / (x + y) as f64;
    }
    let dof = bins.saturating_sub(1);
    ChiSquareOutcome { statistic, dof, p_value: p_value(statistic, dof), samples: (na + nb) as u64 }
}

/// Histogram of `extract(seed)` over `samples` random seeds, tested for
/// uniformity over `2^levels` bins.
pub fn leaf_offset_uniformity(
    samples: usize,
    levels: u32,
    extract: impl Fn(&Seed) -> u32,
    seed: u64,
) -> ChiSquareOutcome {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let bins = 1usize << levels;
    let mut counts = vec![0u64; bins];
    for _ in 0..samples {
        let bin = extract(&Seed::random(&mut rng)) as usize;
        counts[bin % bins] += 1;
    }
    chi_square_uniform(&counts)
}

/// Offsets of the leaves in a resampled subtree other than the constrained
/// one, over `resamples` random (key, puncture point, +y) draws.
pub fn resample_uniformity(resamples: usize, levels: u32, seed: u64) -> ChiSquareOutcome {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let sqrt_n = 1u32 << levels;
    let mut counts = vec![0u64; sqrt_n as usize];
    for _ in 0..resamples {
        let key = Seed::random(&mut rng);
        let x = rng.random_range(0..sqrt_n);
        // keep the replaced subtree large: y differs from x in the first bit
        let y = rng.random_range(0..sqrt_n / 2) | (!x & (sqrt_n / 2));
        let at = TreePath::new(x, levels);
        let positive = IndexConstraint::positive(y, rng.random_range(0..sqrt_n));
        let pk = puncture(&key, &at);
        let out = resample(&pk, &at, &positive, &[], levels, default_max_attempts(levels, 0), &mut rng)
            .expect("unconstrained resample succeeds");
        let placement = at.placement(1);
        for (chunk, offset) in subtree_leaves(out.subkey(1), &placement, levels) {
            if chunk != y {
                counts[offset.0 as usize] += 1;
            }
        }
    }
    chi_square_uniform(&counts)
}

/// Histogram of punctured-key bytes sent for `target` from fresh client
/// states. Trial `i` uses the same randomness whatever the target, so equal
/// targets give identical histograms.
pub fn wire_byte_histogram(target: u64, trials: usize, seed: u64) -> Vec<u64> {
    let geometry = Geometry::new(3);
    let warmups = geometry.epoch_queries() - 1;
    let zero_chunk = vec![0u8; geometry.sqrt_n() as usize];
    let zero_answer = AnswerPayload { matrix: ParityMatrix::zeroed(geometry.levels(), 1), chunks: vec![] };
    let mut counts = vec![0u64; 256];
    for trial in 0..trials {
        let trial_seed = seed.wrapping_mul(0x100_0000_01b3).wrapping_add(trial as u64);
        let mut rng = ChaCha20Rng::seed_from_u64(trial_seed);
        let config = ClientConfig { c1: 2, c2: 4, pipeline: false, seed: rng.random() };
        let mut state = ClientState::new(geometry, 1, PrpKey::random(&mut rng), config);
        for chunk in 0..geometry.sqrt_n() {
            state.ingest_chunk(chunk, &zero_chunk).expect("fresh chunk");
        }
        // earlier queries promote backup hints so later keys may be resampled
        for _ in 0..warmups {
            let index = rng.random_range(0..geometry.n());
            let pending = state.prepare_query(index).expect("budget left");
            let _ = state.finish_query(pending, zero_answer.clone());
        }
        let pending = state.prepare_query(target).expect("budget left");
        for &byte in &pending.key().to_bytes() {
            counts[byte as usize] += 1;
        }
    }
    counts
}

pub fn wire_bytes_two_sample(target_a: u64, target_b: u64, trials: usize, seed: u64) -> ChiSquareOutcome {
    let a = wire_byte_histogram(target_a, trials, seed);
    let b = wire_byte_histogram(target_b, trials, seed);
    chi_square_two_sample(&a, &b)
}

#[derive(Debug, Clone, Serialize)]
pub struct StatTestResult {
    pub name: &'static str,
    pub outcome: ChiSquareOutcome,
    pub passed: bool,
}

impl StatTestResult {
    fn new(name: &'static str, outcome: ChiSquareOutcome) -> Self {
        Self { name, passed: outcome.passes(SIGNIFICANCE), outcome }
    }
}

/// Default battery: resample uniformity, wire-byte homogeneity across two
/// targets, and leaf-offset uniformity.
pub fn stat_tests() -> Vec<StatTestResult> {
    vec![
        StatTestResult::new("resample-uniformity", resample_uniformity(10_000, 3, 11)),
        StatTestResult::new("wire-bytes-two-sample", wire_bytes_two_sample(5, 58, 10_000, 12)),
        StatTestResult::new(
            "leaf-offset-uniformity",
            leaf_offset_uniformity(100_000, 6, |s| leaf_offset(s, 6).0, 13),
        ),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_counts_pass_and_skewed_fail() {
        let flat = chi_square_uniform(&[100; 8]);
        assert_eq!(flat.statistic, 0.0);
        assert!(flat.passes(SIGNIFICANCE));
        let skewed = chi_square_uniform(&[200, 0, 100, 100, 100, 100, 100, 100]);
        assert!(!skewed.passes(SIGNIFICANCE));
    }

    #[test]
    fn chi_square_statistic_by_hand() {
        // (10-15)²/15 + (20-15)²/15 = 50/15
        let out = chi_square_uniform(&[10, 20]);
        assert!((out.statistic - 50.0 / 15.0).abs() < 1e-12);
        assert_eq!(out.dof, 1);
        // P(χ²₁ > 3.333) ≈ 0.0679
        assert!((out.p_value - 0.067889).abs() < 1e-4, "{}", out.p_value);
    }

    #[test]
    fn two_sample_identical_is_zero() {
        let out = chi_square_two_sample(&[5, 0, 7], &[5, 0, 7]);
        assert_eq!(out.statistic, 0.0);
        assert_eq!(out.dof, 1);
        let out = chi_square_two_sample(&[100, 0], &[0, 100]);
        assert!(!out.passes(SIGNIFICANCE));
    }

    #[test]
    fn leaf_offsets_are_uniform() {
        let out = leaf_offset_uniformity(100_000, 6, |s| leaf_offset(s, 6).0, 1);
        assert!(out.passes(SIGNIFICANCE), "{out:?}");
    }

    #[test]
    fn biased_extractor_is_caught() {
        let out = leaf_offset_uniformity(100_000, 6, |s| leaf_offset(s, 6).0 % 3, 1);
        assert!(!out.passes(SIGNIFICANCE), "{out:?}");
    }

    #[test]
    fn same_target_histograms_coincide() {
        let a = wire_byte_histogram(9, 50, 4);
        assert_eq!(a, wire_byte_histogram(9, 50, 4));
        assert_eq!(wire_bytes_two_sample(9, 9, 50, 4).statistic, 0.0);
    }
}

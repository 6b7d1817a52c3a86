//! Server answer latency across database sizes.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::Serialize;

use crate::database::{Database, Geometry};
use crate::ggm::{puncture, PuncturedKey, Seed, TreePath};
use crate::harness::naive_answer;
use crate::server::answer;

#[derive(Debug, Clone, Serialize)]
pub struct LatencyRow {
    pub n: u64,
    pub samples: usize,
    pub median_us: f64,
    /// Median of the per-candidate recomputation, when measured.
    pub naive_median_us: Option<f64>,
}

pub fn median(samples: &mut [Duration]) -> Duration {
    assert!(!samples.is_empty());
    samples.sort_unstable();
    samples[samples.len() / 2]
}

fn random_keys(rng: &mut ChaCha20Rng, levels: u32, count: usize) -> Vec<PuncturedKey> {
    (0..count)
        .map(|_| {
            let chunk = rng.random_range(0..1u32 << levels);
            puncture(&Seed::random(rng), &TreePath::new(chunk, levels))
        })
        .collect()
}

/// Median wall time of `f` over each key.
pub fn time_answers<F: FnMut(&PuncturedKey)>(keys: &[PuncturedKey], mut f: F) -> Duration {
    // one untimed call warms caches
    f(&keys[0]);
    let mut samples: Vec<Duration> = keys
        .iter()
        .map(|key| {
            let started = Instant::now();
            f(key);
            started.elapsed()
        })
        .collect();
    median(&mut samples)
}

/// Median answer latency for each `n` over `queries` random punctured keys
/// on a random database; optionally also the naive baseline over
/// `naive_queries` keys.
pub fn bench_server(
    n_list: &[u64],
    entry_size: usize,
    queries: usize,
    naive_queries: usize,
    seed: u64,
) -> Vec<LatencyRow> {
    n_list
        .iter()
        .map(|&n| {
            let geometry = Geometry::for_entries(n).expect("n must be a power of four");
            let mut rng = ChaCha20Rng::seed_from_u64(seed ^ n);
            let db = Database::random(geometry, entry_size, &mut rng);
            let keys = random_keys(&mut rng, geometry.levels(), queries.max(1));
            let fast = time_answers(&keys, |k| {
                std::hint::black_box(answer(&db, k).expect("well-formed key"));
            });
            let naive = (naive_queries > 0).then(|| {
                let keys = &keys[..naive_queries.min(keys.len())];
                time_answers(keys, |k| {
                    std::hint::black_box(naive_answer(&db, k));
                })
            });
            LatencyRow {
                n,
                samples: keys.len(),
                median_us: fast.as_secs_f64() * 1e6,
                naive_median_us: naive.map(|d| d.as_secs_f64() * 1e6),
            }
        })
        .collect()
}

pub fn render_table(rows: &[LatencyRow]) -> String {
    let mut out = format!("{:>10} {:>8} {:>14} {:>14}\n", "n", "samples", "median_us", "naive_us");
    for row in rows {
        let naive = row.naive_median_us.map_or("-".to_string(), |v| format!("{v:.1}"));
        out.push_str(&format!("{:>10} {:>8} {:>14.1} {:>14}\n", row.n, row.samples, row.median_us, naive));
    }
    out
}

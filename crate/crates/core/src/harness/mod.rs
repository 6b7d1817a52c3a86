//! End-to-end simulation against brute-force oracles.

pub mod bench;
pub mod stats;

use std::sync::Arc;
use std::time::Instant;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::Serialize;

use crate::client::{Client, ClientConfig, ClientError};
use crate::database::{xor_into, Database, DbError, Geometry};
use crate::ggm::{eval_path, leaf_offset, PuncturedKey, TreePath};
use crate::server::{LocalTransport, ParityMatrix, Server};
use crate::wire::{Direction, MsgType, Transport, FRAME_HEADER_BYTES};

/// Ground truth: the entry itself.
pub fn naive_pir(db: &Database, index: u64) -> Result<Vec<u8>, DbError> {
    db.entry(index).map(<[u8]>::to_vec)
}

/// Parity matrix recomputed candidate by candidate, every leaf walked
/// from its subkey separately. Quadratic in `√n`; for tests and baselines.
pub fn naive_answer(db: &Database, key: &PuncturedKey) -> ParityMatrix {
    let levels = db.geometry().levels();
    assert_eq!(key.levels(), levels);
    let b = db.entry_size();
    let mut matrix = ParityMatrix::zeroed(levels, b);
    for column in 0..db.geometry().sqrt_n() {
        let guess = TreePath::new(column, levels);
        let mut total = vec![0u8; b];
        for level in 1..=levels {
            let placement = guess.placement(level);
            let depth = levels - level;
            let mut acc = vec![0u8; b];
            for rel in 0..1u32 << depth {
                let leaf = eval_path(key.subkey(level), &TreePath::new(rel, depth));
                let chunk = placement.concat(&TreePath::new(rel, depth)).value();
                let entry = db.entry((chunk as u64) << levels | leaf_offset(&leaf, levels).0 as u64);
                xor_into(&mut acc, entry.expect("in range"));
            }
            xor_into(&mut total, &acc);
            matrix.cell_mut(level, column).copy_from_slice(&acc);
        }
        matrix.cell_mut(0, column).copy_from_slice(&total);
    }
    matrix
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct SimParams {
    pub n: u64,
    pub entry_size: usize,
    pub c1: usize,
    pub c2: usize,
    pub seeds: u64,
    pub queries_per_seed: usize,
    pub pipeline: bool,
    /// Offset added to the per-run seed, to get independent batches.
    pub base_seed: u64,
}

impl Default for SimParams {
    fn default() -> Self {
        Self {
            n: 4096,
            entry_size: 32,
            c1: 8,
            c2: 24,
            seeds: 100,
            queries_per_seed: 32,
            pipeline: false,
            base_seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum Outcome {
    Correct,
    Wrong,
    Miss,
    Exhausted,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct EpochTally {
    pub epoch: u64,
    pub queries: u64,
    pub correct: u64,
    pub wrong: u64,
    pub misses: u64,
    pub backup_exhaustions: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct SimReport {
    pub seeds_run: u64,
    pub queries_per_seed: usize,
    pub total_queries: u64,
    pub correct: u64,
    /// Answers returned but different from the oracle.
    pub wrong: u64,
    pub misses: u64,
    pub backup_exhaustions: u64,
    /// Queries refused because the epoch budget ran out.
    pub budget_refusals: u64,
    /// Query frames, headers included.
    pub upload_bytes: u64,
    /// Answer frames, headers included.
    pub download_bytes: u64,
    /// Hello, key and chunk frames of the offline phase.
    pub offline_bytes: u64,
    pub upload_bytes_per_query: Vec<u64>,
    pub download_bytes_per_query: Vec<u64>,
    pub latency_us: Vec<u64>,
    pub per_epoch: Vec<EpochTally>,
}

impl EpochTally {
    fn count(&mut self, outcome: Outcome) {
        self.queries += 1;
        match outcome {
            Outcome::Correct => self.correct += 1,
            Outcome::Wrong => self.wrong += 1,
            Outcome::Miss => self.misses += 1,
            Outcome::Exhausted => self.backup_exhaustions += 1,
        }
    }
}

impl SimReport {
    fn count(&mut self, outcome: Outcome) {
        self.total_queries += 1;
        match outcome {
            Outcome::Correct => self.correct += 1,
            Outcome::Wrong => self.wrong += 1,
            Outcome::Miss => self.misses += 1,
            Outcome::Exhausted => self.backup_exhaustions += 1,
        }
    }

    pub fn correctness_rate(&self) -> f64 {
        if self.total_queries == 0 {
            return 1.0;
        }
        self.correct as f64 / self.total_queries as f64
    }

    pub fn median_latency_us(&self) -> Option<u64> {
        let mut sorted = self.latency_us.clone();
        sorted.sort_unstable();
        sorted.get(sorted.len() / 2).copied()
    }

    fn tally(&mut self, epoch: u64) -> &mut EpochTally {
        if let Some(pos) = self.per_epoch.iter().position(|t| t.epoch == epoch) {
            return &mut self.per_epoch[pos];
        }
        self.per_epoch.push(EpochTally { epoch, ..Default::default() });
        self.per_epoch.last_mut().unwrap()
    }

    pub fn render_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "seeds {} x {} queries: {} correct, {} wrong, {} misses, {} backup exhaustions, {} refused\n",
            self.seeds_run,
            self.queries_per_seed,
            self.correct,
            self.wrong,
            self.misses,
            self.backup_exhaustions,
            self.budget_refusals
        ));
        out.push_str(&format!("correctness rate {:.5}\n", self.correctness_rate()));
        if let (Some(up), Some(down)) = (
            self.upload_bytes.checked_div(self.total_queries),
            self.download_bytes.checked_div(self.total_queries),
        ) {
            out.push_str(&format!(
                "bytes/query: upload {up} download {down}  (offline {} total)\n",
                self.offline_bytes
            ));
        }
        if let Some(median) = self.median_latency_us() {
            out.push_str(&format!("median client-observed latency {median} us\n"));
        }
        for t in &self.per_epoch {
            out.push_str(&format!(
                "  epoch {}: {} queries, {} correct, {} misses, {} exhaustions\n",
                t.epoch, t.queries, t.correct, t.misses, t.backup_exhaustions
            ));
        }
        out
    }
}

/// Runs the full offline and online protocol per seed over an in-process
/// transport and checks every answer against [`naive_pir`]. Queries within
/// a run are distinct and uniform.
pub fn simulate(params: &SimParams) -> SimReport {
    let geometry = Geometry::for_entries(params.n).expect("n must be a power of four");
    let mut report = SimReport { queries_per_seed: params.queries_per_seed, ..Default::default() };

    for run in 0..params.seeds {
        let seed = params.base_seed.wrapping_add(run);
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let db = Arc::new(Database::random(geometry, params.entry_size, &mut rng));
        let server = Arc::new(Server::new(db.clone(), params.pipeline, &mut rng));
        let config = ClientConfig {
            c1: params.c1,
            c2: params.c2,
            pipeline: params.pipeline,
            seed: seed ^ 0x9e37_79b9_7f4a_7c15,
        };
        let mut client = Client::connect(LocalTransport::connect(server), config)
            .expect("in-process offline phase cannot fail");
        report.seeds_run += 1;
        report.offline_bytes += client.transport().traffic().bytes(Direction::Download) as u64;

        let count = params.queries_per_seed.min(params.n as usize);
        for target in index::sample(&mut rng, params.n as usize, count).into_iter() {
            let target = target as u64;
            let epoch = client.state().epoch();
            let started = Instant::now();
            let result = client.query(target);
            let elapsed = started.elapsed().as_micros() as u64;
            if matches!(result, Err(ClientError::EpochExhausted)) {
                report.budget_refusals += 1;
                continue;
            }
            report.latency_us.push(elapsed);
            let traffic = client.transport().traffic();
            let mut frames = traffic.records.iter().rev();
            let down = frames.next().expect("answer frame");
            let up = frames.next().expect("query frame");
            debug_assert_eq!((up.msg_type, down.msg_type), (MsgType::Query, MsgType::Answer));
            let up_bytes = (up.payload_len + FRAME_HEADER_BYTES) as u64;
            let down_bytes = (down.payload_len + FRAME_HEADER_BYTES) as u64;
            report.upload_bytes += up_bytes;
            report.download_bytes += down_bytes;
            report.upload_bytes_per_query.push(up_bytes);
            report.download_bytes_per_query.push(down_bytes);

            let expected = naive_pir(&db, target).expect("sampled in range");
            let outcome = match result {
                Ok(block) if block == expected => Outcome::Correct,
                Ok(_) => Outcome::Wrong,
                Err(ClientError::QueryFailed { .. }) => Outcome::Miss,
                Err(ClientError::BackupExhausted { .. }) => Outcome::Exhausted,
                Err(e) => panic!("in-process query failed unexpectedly: {e}"),
            };
            report.count(outcome);
            report.tally(epoch).count(outcome);
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ggm::{puncture, Seed};
    use crate::server::{answer, answer_payload_len, query_payload_len};

    #[test]
    fn naive_pir_reads_entries() {
        let db = Database::zeroed(Geometry::new(2), 4);
        assert_eq!(naive_pir(&db, 9).unwrap(), vec![0; 4]);
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let db = Database::random(Geometry::new(3), 4, &mut rng);
        assert_eq!(naive_pir(&db, 0).unwrap(), db.data()[..4].to_vec());
        for i in 0..64 {
            assert_eq!(naive_pir(&db, i).unwrap(), db.parity(&[i]).unwrap());
        }
        assert!(naive_pir(&db, 64).is_err());
    }

    #[test]
    fn naive_answer_agrees_with_server() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let db = Database::random(Geometry::new(3), 4, &mut rng);
        for c in 0..8 {
            let pk = puncture(&Seed::random(&mut rng), &TreePath::new(c, 3));
            assert_eq!(naive_answer(&db, &pk), answer(&db, &pk).unwrap());
        }
    }

    #[test]
    fn small_simulation_is_correct_and_accounts_bytes() {
        let params = SimParams { n: 256, entry_size: 8, seeds: 5, queries_per_seed: 8, ..Default::default() };
        let report = simulate(&params);
        assert_eq!(report.total_queries, 40);
        assert!(report.correct + report.misses <= report.total_queries);
        assert_eq!(report.wrong, 0);
        assert!(report.correct >= 38, "{}", report.render_text());
        let up = (query_payload_len(4) + FRAME_HEADER_BYTES) as u64;
        let down = (answer_payload_len(4, 8) + FRAME_HEADER_BYTES) as u64;
        assert!(report.upload_bytes_per_query.iter().all(|&b| b == up));
        assert!(report.download_bytes_per_query.iter().all(|&b| b == down));
        assert_eq!(report.download_bytes, 40 * down);
        let json = serde_json::to_string(&report).unwrap();
        assert!(json.contains("\"backup_exhaustions\":0"));
    }

    #[test]
    fn budget_refusals_without_pipeline() {
        let params = SimParams { n: 64, entry_size: 1, seeds: 1, queries_per_seed: 6, ..Default::default() };
        let report = simulate(&params);
        assert_eq!(report.total_queries, 4);
        assert_eq!(report.budget_refusals, 2);
    }
}

//! Stateful PIR client.
//!
//! The client keeps a primary table of `c1·√n` hints and, per chunk, a
//! group of `c2` backup hints. A hint is a GGM key whose tree selects one
//! entry per chunk, together with the XOR of those entries. To fetch index
//! `x` the client finds a primary hint whose tree hits `x`, punctures the
//! key at `x`'s chunk and sends it; the server's parity for the punctured
//! tree, XORed with the stored parity, is `DB[x]`.
//!
//! A used hint is replaced by a backup hint from `x`'s chunk carrying the
//! positive constraint `+x`. When such a promoted hint is used later, its
//! punctured key is resampled so the server-side tree really contains `x`,
//! and the backup's subtree parities (γ) correct for the swapped subtree.

use std::collections::{HashMap, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use thiserror::Error;

use crate::database::{permute_index, xor_into, DbIndex, Geometry, PrpKey};
use crate::ggm::{
    default_max_attempts, eval_path, leaf_offset, puncture, resample, GgmError, IndexConstraint,
    LeafOffset, PuncturedKey, Seed, TreePath,
};
use crate::server::ParityMatrix;
use crate::wire::{
    decode_answer, decode_chunk_stream, decode_hello, decode_prp, encode_query, AnswerPayload,
    ChunkPayload, Transport, WireError,
};

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("no primary hint contains index {index}")]
    QueryFailed { index: u64 },
    #[error("backup group for chunk {chunk} is exhausted")]
    BackupExhausted { chunk: u32 },
    #[error("chunk {chunk} was already ingested")]
    DuplicateChunk { chunk: u32 },
    #[error("chunk {chunk} has {got} bytes, expected {expected}")]
    ChunkLength { chunk: u32, expected: usize, got: usize },
    #[error("epoch query budget is used up")]
    EpochExhausted,
    #[error("hint tables are still being built")]
    NotReady,
    #[error("index {index} out of range for {n} entries")]
    IndexOutOfRange { index: u64, n: u64 },
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error(transparent)]
    Resample(#[from] GgmError),
    #[error(transparent)]
    Wire(#[from] WireError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClientConfig {
    /// Primary table size is `c1·√n`.
    pub c1: usize,
    /// Backup hints per chunk.
    pub c2: usize,
    /// Build next-epoch tables from chunks attached to answers.
    pub pipeline: bool,
    /// Seeds all client randomness.
    pub seed: u64,
}

impl Default for ClientConfig {
    fn default() -> Self {
        Self { c1: 8, c2: 24, pipeline: false, seed: 0 }
    }
}

fn entry_in_chunk(chunk_bytes: &[u8], offset: LeafOffset, entry_size: usize) -> &[u8] {
    let start = offset.0 as usize * entry_size;
    &chunk_bytes[start..start + entry_size]
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PrimaryHint {
    pub sk: Seed,
    pub parity: Vec<u8>,
    pub positive: Option<IndexConstraint>,
    /// Subtree parities along the positive constraint's path; empty unless
    /// promoted from a backup group.
    pub gammas: Vec<Vec<u8>>,
    /// Used but could not be replaced; never matched again.
    pub consumed: bool,
}

impl PrimaryHint {
    pub fn new(sk: Seed, entry_size: usize) -> Self {
        Self { sk, parity: vec![0u8; entry_size], positive: None, gammas: Vec::new(), consumed: false }
    }

    pub fn offset_in(&self, chunk: &TreePath) -> LeafOffset {
        leaf_offset(&eval_path(&self.sk, chunk), chunk.len())
    }

    pub fn absorb_chunk(&mut self, chunk: &TreePath, chunk_bytes: &[u8]) {
        let entry_size = self.parity.len();
        let offset = self.offset_in(chunk);
        xor_into(&mut self.parity, entry_in_chunk(chunk_bytes, offset, entry_size));
    }
}

/// Backup hint of one chunk's group. `gammas[i-1]` is the parity of the
/// level-`i` subtree on the path to that chunk.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackupHint {
    pub sk: Seed,
    pub parity: Vec<u8>,
    pub gammas: Vec<Vec<u8>>,
}

impl BackupHint {
    pub fn new(sk: Seed, levels: u32, entry_size: usize) -> Self {
        Self {
            sk,
            parity: vec![0u8; entry_size],
            gammas: vec![vec![0u8; entry_size]; levels as usize],
        }
    }

    pub fn absorb_chunk(&mut self, group: &TreePath, chunk: &TreePath, chunk_bytes: &[u8]) {
        let entry_size = self.parity.len();
        let offset = leaf_offset(&eval_path(&self.sk, chunk), chunk.len());
        let entry = entry_in_chunk(chunk_bytes, offset, entry_size);
        xor_into(&mut self.parity, entry);
        let shared = group.common_prefix_len(chunk) as usize;
        for gamma in &mut self.gammas[..shared] {
            xor_into(gamma, entry);
        }
    }

    pub fn promote(self, positive: IndexConstraint) -> PrimaryHint {
        PrimaryHint {
            sk: self.sk,
            parity: self.parity,
            positive: Some(positive),
            gammas: self.gammas,
            consumed: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BackupGroup {
    pub hints: Vec<BackupHint>,
    pub cursor: usize,
}

impl BackupGroup {
    pub fn remaining(&self) -> usize {
        self.hints.len() - self.cursor
    }
}

/// One generation of primary and backup tables.
#[derive(Debug, Clone)]
pub struct HintTables {
    geometry: Geometry,
    entry_size: usize,
    primary: Vec<PrimaryHint>,
    backups: Vec<BackupGroup>,
    received: Vec<bool>,
    missing: usize,
}

impl HintTables {
    pub fn generate<R: Rng + ?Sized>(
        geometry: Geometry,
        entry_size: usize,
        c1: usize,
        c2: usize,
        rng: &mut R,
    ) -> Self {
        let sqrt_n = geometry.sqrt_n() as usize;
        let primary = (0..c1 * sqrt_n).map(|_| PrimaryHint::new(Seed::random(rng), entry_size)).collect();
        let backups = (0..sqrt_n)
            .map(|_| BackupGroup {
                hints: (0..c2)
                    .map(|_| BackupHint::new(Seed::random(rng), geometry.levels(), entry_size))
                    .collect(),
                cursor: 0,
            })
            .collect();
        Self { geometry, entry_size, primary, backups, received: vec![false; sqrt_n], missing: sqrt_n }
    }

    /// Folds one streamed chunk into every parity and γ.
    pub fn ingest_chunk(&mut self, chunk_id: u32, chunk_bytes: &[u8]) -> Result<(), ClientError> {
        let sqrt_n = self.geometry.sqrt_n();
        if chunk_id >= sqrt_n {
            return Err(ClientError::Protocol(format!("chunk id {chunk_id} out of range")));
        }
        let expected = sqrt_n as usize * self.entry_size;
        if chunk_bytes.len() != expected {
            return Err(ClientError::ChunkLength { chunk: chunk_id, expected, got: chunk_bytes.len() });
        }
        if std::mem::replace(&mut self.received[chunk_id as usize], true) {
            return Err(ClientError::DuplicateChunk { chunk: chunk_id });
        }
        self.missing -= 1;

        let chunk = self.geometry.chunk_path(chunk_id);
        for hint in &mut self.primary {
            hint.absorb_chunk(&chunk, chunk_bytes);
        }
        for (group_id, group) in self.backups.iter_mut().enumerate() {
            let group_path = self.geometry.chunk_path(group_id as u32);
            for hint in &mut group.hints {
                hint.absorb_chunk(&group_path, &chunk, chunk_bytes);
            }
        }
        Ok(())
    }

    pub fn is_complete(&self) -> bool {
        self.missing == 0
    }

    pub fn has_chunk(&self, chunk_id: u32) -> bool {
        self.received[chunk_id as usize]
    }

    pub fn primary(&self) -> &[PrimaryHint] {
        &self.primary
    }

    pub fn backup_group(&self, chunk: u32) -> &BackupGroup {
        &self.backups[chunk as usize]
    }
}

/// Negative constraints kept implicitly: `(x, p)` means every primary hint
/// before position `p` must not produce `x`.
#[derive(Debug, Clone, Default)]
pub struct NegativeLedger {
    entries: Vec<(DbIndex, usize)>,
}

impl NegativeLedger {
    pub fn push(&mut self, index: DbIndex, before_position: usize) {
        self.entries.push((index, before_position));
    }

    pub fn entries(&self) -> &[(DbIndex, usize)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Constraints binding the hint at `position` inside `subtree`.
    pub fn applicable(&self, position: usize, subtree: &TreePath) -> Vec<IndexConstraint> {
        self.entries
            .iter()
            .filter(|(z, before)| *before > position && subtree.is_prefix_of(&z.chunk_path()))
            .map(|(z, _)| IndexConstraint::negative(z.chunk(), z.offset()))
            .collect()
    }

    fn clear(&mut self) {
        self.entries.clear();
    }
}

/// Answers of recent queries, keyed by the caller's index; FIFO eviction.
#[derive(Debug, Clone)]
pub struct DedupCache {
    capacity: usize,
    answers: HashMap<u64, Vec<u8>>,
    order: VecDeque<u64>,
}

impl DedupCache {
    pub fn new(capacity: usize) -> Self {
        Self { capacity, answers: HashMap::new(), order: VecDeque::new() }
    }

    pub fn get(&self, index: u64) -> Option<&Vec<u8>> {
        self.answers.get(&index)
    }

    pub fn insert(&mut self, index: u64, block: Vec<u8>) {
        if self.capacity == 0 || self.answers.contains_key(&index) {
            return;
        }
        if self.order.len() == self.capacity {
            let oldest = self.order.pop_front().expect("non-empty");
            self.answers.remove(&oldest);
        }
        self.order.push_back(index);
        self.answers.insert(index, block);
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }
}

/// `DB[x]` from a parity matrix and the hint used for `x`.
///
/// For a promoted hint the server expanded a resampled subtree at level
/// `h = LCP(x, y) + 1`; `γ_h ⊕ β_h` swaps the original subtree back in.
pub fn reconstruct(hint: &PrimaryHint, x: DbIndex, matrix: &ParityMatrix) -> Vec<u8> {
    let column = x.chunk();
    let mut block = hint.parity.clone();
    xor_into(&mut block, matrix.cell(0, column));
    if let Some(y) = hint.positive {
        let levels = matrix.levels();
        let h = x.chunk_path().common_prefix_len(&y.chunk_path(levels)) + 1;
        xor_into(&mut block, &hint.gammas[h as usize - 1]);
        xor_into(&mut block, matrix.cell(h, column));
    }
    block
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Target {
    /// A real lookup of the caller's index.
    Fresh(u64),
    /// A repeated index answered from cache; the wire query is a decoy.
    Cached(Vec<u8>),
}

/// A query whose punctured key has been built but not yet answered.
#[derive(Debug, Clone)]
pub struct PendingQuery {
    target: Target,
    index: DbIndex,
    position: Option<usize>,
    key: PuncturedKey,
}

impl PendingQuery {
    pub fn key(&self) -> &PuncturedKey {
        &self.key
    }

    /// The (permuted) index actually looked up on the wire.
    pub fn index(&self) -> DbIndex {
        self.index
    }

    pub fn position(&self) -> Option<usize> {
        self.position
    }

    pub fn is_decoy(&self) -> bool {
        matches!(self.target, Target::Cached(_))
    }
}

/// Everything the client keeps between queries.
#[derive(Debug, Clone)]
pub struct ClientState {
    geometry: Geometry,
    entry_size: usize,
    config: ClientConfig,
    prp: PrpKey,
    rng: ChaCha20Rng,
    epoch: u64,
    tables: HintTables,
    next: Option<HintTables>,
    ledger: NegativeLedger,
    cache: DedupCache,
    queries_served: usize,
    wire_queries: u64,
}

impl ClientState {
    pub fn new(geometry: Geometry, entry_size: usize, prp: PrpKey, config: ClientConfig) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(config.seed);
        let tables = HintTables::generate(geometry, entry_size, config.c1, config.c2, &mut rng);
        let next = config
            .pipeline
            .then(|| HintTables::generate(geometry, entry_size, config.c1, config.c2, &mut rng));
        Self {
            geometry,
            entry_size,
            config,
            prp,
            rng,
            epoch: 0,
            tables,
            next,
            ledger: NegativeLedger::default(),
            cache: DedupCache::new(geometry.epoch_queries()),
            queries_served: 0,
            wire_queries: 0,
        }
    }

    pub fn geometry(&self) -> Geometry {
        self.geometry
    }

    pub fn entry_size(&self) -> usize {
        self.entry_size
    }

    pub fn config(&self) -> &ClientConfig {
        &self.config
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn queries_served(&self) -> usize {
        self.queries_served
    }

    /// Queries sent over the lifetime of the client, decoys included.
    pub fn wire_queries(&self) -> u64 {
        self.wire_queries
    }

    pub fn tables(&self) -> &HintTables {
        &self.tables
    }

    pub fn next_tables(&self) -> Option<&HintTables> {
        self.next.as_ref()
    }

    pub fn ledger(&self) -> &NegativeLedger {
        &self.ledger
    }

    pub fn cache(&self) -> &DedupCache {
        &self.cache
    }

    /// Offline preprocessing: feeds a chunk to the current tables.
    pub fn ingest_chunk(&mut self, chunk_id: u32, chunk_bytes: &[u8]) -> Result<(), ClientError> {
        self.tables.ingest_chunk(chunk_id, chunk_bytes)
    }

    /// First usable primary hint whose tree hits `x`.
    ///
    /// Hints whose positive constraint sits in `x`'s chunk are skipped.
    pub fn find_hint(&self, x: DbIndex) -> Option<usize> {
        let chunk = x.chunk_path();
        self.tables.primary.iter().position(|hint| {
            !hint.consumed
                && hint.positive.is_none_or(|y| y.chunk != x.chunk())
                && hint.offset_in(&chunk).0 == x.offset()
        })
    }

    /// Punctures the matched hint at `x`'s chunk, resampling if it carries
    /// a positive constraint.
    pub fn build_query(&mut self, x: DbIndex, position: usize) -> Result<PuncturedKey, ClientError> {
        let hint = &self.tables.primary[position];
        let at = x.chunk_path();
        let key = puncture(&hint.sk, &at);
        let Some(positive) = hint.positive else {
            return Ok(key);
        };
        let levels = self.geometry.levels();
        let level = at.common_prefix_len(&positive.chunk_path(levels)) + 1;
        let negatives = self.ledger.applicable(position, &at.placement(level));
        let attempts = default_max_attempts(levels, negatives.len());
        Ok(resample(&key, &at, &positive, &negatives, levels, attempts, &mut self.rng)?)
    }

    /// Replaces the hint used for `x` with the next backup of `x`'s chunk,
    /// marked `+x`, and records `−x` for every earlier hint.
    pub fn refresh(&mut self, x: DbIndex, position: usize) -> Result<(), ClientError> {
        self.ledger.push(x, position);
        let group = &mut self.tables.backups[x.chunk() as usize];
        if group.cursor == group.hints.len() {
            self.tables.primary[position].consumed = true;
            return Err(ClientError::BackupExhausted { chunk: x.chunk() });
        }
        let backup = group.hints[group.cursor].clone();
        group.cursor += 1;
        self.tables.primary[position] =
            backup.promote(IndexConstraint::positive(x.chunk(), x.offset()));
        Ok(())
    }

    pub fn prepare_query(&mut self, index: u64) -> Result<PendingQuery, ClientError> {
        if !self.tables.is_complete() {
            return Err(ClientError::NotReady);
        }
        if self.queries_served >= self.geometry.epoch_queries() {
            return Err(ClientError::EpochExhausted);
        }
        let n = self.geometry.n();
        if index >= n {
            return Err(ClientError::IndexOutOfRange { index, n });
        }
        let (target, x) = match self.cache.get(index) {
            Some(block) => {
                let decoy = self.geometry.index(self.rng.random_range(0..n));
                (Target::Cached(block.clone()), decoy)
            }
            None => (Target::Fresh(index), permute_index(&self.prp, self.geometry.index(index))),
        };
        let position = self.find_hint(x);
        let key = match position {
            Some(p) => self.build_query(x, p)?,
            None => puncture(&Seed::random(&mut self.rng), &x.chunk_path()),
        };
        Ok(PendingQuery { target, index: x, position, key })
    }

    pub fn finish_query(
        &mut self,
        pending: PendingQuery,
        answer: AnswerPayload,
    ) -> Result<Vec<u8>, ClientError> {
        let matrix = &answer.matrix;
        if matrix.levels() != self.geometry.levels() || matrix.entry_size() != self.entry_size {
            return Err(ClientError::Protocol("answer matrix has the wrong shape".into()));
        }
        let x = pending.index;
        let outcome = match pending.position {
            Some(p) => {
                let block = reconstruct(&self.tables.primary[p], x, matrix);
                self.refresh(x, p).map(|()| block)
            }
            None => {
                self.ledger.push(x, self.tables.primary.len());
                Err(ClientError::QueryFailed { index: x.value() })
            }
        };
        self.queries_served += 1;
        self.wire_queries += 1;
        self.epoch_tick(&answer.chunks)?;

        match pending.target {
            Target::Cached(block) => Ok(block),
            Target::Fresh(index) => match outcome {
                Ok(block) => {
                    self.cache.insert(index, block.clone());
                    Ok(block)
                }
                Err(ClientError::QueryFailed { .. }) => Err(ClientError::QueryFailed { index }),
                Err(e) => Err(e),
            },
        }
    }

    /// Feeds chunks piggybacked on an answer to the next-epoch tables and
    /// swaps tables once the epoch budget is spent and the build is done.
    pub fn epoch_tick(&mut self, chunks: &[ChunkPayload]) -> Result<(), ClientError> {
        let Some(next) = self.next.as_mut() else {
            return Ok(());
        };
        for chunk in chunks {
            next.ingest_chunk(chunk.chunk_id, &chunk.bytes)?;
        }
        if self.queries_served >= self.geometry.epoch_queries() && next.is_complete() {
            let fresh = HintTables::generate(
                self.geometry,
                self.entry_size,
                self.config.c1,
                self.config.c2,
                &mut self.rng,
            );
            self.tables = std::mem::replace(next, fresh);
            self.queries_served = 0;
            self.ledger.clear();
            self.epoch += 1;
        }
        Ok(())
    }
}

/// A client bound to a transport.
pub struct Client<T> {
    state: ClientState,
    transport: T,
}

impl<T: Transport> Client<T> {
    /// Runs the offline phase: reads the server's hello, PRP key and the
    /// full chunk stream, building the first tables.
    pub fn connect(mut transport: T, config: ClientConfig) -> Result<Self, ClientError> {
        let hello = decode_hello(&transport.recv()?)?;
        let geometry = Geometry::for_entries(hello.n as u64)
            .filter(|g| g.levels() == hello.levels as u32)
            .ok_or_else(|| ClientError::Protocol(format!("inconsistent hello {hello:?}")))?;
        if hello.entry_size == 0 {
            return Err(ClientError::Protocol("zero entry size".into()));
        }
        let prp = decode_prp(&transport.recv()?)?;
        let mut state = ClientState::new(geometry, hello.entry_size as usize, prp, config);
        for _ in 0..geometry.sqrt_n() {
            let chunk = decode_chunk_stream(&transport.recv()?)?;
            state.ingest_chunk(chunk.chunk_id, &chunk.bytes)?;
        }
        Ok(Self { state, transport })
    }

    pub fn query(&mut self, index: u64) -> Result<Vec<u8>, ClientError> {
        let pending = self.state.prepare_query(index)?;
        self.transport.send(&encode_query(pending.key()))?;
        let answer = decode_answer(&self.transport.recv()?)?;
        self.state.finish_query(pending, answer)
    }

    pub fn state(&self) -> &ClientState {
        &self.state
    }

    pub fn transport(&self) -> &T {
        &self.transport
    }

    pub fn transport_mut(&mut self) -> &mut T {
        &mut self.transport
    }
}

//! Stateless query answering.
//!
//! For a punctured key the server does not know where the puncture is, so
//! it answers for every candidate chunk `c`: cell `(i, c)` holds the parity
//! of the subtree grown by subkey `i` placed at `c`'s level-`i` sibling,
//! and row 0 XORs the column together.

use std::collections::VecDeque;
use std::sync::Arc;

use rand::Rng;
use thiserror::Error;

use crate::database::{xor_into, Database, PrpKey};
use crate::ggm::{expand_leaves, leaf_offset, PuncturedKey, SEED_BYTES};
use crate::wire::{
    self, decode_query, encode_answer, encode_chunk_stream, encode_error, encode_hello,
    encode_prp, error_code, AnswerPayload, ChunkPayload, Direction, Frame, Hello, MsgType,
    TrafficLog, Transport, WireError,
};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ServerError {
    #[error("punctured key has {got} subkeys, database needs {expected}")]
    MalformedKey { expected: u32, got: u32 },
}

/// `(t+1) × √n` grid of parity blocks, stored row-major.
#[derive(Clone, PartialEq, Eq)]
pub struct ParityMatrix {
    levels: u32,
    entry_size: usize,
    data: Vec<u8>,
}

impl std::fmt::Debug for ParityMatrix {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ParityMatrix")
            .field("rows", &self.rows())
            .field("columns", &self.columns())
            .field("entry_size", &self.entry_size)
            .finish()
    }
}

impl ParityMatrix {
    pub fn zeroed(levels: u32, entry_size: usize) -> Self {
        let cells = (levels as usize + 1) << levels;
        Self { levels, entry_size, data: vec![0u8; cells * entry_size] }
    }

    pub fn from_bytes(levels: u32, entry_size: usize, data: Vec<u8>) -> Option<Self> {
        let cells = (levels as usize + 1) << levels;
        (data.len() == cells * entry_size).then_some(Self { levels, entry_size, data })
    }

    pub fn levels(&self) -> u32 {
        self.levels
    }

    pub fn rows(&self) -> u32 {
        self.levels + 1
    }

    pub fn columns(&self) -> u32 {
        1 << self.levels
    }

    pub fn entry_size(&self) -> usize {
        self.entry_size
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.data
    }

    fn cell_start(&self, row: u32, column: u32) -> usize {
        assert!(row <= self.levels && column < self.columns());
        ((row as usize) * self.columns() as usize + column as usize) * self.entry_size
    }

    pub fn cell(&self, row: u32, column: u32) -> &[u8] {
        let start = self.cell_start(row, column);
        &self.data[start..start + self.entry_size]
    }

    pub fn cell_mut(&mut self, row: u32, column: u32) -> &mut [u8] {
        let start = self.cell_start(row, column);
        &mut self.data[start..start + self.entry_size]
    }
}

/// Computes the parity matrix for `key`.
///
/// A subkey's leaf seeds do not depend on where it is placed, so each
/// subkey is expanded once. Its `2^i` placements at level `i` only change
/// which chunks the leaves address; each placement parity is computed once
/// and shared by the `√n / 2^i` candidate columns that use it.
pub fn answer(db: &Database, key: &PuncturedKey) -> Result<ParityMatrix, ServerError> {
    let geometry = db.geometry();
    let levels = geometry.levels();
    if key.levels() != levels {
        return Err(ServerError::MalformedKey { expected: levels, got: key.levels() });
    }
    let b = db.entry_size();
    let mut matrix = ParityMatrix::zeroed(levels, b);
    let mut placement_parity = Vec::new();

    for level in 1..=levels {
        let depth = levels - level;
        let offsets: Vec<u32> = expand_leaves(key.subkey(level), depth)
            .iter()
            .map(|leaf| leaf_offset(leaf, levels).0)
            .collect();

        let placements = 1u32 << level;
        placement_parity.clear();
        placement_parity.resize(placements as usize * b, 0);
        for (prefix, acc) in placement_parity.chunks_exact_mut(b).enumerate() {
            let base = (prefix as u32) << depth;
            for (x, &offset) in offsets.iter().enumerate() {
                xor_into(acc, db.entry_at(base | x as u32, offset));
            }
        }

        for column in 0..geometry.sqrt_n() {
            // level-`level` prefix of the column with its last bit flipped
            let placement = (column >> depth) ^ 1;
            let start = placement as usize * b;
            matrix.cell_mut(level, column).copy_from_slice(&placement_parity[start..start + b]);
        }
    }

    for column in 0..geometry.sqrt_n() {
        let mut total = vec![0u8; b];
        for level in 1..=levels {
            xor_into(&mut total, matrix.cell(level, column));
        }
        matrix.cell_mut(0, column).copy_from_slice(&total);
    }
    Ok(matrix)
}

/// Public server state: the database, its published PRP key and the
/// shuffled layout actually served.
#[derive(Debug)]
pub struct Server {
    logical: Arc<Database>,
    db: Database,
    prp: PrpKey,
    pipeline: bool,
}

impl Server {
    pub fn new<R: Rng + ?Sized>(db: Arc<Database>, pipeline: bool, rng: &mut R) -> Self {
        Self::with_prp(db, PrpKey::random(rng), pipeline)
    }

    pub fn with_prp(db: Arc<Database>, prp: PrpKey, pipeline: bool) -> Self {
        Self { db: db.shuffled(&prp), logical: db, prp, pipeline }
    }

    /// The database in its original index order.
    pub fn database(&self) -> &Arc<Database> {
        &self.logical
    }

    /// The layout chunks and answers are computed over.
    pub fn shuffled(&self) -> &Database {
        &self.db
    }

    pub fn publish_prp(&self) -> PrpKey {
        self.prp
    }

    pub fn pipeline(&self) -> bool {
        self.pipeline
    }

    pub fn hello(&self) -> Hello {
        Hello {
            n: self.db.n() as u32,
            entry_size: self.db.entry_size() as u32,
            levels: self.db.geometry().levels() as u8,
        }
    }

    /// Chunks `0..√n` in order, for client preprocessing.
    pub fn offline_stream(&self) -> impl Iterator<Item = ChunkPayload> + '_ {
        (0..self.db.geometry().sqrt_n()).map(move |chunk_id| self.chunk(chunk_id))
    }

    fn chunk(&self, chunk_id: u32) -> ChunkPayload {
        ChunkPayload {
            chunk_id,
            bytes: self.db.chunk_bytes(chunk_id).expect("chunk id in range").to_vec(),
        }
    }
}

/// Per-connection protocol state: only the pipelining cursor.
///
/// On open the server sends `Hello`, `PrpKey` and every chunk; afterwards
/// each `Query` gets one `Answer`. With pipelining, the k-th answer of the
/// session carries chunks `2k` and `2k+1` (mod √n).
#[derive(Debug)]
pub struct ServerSession {
    server: Arc<Server>,
    answers_sent: u64,
}

impl ServerSession {
    pub fn new(server: Arc<Server>) -> Self {
        Self { server, answers_sent: 0 }
    }

    pub fn open(&self) -> Vec<Frame> {
        let mut frames = vec![encode_hello(&self.server.hello()), encode_prp(&self.server.prp)];
        frames.extend(self.server.offline_stream().map(|c| encode_chunk_stream(&c)));
        frames
    }

    /// Reply to one client frame.
    pub fn handle(&mut self, frame: &Frame) -> Frame {
        if frame.msg_type != MsgType::Query {
            return encode_error(error_code::UNEXPECTED_MESSAGE);
        }
        let key = match decode_query(frame) {
            Ok(key) => key,
            Err(_) => return encode_error(error_code::MALFORMED_FRAME),
        };
        let matrix = match answer(&self.server.db, &key) {
            Ok(m) => m,
            Err(ServerError::MalformedKey { .. }) => return encode_error(error_code::MALFORMED_KEY),
        };
        let chunks = if self.server.pipeline {
            let sqrt_n = self.server.db.geometry().sqrt_n() as u64;
            let first = (2 * self.answers_sent) % sqrt_n;
            vec![self.server.chunk(first as u32), self.server.chunk((first + 1) as u32)]
        } else {
            Vec::new()
        };
        self.answers_sent += 1;
        encode_answer(&AnswerPayload { matrix, chunks })
    }

    /// Drives a session over a byte stream until the peer disconnects.
    pub fn serve<S: std::io::Read + std::io::Write>(mut self, mut stream: S) -> Result<(), WireError> {
        for frame in self.open() {
            frame.write_to(&mut stream)?;
        }
        loop {
            let request = match Frame::read_from(&mut stream) {
                Ok(frame) => frame,
                Err(WireError::Closed) => return Ok(()),
                Err(WireError::MalformedFrame(_)) => {
                    encode_error(error_code::MALFORMED_FRAME).write_to(&mut stream)?;
                    return Ok(());
                }
                Err(e) => return Err(e),
            };
            // a client that rejects our hello says so and hangs up
            if request.msg_type == MsgType::Error {
                return Ok(());
            }
            self.handle(&request).write_to(&mut stream)?;
        }
    }
}

/// In-process transport: the server session runs inline on `send`.
pub struct LocalTransport {
    session: ServerSession,
    inbox: VecDeque<Frame>,
    traffic: TrafficLog,
}

impl LocalTransport {
    pub fn connect(server: Arc<Server>) -> Self {
        let session = ServerSession::new(server);
        let inbox = session.open().into();
        Self { session, inbox, traffic: TrafficLog::default() }
    }
}

impl Transport for LocalTransport {
    fn send(&mut self, frame: &Frame) -> Result<(), WireError> {
        self.traffic.record(Direction::Upload, frame);
        // serialize and reparse so the server only ever sees wire bytes
        let request = Frame::from_bytes(&frame.to_bytes())?;
        let reply = self.session.handle(&request);
        self.inbox.push_back(reply);
        Ok(())
    }

    fn recv(&mut self) -> Result<Frame, WireError> {
        let frame = self.inbox.pop_front().ok_or(WireError::Closed)?;
        self.traffic.record(Direction::Download, &frame);
        Ok(frame)
    }

    fn traffic(&self) -> &TrafficLog {
        &self.traffic
    }
}

/// Upload payload size of one query: `1 + t·16`.
pub fn query_payload_len(levels: u32) -> usize {
    1 + levels as usize * SEED_BYTES
}

/// Size of the matrix section of an answer: `(t+1)·√n·B`.
pub fn matrix_section_len(levels: u32, entry_size: usize) -> usize {
    ((levels as usize + 1) << levels) * entry_size
}

/// Answer payload without pipelined chunks.
pub fn answer_payload_len(levels: u32, entry_size: usize) -> usize {
    wire::ANSWER_FIXED_BYTES + matrix_section_len(levels, entry_size)
}

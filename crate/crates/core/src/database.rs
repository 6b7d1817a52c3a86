//! Chunked database, XOR parities and the public index shuffle.

use std::io::{self, Read, Write};

use rand::Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::ggm::TreePath;

pub const DB_MAGIC: &[u8; 4] = b"PIR1";
pub const DB_HEADER_BYTES: usize = 16;
pub const DEFAULT_ENTRY_SIZE: usize = 32;
pub const PRP_KEY_BYTES: usize = 16;
const FEISTEL_ROUNDS: u8 = 4;

#[derive(Debug, Error)]
pub enum DbError {
    #[error("index {index} out of range for {len} entries")]
    IndexOutOfRange { index: u64, len: u64 },
    #[error("entry size must be non-zero")]
    ZeroEntrySize,
    #[error("data length {got} does not match {expected} bytes")]
    DataLength { expected: usize, got: usize },
    #[error("bad database header: {0}")]
    BadHeader(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Shape of a database with `n = 4^levels` entries: `√n = 2^levels`
/// chunks of `√n` entries, and GGM trees of depth `levels`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Geometry {
    levels: u32,
}

impl Geometry {
    pub fn new(levels: u32) -> Self {
        assert!((1..=15).contains(&levels), "levels must be in 1..=15, got {levels}");
        Self { levels }
    }

    /// Smallest geometry holding at least `entries` entries.
    pub fn covering(entries: u64) -> Self {
        let mut levels = 1;
        while (1u64 << (2 * levels)) < entries {
            levels += 1;
        }
        Self::new(levels)
    }

    /// `None` unless `n` is a power of four.
    pub fn for_entries(n: u64) -> Option<Self> {
        let g = Self::covering(n.max(1));
        (g.n() == n).then_some(g)
    }

    pub fn levels(&self) -> u32 {
        self.levels
    }

    pub fn sqrt_n(&self) -> u32 {
        1 << self.levels
    }

    pub fn n(&self) -> u64 {
        1 << (2 * self.levels)
    }

    /// Queries per epoch, `√n/2`.
    pub fn epoch_queries(&self) -> usize {
        (self.sqrt_n() / 2) as usize
    }

    pub fn index(&self, value: u64) -> DbIndex {
        assert!(value < self.n(), "index {value} out of range");
        DbIndex { value, levels: self.levels }
    }

    pub fn index_of(&self, chunk: u32, offset: u32) -> DbIndex {
        assert!(chunk < self.sqrt_n() && offset < self.sqrt_n());
        DbIndex { value: ((chunk as u64) << self.levels) | offset as u64, levels: self.levels }
    }

    pub fn chunk_path(&self, chunk: u32) -> TreePath {
        TreePath::new(chunk, self.levels)
    }
}

/// A database position split into chunk (high half) and offset (low half).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct DbIndex {
    value: u64,
    levels: u32,
}

impl DbIndex {
    pub fn value(&self) -> u64 {
        self.value
    }

    pub fn chunk(&self) -> u32 {
        (self.value >> self.levels) as u32
    }

    pub fn offset(&self) -> u32 {
        (self.value & ((1u64 << self.levels) - 1)) as u32
    }

    pub fn chunk_path(&self) -> TreePath {
        TreePath::new(self.chunk(), self.levels)
    }
}

/// XORs `src` into `dst` bytewise.
#[inline]
pub fn xor_into(dst: &mut [u8], src: &[u8]) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, s) in dst.iter_mut().zip(src) {
        *d ^= s;
    }
}

/// Immutable table of `n` fixed-size entries.
#[derive(Clone, PartialEq, Eq)]
pub struct Database {
    geometry: Geometry,
    entry_size: usize,
    data: Vec<u8>,
}

impl std::fmt::Debug for Database {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Database")
            .field("n", &self.n())
            .field("entry_size", &self.entry_size)
            .finish()
    }
}

impl Database {
    /// Builds a database from `entries` records, zero-padding up to the
    /// next power of four.
    pub fn from_entries(entries: u64, entry_size: usize, mut data: Vec<u8>) -> Result<Self, DbError> {
        if entry_size == 0 {
            return Err(DbError::ZeroEntrySize);
        }
        let expected = entries as usize * entry_size;
        if data.len() != expected {
            return Err(DbError::DataLength { expected, got: data.len() });
        }
        let geometry = Geometry::covering(entries);
        data.resize(geometry.n() as usize * entry_size, 0);
        Ok(Self { geometry, entry_size, data })
    }

    pub fn random<R: Rng + ?Sized>(geometry: Geometry, entry_size: usize, rng: &mut R) -> Self {
        assert!(entry_size > 0);
        let mut data = vec![0u8; geometry.n() as usize * entry_size];
        rng.fill_bytes(&mut data);
        Self { geometry, entry_size, data }
    }

    pub fn zeroed(geometry: Geometry, entry_size: usize) -> Self {
        assert!(entry_size > 0);
        Self { geometry, entry_size, data: vec![0u8; geometry.n() as usize * entry_size] }
    }

    /// Physical layout under `key`: logical entry `i` moves to position
    /// `permute_index(key, i)`.
    pub fn shuffled(&self, key: &PrpKey) -> Self {
        let b = self.entry_size;
        let mut data = vec![0u8; self.data.len()];
        for (i, entry) in self.data.chunks_exact(b).enumerate() {
            let to = permute_index(key, self.geometry.index(i as u64)).value() as usize;
            data[to * b..(to + 1) * b].copy_from_slice(entry);
        }
        Self { geometry: self.geometry, entry_size: b, data }
    }

    pub fn geometry(&self) -> Geometry {
        self.geometry
    }

    pub fn n(&self) -> u64 {
        self.geometry.n()
    }

    pub fn entry_size(&self) -> usize {
        self.entry_size
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn entry(&self, index: u64) -> Result<&[u8], DbError> {
        if index >= self.n() {
            return Err(DbError::IndexOutOfRange { index, len: self.n() });
        }
        Ok(self.entry_unchecked(index))
    }

    #[inline]
    pub(crate) fn entry_unchecked(&self, index: u64) -> &[u8] {
        let start = index as usize * self.entry_size;
        &self.data[start..start + self.entry_size]
    }

    #[inline]
    pub fn entry_at(&self, chunk: u32, offset: u32) -> &[u8] {
        self.entry_unchecked(((chunk as u64) << self.geometry.levels()) | offset as u64)
    }

    /// XOR of the addressed entries; the empty list gives a zero block.
    pub fn parity(&self, indices: &[u64]) -> Result<Vec<u8>, DbError> {
        let mut acc = vec![0u8; self.entry_size];
        for &index in indices {
            xor_into(&mut acc, self.entry(index)?);
        }
        Ok(acc)
    }

    pub fn chunk_bytes(&self, chunk: u32) -> Result<&[u8], DbError> {
        let sqrt_n = self.geometry.sqrt_n();
        if chunk >= sqrt_n {
            return Err(DbError::IndexOutOfRange { index: chunk as u64, len: sqrt_n as u64 });
        }
        let width = sqrt_n as usize * self.entry_size;
        let start = chunk as usize * width;
        Ok(&self.data[start..start + width])
    }

    pub fn write_to<W: Write>(&self, mut out: W) -> Result<(), DbError> {
        let n = u32::try_from(self.n()).map_err(|_| DbError::BadHeader("n exceeds u32".into()))?;
        let b = u32::try_from(self.entry_size)
            .map_err(|_| DbError::BadHeader("entry size exceeds u32".into()))?;
        let mut header = [0u8; DB_HEADER_BYTES];
        header[..4].copy_from_slice(DB_MAGIC);
        header[4..8].copy_from_slice(&n.to_be_bytes());
        header[8..12].copy_from_slice(&b.to_be_bytes());
        out.write_all(&header)?;
        out.write_all(&self.data)?;
        Ok(())
    }

    /// Reads the `PIR1` file format; `n` need not be a power of four.
    pub fn read_from<R: Read>(mut input: R) -> Result<Self, DbError> {
        let mut header = [0u8; DB_HEADER_BYTES];
        input.read_exact(&mut header)?;
        if &header[..4] != DB_MAGIC {
            return Err(DbError::BadHeader("missing PIR1 magic".into()));
        }
        if header[12..] != [0u8; 4] {
            return Err(DbError::BadHeader("reserved bytes are not zero".into()));
        }
        let n = u32::from_be_bytes(header[4..8].try_into().unwrap()) as u64;
        let entry_size = u32::from_be_bytes(header[8..12].try_into().unwrap()) as usize;
        if n == 0 || n > 1 << 30 {
            return Err(DbError::BadHeader(format!("unsupported entry count {n}")));
        }
        if entry_size == 0 {
            return Err(DbError::ZeroEntrySize);
        }
        let mut data = vec![0u8; n as usize * entry_size];
        input.read_exact(&mut data)?;
        Self::from_entries(n, entry_size, data)
    }
}

/// Public key of the index shuffle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PrpKey(pub [u8; PRP_KEY_BYTES]);

impl PrpKey {
    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let mut key = [0u8; PRP_KEY_BYTES];
        rng.fill_bytes(&mut key);
        Self(key)
    }

    pub fn as_bytes(&self) -> &[u8; PRP_KEY_BYTES] {
        &self.0
    }

    fn round(&self, round: u8, half: u64, half_bits: u32) -> u64 {
        let mut h = Sha256::new();
        h.update(self.0);
        h.update([round]);
        h.update(half.to_be_bytes());
        let digest: [u8; 32] = h.finalize().into();
        u64::from_be_bytes(digest[24..].try_into().unwrap()) & ((1u64 << half_bits) - 1)
    }
}

/// Balanced four-round Feistel on the `2·levels` index bits.
pub fn permute_index(key: &PrpKey, index: DbIndex) -> DbIndex {
    let half = index.levels;
    let mask = (1u64 << half) - 1;
    let (mut left, mut right) = (index.value >> half, index.value & mask);
    for round in 0..FEISTEL_ROUNDS {
        let next = left ^ key.round(round, right, half);
        left = right;
        right = next;
    }
    DbIndex { value: (left << half) | right, levels: half }
}

pub fn unpermute_index(key: &PrpKey, index: DbIndex) -> DbIndex {
    let half = index.levels;
    let mask = (1u64 << half) - 1;
    let (mut left, mut right) = (index.value >> half, index.value & mask);
    for round in (0..FEISTEL_ROUNDS).rev() {
        let prev = right ^ key.round(round, left, half);
        right = left;
        left = prev;
    }
    DbIndex { value: (left << half) | right, levels: half }
}

//! GGM-tree puncturable PRF with constraint-driven resampling.
//!
//! A [`Seed`] is expanded into a binary tree with a length-doubling PRG
//! (SHA-256 split in halves). The tree has `levels` levels and one leaf per
//! database chunk; each leaf is reduced to an offset inside its chunk with
//! [`leaf_offset`]. Puncturing at a chunk yields the off-path siblings,
//! shallowest first, which regrow every leaf except the punctured one.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Seed length in bytes (λ = 128).
pub const SEED_BYTES: usize = 16;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GgmError {
    #[error("no seed satisfied the constraints after {attempts} attempts")]
    AttemptsExhausted { attempts: usize },
    #[error("positive constraint lies in the punctured chunk {chunk}")]
    ConstraintOnPuncturedChunk { chunk: u32 },
    #[error("punctured key has {got} subkeys, expected {expected}")]
    KeyLength { expected: u32, got: usize },
}

#[derive(Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct Seed([u8; SEED_BYTES]);

impl Seed {
    pub const fn from_bytes(bytes: [u8; SEED_BYTES]) -> Self {
        Self(bytes)
    }

    pub fn from_slice(bytes: &[u8]) -> Option<Self> {
        Some(Self(bytes.try_into().ok()?))
    }

    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let mut bytes = [0u8; SEED_BYTES];
        rng.fill_bytes(&mut bytes);
        Self(bytes)
    }

    pub fn as_bytes(&self) -> &[u8; SEED_BYTES] {
        &self.0
    }

    /// Left child G₀ (bit 0) or right child G₁ (bit 1).
    #[inline]
    pub fn child(&self, bit: bool) -> Seed {
        let (left, right) = prg_expand(self);
        if bit {
            right
        } else {
            left
        }
    }
}

impl fmt::Debug for Seed {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Seed(")?;
        for b in self.0 {
            write!(f, "{b:02x}")?;
        }
        write!(f, ")")
    }
}

/// A bit string of up to 32 bits, first bit most significant.
///
/// Chunk ids are `levels`-bit paths from the root; bit 0 selects the left
/// child.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct TreePath {
    len: u32,
    bits: u32,
}

impl TreePath {
    pub const MAX_LEN: u32 = 32;

    pub const fn empty() -> Self {
        Self { len: 0, bits: 0 }
    }

    /// `bits` holds the path in its low `len` bits.
    pub fn new(bits: u32, len: u32) -> Self {
        assert!(len <= Self::MAX_LEN, "path length {len} exceeds 32");
        assert!(len == 32 || bits < (1u32 << len), "path value {bits} does not fit in {len} bits");
        Self { len, bits }
    }

    pub fn len(&self) -> u32 {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn value(&self) -> u32 {
        self.bits
    }

    /// Bit at 0-based position `i`, counted from the root.
    pub fn bit(&self, i: u32) -> bool {
        debug_assert!(i < self.len);
        (self.bits >> (self.len - 1 - i)) & 1 == 1
    }

    pub fn prefix(&self, len: u32) -> TreePath {
        assert!(len <= self.len);
        if len == 0 {
            return Self::empty();
        }
        Self { len, bits: self.bits >> (self.len - len) }
    }

    /// The bits after the first `skip`.
    pub fn suffix(&self, skip: u32) -> TreePath {
        assert!(skip <= self.len);
        let len = self.len - skip;
        let bits = if len == 0 { 0 } else { self.bits & low_mask(len) };
        Self { len, bits }
    }

    pub fn child(&self, bit: bool) -> TreePath {
        assert!(self.len < Self::MAX_LEN);
        Self { len: self.len + 1, bits: (self.bits << 1) | bit as u32 }
    }

    pub fn concat(&self, tail: &TreePath) -> TreePath {
        assert!(self.len + tail.len <= Self::MAX_LEN);
        if tail.len == 0 {
            return *self;
        }
        Self { len: self.len + tail.len, bits: (self.bits << tail.len) | tail.bits }
    }

    /// Where the level-`level` subkey of a key punctured at `self` sits:
    /// the first `level - 1` bits followed by the flipped `level`-th bit.
    pub fn placement(&self, level: u32) -> TreePath {
        assert!(level >= 1 && level <= self.len);
        self.prefix(level - 1).child(!self.bit(level - 1))
    }

    pub fn is_prefix_of(&self, other: &TreePath) -> bool {
        self.len <= other.len && other.prefix(self.len) == *self
    }

    pub fn common_prefix_len(&self, other: &TreePath) -> u32 {
        let len = self.len.min(other.len);
        (0..len).take_while(|&i| self.bit(i) == other.bit(i)).count() as u32
    }
}

impl fmt::Debug for TreePath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "TreePath(\"{self}\")")
    }
}

impl fmt::Display for TreePath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for i in 0..self.len {
            f.write_str(if self.bit(i) { "1" } else { "0" })?;
        }
        Ok(())
    }
}

impl FromStr for TreePath {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.len() > Self::MAX_LEN as usize {
            return Err(format!("path {s:?} is longer than 32 bits"));
        }
        s.chars().try_fold(TreePath::empty(), |path, c| match c {
            '0' => Ok(path.child(false)),
            '1' => Ok(path.child(true)),
            other => Err(format!("invalid path character {other:?}")),
        })
    }
}

#[inline]
fn low_mask(bits: u32) -> u32 {
    if bits >= 32 {
        u32::MAX
    } else {
        (1u32 << bits) - 1
    }
}

/// Position of a leaf inside its chunk, in `[0, 2^levels)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct LeafOffset(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Sign {
    Positive,
    Negative,
}

/// Requirement that the leaf at `chunk` equals (positive) or differs from
/// (negative) `offset`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct IndexConstraint {
    pub sign: Sign,
    pub chunk: u32,
    pub offset: LeafOffset,
}

impl IndexConstraint {
    pub fn positive(chunk: u32, offset: u32) -> Self {
        Self { sign: Sign::Positive, chunk, offset: LeafOffset(offset) }
    }

    pub fn negative(chunk: u32, offset: u32) -> Self {
        Self { sign: Sign::Negative, chunk, offset: LeafOffset(offset) }
    }

    pub fn chunk_path(&self, levels: u32) -> TreePath {
        TreePath::new(self.chunk, levels)
    }
}

/// Off-path siblings of a punctured leaf, shallowest first.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct PuncturedKey {
    subkeys: Vec<Seed>,
}

impl PuncturedKey {
    pub fn new(subkeys: Vec<Seed>) -> Self {
        Self { subkeys }
    }

    pub fn levels(&self) -> u32 {
        self.subkeys.len() as u32
    }

    /// Subkey sitting at depth `level` (1-based).
    pub fn subkey(&self, level: u32) -> &Seed {
        &self.subkeys[level as usize - 1]
    }

    pub fn subkeys(&self) -> &[Seed] {
        &self.subkeys
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.subkeys.iter().flat_map(|s| s.as_bytes().iter().copied()).collect()
    }

    pub fn from_bytes(bytes: &[u8]) -> Option<Self> {
        if !bytes.len().is_multiple_of(SEED_BYTES) {
            return None;
        }
        let subkeys = bytes
            .chunks_exact(SEED_BYTES)
            .map(|c| Seed::from_slice(c).expect("exact chunk"))
            .collect();
        Some(Self { subkeys })
    }
}

/// Length-doubling PRG: SHA-256 of the seed, split into (G₀, G₁).
pub fn prg_expand(seed: &Seed) -> (Seed, Seed) {
    let digest: [u8; 32] = Sha256::digest(seed.as_bytes()).into();
    let mut left = [0u8; SEED_BYTES];
    let mut right = [0u8; SEED_BYTES];
    left.copy_from_slice(&digest[..SEED_BYTES]);
    right.copy_from_slice(&digest[SEED_BYTES..]);
    (Seed(left), Seed(right))
}

/// G_path(seed): one PRG application per bit, root-side bit first.
pub fn eval_path(seed: &Seed, path: &TreePath) -> Seed {
    (0..path.len()).fold(*seed, |node, i| node.child(path.bit(i)))
}

/// Low `levels` bits of the trailing eight seed bytes read big-endian.
pub fn leaf_offset(leaf: &Seed, levels: u32) -> LeafOffset {
    let tail = u64::from_be_bytes(leaf.0[SEED_BYTES - 8..].try_into().unwrap());
    LeafOffset((tail & ((1u64 << levels) - 1)) as u32)
}

/// Every leaf seed below `root` at relative depth `depth`, left to right.
pub fn expand_leaves(root: &Seed, depth: u32) -> Vec<Seed> {
    let mut layer = Vec::with_capacity(1 << depth);
    layer.push(*root);
    for _ in 0..depth {
        let mut next = Vec::with_capacity(layer.len() * 2);
        for node in &layer {
            let (l, r) = prg_expand(node);
            next.push(l);
            next.push(r);
        }
        layer = next;
    }
    layer
}

/// T(k): the (chunk, offset) pair for every chunk.
pub fn tree_leaves(key: &Seed, levels: u32) -> Vec<(u32, LeafOffset)> {
    subtree_leaves(key, &TreePath::empty(), levels)
}

/// ST(sk, prefix): the leaves handled by `subkey` placed at `prefix`.
pub fn subtree_leaves(subkey: &Seed, prefix: &TreePath, levels: u32) -> Vec<(u32, LeafOffset)> {
    assert!(prefix.len() <= levels);
    let depth = levels - prefix.len();
    let base = prefix.value() << depth;
    expand_leaves(subkey, depth)
        .iter()
        .enumerate()
        .map(|(x, leaf)| (base | x as u32, leaf_offset(leaf, levels)))
        .collect()
}

pub fn puncture(key: &Seed, chunk: &TreePath) -> PuncturedKey {
    let mut subkeys = Vec::with_capacity(chunk.len() as usize);
    let mut node = *key;
    for i in 0..chunk.len() {
        let (l, r) = prg_expand(&node);
        let (on_path, sibling) = if chunk.bit(i) { (r, l) } else { (l, r) };
        subkeys.push(sibling);
        node = on_path;
    }
    PuncturedKey { subkeys }
}

/// Regrows the tree of `key` assuming it was punctured at `guess`.
///
/// Output is sorted by chunk and has `2^levels - 1` entries; the guessed
/// chunk is absent. Only the true punctured chunk gives the original tree.
pub fn peval_leaves(key: &PuncturedKey, guess: &TreePath, levels: u32) -> Vec<(u32, LeafOffset)> {
    assert_eq!(guess.len(), levels);
    assert_eq!(key.levels(), levels);
    let mut leaves: Vec<_> = (1..=levels)
        .flat_map(|level| subtree_leaves(key.subkey(level), &guess.placement(level), levels))
        .collect();
    leaves.sort_unstable_by_key(|(chunk, _)| *chunk);
    leaves
}

/// Default cap on resampling attempts: `128·√n·(1 + #negatives)`.
pub fn default_max_attempts(levels: u32, negatives: usize) -> usize {
    128 * (1usize << levels) * (1 + negatives)
}

/// Replaces the subkey whose subtree holds `positive.chunk` with a fresh
/// seed whose tree places `positive.offset` at that chunk and avoids every
/// negative constraint falling in the same subtree.
///
/// The subkey is located by its placement relative to `punctured_at`.
/// Negatives in the positive constraint's own chunk are dominated by the
/// positive constraint and skipped; negatives outside the replaced subtree
/// cannot be affected and are ignored.
pub fn resample<R: Rng + ?Sized>(
    key: &PuncturedKey,
    punctured_at: &TreePath,
    positive: &IndexConstraint,
    negatives: &[IndexConstraint],
    levels: u32,
    max_attempts: usize,
    rng: &mut R,
) -> Result<PuncturedKey, GgmError> {
    if key.levels() != levels {
        return Err(GgmError::KeyLength { expected: levels, got: key.subkeys.len() });
    }
    let target = positive.chunk_path(levels);
    if target == *punctured_at {
        return Err(GgmError::ConstraintOnPuncturedChunk { chunk: positive.chunk });
    }
    let level = punctured_at.common_prefix_len(&target) + 1;
    let placement = punctured_at.placement(level);
    debug_assert!(placement.is_prefix_of(&target));
    let wanted_path = target.suffix(level);

    let excluded: Vec<(TreePath, LeafOffset)> = negatives
        .iter()
        .map(|c| (c.chunk_path(levels), c.offset))
        .filter(|(path, _)| placement.is_prefix_of(path) && *path != target)
        .map(|(path, offset)| (path.suffix(level), offset))
        .collect();

    for _ in 0..max_attempts {
        let candidate = Seed::random(rng);
        if leaf_offset(&eval_path(&candidate, &wanted_path), levels) != positive.offset {
            continue;
        }
        let clean = excluded
            .iter()
            .all(|(rel, offset)| leaf_offset(&eval_path(&candidate, rel), levels) != *offset);
        if clean {
            let mut subkeys = key.subkeys.clone();
            subkeys[level as usize - 1] = candidate;
            return Ok(PuncturedKey { subkeys });
        }
    }
    Err(GgmError::AttemptsExhausted { attempts: max_attempts })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn path(s: &str) -> TreePath {
        s.parse().unwrap()
    }

    fn key(byte: u8) -> Seed {
        Seed::from_bytes([byte; SEED_BYTES])
    }

    fn g(k: &Seed, p: &str) -> Seed {
        eval_path(k, &path(p))
    }

    #[test]
    fn prg_of_zero_seed_matches_known_digest() {
        // sha256sum of sixteen zero bytes
        let digest = "374708fff7719dd5979ec875d56cd2286f6d3cf7ec317a3b25632aab28ec37bb";
        let (l, r) = prg_expand(&Seed::default());
        let hex: String = l.as_bytes().iter().chain(r.as_bytes()).map(|b| format!("{b:02x}")).collect();
        assert_eq!(hex, digest);
    }

    #[test]
    fn prg_halves_differ_on_random_seeds() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        for _ in 0..10_000 {
            let (l, r) = prg_expand(&Seed::random(&mut rng));
            assert_ne!(l, r);
        }
    }

    #[test]
    fn eval_path_consumes_bits_root_first() {
        let k = key(7);
        assert_eq!(eval_path(&k, &TreePath::empty()), k);
        let expected = k.child(true).child(true).child(false);
        assert_eq!(g(&k, "110"), expected);
        assert_eq!(g(&k, "10"), prg_expand(&prg_expand(&k).1).0);
    }

    #[test]
    fn leaf_offset_reduces_trailing_bytes() {
        assert_eq!(leaf_offset(&Seed::default(), 3), LeafOffset(0));
        let mut bytes = [0u8; SEED_BYTES];
        bytes[15] = 13;
        assert_eq!(leaf_offset(&Seed::from_bytes(bytes), 3), LeafOffset(5));
        // leading bytes are ignored
        bytes[0] = 0xff;
        bytes[7] = 0xff;
        assert_eq!(leaf_offset(&Seed::from_bytes(bytes), 3), LeafOffset(5));
    }

    #[test]
    fn tree_leaves_matches_path_enumeration() {
        let k = key(3);
        let leaves = tree_leaves(&k, 0);
        assert_eq!(leaves, vec![(0, leaf_offset(&k, 0))]);

        let leaves = tree_leaves(&k, 3);
        assert_eq!(leaves.len(), 8);
        assert_eq!(leaves[2], (2, leaf_offset(&k.child(false).child(true).child(false), 3)));
        for (chunk, offset) in leaves {
            assert_eq!(offset, leaf_offset(&eval_path(&k, &TreePath::new(chunk, 3)), 3));
        }
    }

    #[test]
    fn subtree_leaves_cover_their_prefix() {
        let k = key(9);
        let sk = g(&k, "101");
        assert_eq!(subtree_leaves(&sk, &path("101"), 3), vec![(5, leaf_offset(&sk, 3))]);

        let right = subtree_leaves(&k.child(true), &path("1"), 3);
        assert_eq!(right.iter().map(|l| l.0).collect::<Vec<_>>(), vec![4, 5, 6, 7]);
        assert_eq!(right, tree_leaves(&k, 3)[4..].to_vec());
    }

    #[test]
    fn puncture_lists_off_path_siblings() {
        let k = key(1);
        assert_eq!(puncture(&k, &path("100")).subkeys(), &[g(&k, "0"), g(&k, "11"), g(&k, "101")]);
        assert_eq!(puncture(&k, &path("0")).subkeys(), &[g(&k, "1")]);
        assert_eq!(puncture(&k, &path("010")).subkeys(), &[g(&k, "1"), g(&k, "00"), g(&k, "011")]);
    }

    #[test]
    fn peval_at_true_point_drops_only_that_leaf() {
        let k = key(2);
        let pk = puncture(&k, &path("100"));
        let mut expected = tree_leaves(&k, 3);
        expected.remove(4);
        assert_eq!(peval_leaves(&pk, &path("100"), 3), expected);
    }

    #[test]
    fn peval_at_wrong_guess_reattaches_subkeys() {
        let k = key(2);
        let pk = puncture(&k, &path("100"));
        let leaves = peval_leaves(&pk, &path("000"), 3);
        // G₁₀₁(k) lands at chunk 001, G₁₁(k) covers 01x, G₀(k) covers 1xx
        assert_eq!(leaves[0], (1, leaf_offset(&g(&k, "101"), 3)));
        let g11 = g(&k, "11");
        assert_eq!(leaves[1], (2, leaf_offset(&g11.child(false), 3)));
        assert_eq!(leaves[2], (3, leaf_offset(&g11.child(true), 3)));
        assert_eq!(leaves[3..], subtree_leaves(&g(&k, "0"), &path("1"), 3)[..]);
        for guess in 0..8 {
            assert_eq!(peval_leaves(&pk, &TreePath::new(guess, 3), 3).len(), 7);
        }
    }

    #[test]
    fn resample_replaces_covering_subkey() {
        let k = key(4);
        let x = path("100");
        let pk = puncture(&k, &x);
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let pos = IndexConstraint::positive(0b111, 6);
        let out = resample(&pk, &x, &pos, &[], 3, default_max_attempts(3, 0), &mut rng).unwrap();
        assert_eq!(out.subkey(1), &g(&k, "0"));
        assert_eq!(out.subkey(3), &g(&k, "101"));
        assert_ne!(out.subkey(2), pk.subkey(2));
        assert_eq!(leaf_offset(&out.subkey(2).child(true), 3), LeafOffset(6));
    }

    #[test]
    fn resample_honours_negative_in_same_subtree() {
        let k = key(4);
        let x = path("100");
        let pk = puncture(&k, &x);
        let mut rng = ChaCha20Rng::seed_from_u64(6);
        let pos = IndexConstraint::positive(0b111, 2);
        for z in 0..8 {
            let neg = [IndexConstraint::negative(0b110, z)];
            let out = resample(&pk, &x, &pos, &neg, 3, default_max_attempts(3, 1), &mut rng).unwrap();
            let k2 = out.subkey(2);
            assert_eq!(leaf_offset(&k2.child(true), 3), LeafOffset(2));
            assert_ne!(leaf_offset(&k2.child(false), 3), LeafOffset(z));
        }
    }

    #[test]
    fn resample_rejects_constraint_on_punctured_chunk() {
        let pk = puncture(&key(1), &path("01"));
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        let err = resample(&pk, &path("01"), &IndexConstraint::positive(1, 0), &[], 2, 10, &mut rng);
        assert_eq!(err, Err(GgmError::ConstraintOnPuncturedChunk { chunk: 1 }));
    }

    #[test]
    fn resample_reports_exhaustion() {
        let pk = puncture(&key(1), &path("000"));
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        // offset 0 required at 111 but also excluded there via a chunk in the
        // same subtree that can never differ: a zero attempt budget.
        let err = resample(&pk, &path("000"), &IndexConstraint::positive(7, 0), &[], 3, 0, &mut rng);
        assert_eq!(err, Err(GgmError::AttemptsExhausted { attempts: 0 }));
    }

    #[test]
    fn path_helpers() {
        let p = path("1011");
        assert_eq!(p.value(), 0b1011);
        assert_eq!(p.prefix(2), path("10"));
        assert_eq!(p.suffix(1), path("011"));
        assert_eq!(p.placement(1), path("0"));
        assert_eq!(p.placement(3), path("100"));
        assert_eq!(p.common_prefix_len(&path("1000")), 2);
        assert_eq!(path("10").concat(&path("11")), p);
        assert_eq!(p.to_string(), "1011");
        assert!("10a".parse::<TreePath>().is_err());
    }

    #[test]
    fn punctured_key_bytes_round_trip() {
        let pk = puncture(&key(8), &path("0110"));
        let bytes = pk.to_bytes();
        assert_eq!(bytes.len(), 4 * SEED_BYTES);
        assert_eq!(&bytes[..SEED_BYTES], pk.subkey(1).as_bytes());
        assert_eq!(PuncturedKey::from_bytes(&bytes), Some(pk));
        assert_eq!(PuncturedKey::from_bytes(&bytes[1..]), None);
    }
}

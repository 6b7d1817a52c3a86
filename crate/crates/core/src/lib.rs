//! Single-server private information retrieval with client preprocessing.
//!
//! The client streams the database once, building hint tables keyed by
//! GGM-tree PRF keys. Each online query uploads one punctured key
//! (`log₂√n` seeds) and downloads a `(log₂√n + 1) × √n` parity matrix; the
//! server does `O(√n log n)` work and learns nothing about the index.
//!
//! Modules:
//! - [`ggm`]: the puncturable PRF, punctured evaluation and resampling.
//! - [`database`]: chunked storage, parities and the public index shuffle.
//! - [`client`]: hint tables, query generation, reconstruction, refresh.
//! - [`server`]: the parity-matrix answer and per-connection sessions.
//! - [`wire`]: framing and message codecs.
//! - [`harness`]: oracles, simulation, statistics and benchmarks.

pub mod client;
pub mod database;
pub mod ggm;
pub mod harness;
pub mod server;
pub mod wire;

pub use client::{Client, ClientConfig, ClientError, ClientState};
pub use database::{Database, DbError, DbIndex, Geometry, PrpKey};
pub use ggm::{GgmError, IndexConstraint, LeafOffset, PuncturedKey, Seed, TreePath};
pub use server::{answer, LocalTransport, ParityMatrix, Server, ServerError, ServerSession};
pub use wire::{Frame, MsgType, StreamTransport, Transport, WireError};

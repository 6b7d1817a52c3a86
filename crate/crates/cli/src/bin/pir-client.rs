//! Fetches one entry privately from a running `pir-server`.

use std::io::BufReader;
use std::net::TcpStream;

use anyhow::{bail, Context};
use clap::Parser;
use pir_core::wire::{encode_error, error_code};
use pir_core::{Client, ClientConfig, Geometry, StreamTransport, Transport};

#[derive(Debug, Parser)]
#[command(about = "Single-server PIR client: preprocess, then query one index")]
struct Args {
    /// Server address.
    #[arg(long)]
    connect: String,
    /// Expected database shape as `n,B`.
    #[arg(long, value_parser = parse_meta)]
    db_meta: (u64, u32),
    /// Index to retrieve.
    #[arg(long)]
    query: u64,
    /// Seeds all client randomness.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 8)]
    c1: usize,
    #[arg(long, default_value_t = 24)]
    c2: usize,
    #[arg(long)]
    pipeline: bool,
}

fn parse_meta(s: &str) -> Result<(u64, u32), String> {
    let (n, b) = s.split_once(',').ok_or("expected n,B")?;
    let n = n.trim().parse().map_err(|e| format!("n: {e}"))?;
    let b = b.trim().parse().map_err(|e| format!("B: {e}"))?;
    Ok((n, b))
}

/// Read and write halves over one socket.
struct Duplex {
    reader: BufReader<TcpStream>,
    writer: TcpStream,
}

impl std::io::Read for Duplex {
    fn read(&mut self, buf: &mut [u8]) -> std::io::Result<usize> {
        self.reader.read(buf)
    }
}

impl std::io::Write for Duplex {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        self.writer.write(buf)
    }

    fn flush(&mut self) -> std::io::Result<()> {
        self.writer.flush()
    }
}

fn main() -> anyhow::Result<()> {
    let args = Args::parse();
    let (n, entry_size) = args.db_meta;
    if n == 0 || entry_size == 0 {
        bail!("--db-meta needs a positive n and B");
    }
    if args.query >= n {
        bail!("index {} out of range for {n} entries", args.query);
    }
    let stream = TcpStream::connect(&args.connect).with_context(|| format!("connecting to {}", args.connect))?;
    stream.set_nodelay(true)?;
    let duplex = Duplex { reader: BufReader::new(stream.try_clone()?), writer: stream };
    let config = ClientConfig { c1: args.c1, c2: args.c2, pipeline: args.pipeline, seed: args.seed };
    let mut client = Client::connect(StreamTransport::new(duplex), config).context("offline phase")?;

    let state = client.state();
    let padded = Geometry::covering(n).n();
    if state.geometry().n() != padded || state.entry_size() != entry_size as usize {
        let (n_server, b_server) = (state.geometry().n(), state.entry_size());
        let _ = client.transport_mut().send(&encode_error(error_code::META_MISMATCH));
        bail!(
            "server database is {} x {} bytes, expected {padded} x {entry_size}",
            n_server,
            b_server
        );
    }
    let block = client.query(args.query)?;
    println!("{}", hex(&block));
    Ok(())
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

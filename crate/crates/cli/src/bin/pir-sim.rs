//! End-to-end simulation, server latency sweep and database generation.

use std::fs::File;
use std::io::BufWriter;
use std::path::PathBuf;

use anyhow::{bail, Context};
use clap::{Parser, ValueEnum};
use pir_core::harness::bench::{bench_server, render_table};
use pir_core::harness::{simulate, SimParams};
use pir_core::{Database, Geometry};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Report {
    Json,
    Text,
}

#[derive(Debug, Parser)]
#[command(about = "Run the PIR protocol in-process against a random database")]
struct Args {
    /// Database size; must be a power of four.
    #[arg(long, default_value_t = 4096)]
    n: u64,
    #[arg(long, default_value_t = 32)]
    entry_size: usize,
    #[arg(long, default_value_t = 100)]
    seeds: u64,
    /// Distinct random queries per seed.
    #[arg(long, default_value_t = 32)]
    queries: usize,
    #[arg(long, default_value_t = 8)]
    c1: usize,
    #[arg(long, default_value_t = 24)]
    c2: usize,
    #[arg(long)]
    pipeline: bool,
    /// First seed of the run.
    #[arg(long, default_value_t = 0)]
    base_seed: u64,
    #[arg(long, value_enum, default_value_t = Report::Text)]
    report: Report,
    /// Instead of simulating, time server answers at these sizes.
    #[arg(long, value_delimiter = ',')]
    bench_server: Option<Vec<u64>>,
    /// Instead of simulating, write a random `n`-entry database file.
    #[arg(long)]
    write_db: Option<PathBuf>,
}

fn main() -> anyhow::Result<()> {
    let args = Args::parse();
    if args.entry_size == 0 {
        bail!("--entry-size must be positive");
    }

    if let Some(path) = &args.write_db {
        let mut rng = ChaCha20Rng::seed_from_u64(args.base_seed);
        let db = Database::random(Geometry::covering(args.n), args.entry_size, &mut rng);
        let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
        db.write_to(BufWriter::new(file))?;
        eprintln!("wrote {} entries of {} bytes to {}", db.n(), db.entry_size(), path.display());
        return Ok(());
    }

    if let Some(sizes) = &args.bench_server {
        if let Some(bad) = sizes.iter().find(|&&n| Geometry::for_entries(n).is_none()) {
            bail!("{bad} is not a power of four");
        }
        let rows = bench_server(sizes, args.entry_size, args.queries.max(1), 5, args.base_seed);
        match args.report {
            Report::Json => println!("{}", serde_json::to_string_pretty(&rows)?),
            Report::Text => print!("{}", render_table(&rows)),
        }
        return Ok(());
    }

    if Geometry::for_entries(args.n).is_none() {
        bail!("--n must be a power of four (got {})", args.n);
    }
    let params = SimParams {
        n: args.n,
        entry_size: args.entry_size,
        c1: args.c1,
        c2: args.c2,
        seeds: args.seeds,
        queries_per_seed: args.queries,
        pipeline: args.pipeline,
        base_seed: args.base_seed,
    };
    let report = simulate(&params);
    match args.report {
        Report::Json => println!("{}", serde_json::to_string_pretty(&report)?),
        Report::Text => print!("{}", report.render_text()),
    }
    Ok(())
}

//! Serves a `PIR1` database file over TCP, one thread per connection.

use std::fs::File;
use std::io::BufReader;
use std::net::TcpListener;
use std::path::PathBuf;
use std::sync::Arc;

use anyhow::Context;
use clap::Parser;
use pir_core::{Database, Server, ServerSession};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

#[derive(Debug, Parser)]
#[command(about = "Single-server PIR: answer punctured-key queries over TCP")]
struct Args {
    /// Database file in PIR1 format.
    #[arg(long)]
    db: PathBuf,
    /// Address to listen on, e.g. 127.0.0.1:7878.
    #[arg(long)]
    listen: String,
    /// Seed for the published PRP key; random when omitted.
    #[arg(long)]
    seed: Option<u64>,
    /// Attach two chunks to every answer.
    #[arg(long)]
    pipeline: bool,
}

fn main() -> anyhow::Result<()> {
    let args = Args::parse();
    let file = File::open(&args.db).with_context(|| format!("opening {}", args.db.display()))?;
    let db = Database::read_from(BufReader::new(file)).context("reading database")?;
    let mut rng = match args.seed {
        Some(seed) => ChaCha20Rng::seed_from_u64(seed),
        None => ChaCha20Rng::from_os_rng(),
    };
    eprintln!("loaded {} entries of {} bytes", db.n(), db.entry_size());
    let server = Arc::new(Server::new(Arc::new(db), args.pipeline, &mut rng));

    let listener = TcpListener::bind(&args.listen).with_context(|| format!("binding {}", args.listen))?;
    // the chosen port matters when binding to :0
    println!("listening on {}", listener.local_addr()?);
    for stream in listener.incoming() {
        let stream = match stream {
            Ok(s) => s,
            Err(e) => {
                eprintln!("accept failed: {e}");
                continue;
            }
        };
        let session = ServerSession::new(server.clone());
        std::thread::spawn(move || {
            let peer = stream.peer_addr().map(|a| a.to_string()).unwrap_or_default();
            if let Err(e) = session.serve(stream) {
                eprintln!("session {peer}: {e}");
            }
        });
    }
    Ok(())
}

use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::PathBuf;
use std::process::{Child, Command, Stdio};

use pir_core::Database;

struct Killed(Child);

impl Drop for Killed {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

fn scratch(name: &str) -> PathBuf {
    std::env::temp_dir().join(format!("pir-cli-{}-{name}", std::process::id()))
}

fn write_db(path: &PathBuf, n: u64, entry_size: usize) -> Database {
    let status = Command::new(env!("CARGO_BIN_EXE_pir-sim"))
        .args(["--n", &n.to_string(), "--entry-size", &entry_size.to_string(), "--base-seed", "3"])
        .arg("--write-db")
        .arg(path)
        .status()
        .unwrap();
    assert!(status.success());
    Database::read_from(BufReader::new(File::open(path).unwrap())).unwrap()
}

fn start_server(db: &PathBuf, pipeline: bool) -> (Killed, String) {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_pir-server"));
    cmd.arg("--db").arg(db).args(["--listen", "127.0.0.1:0", "--seed", "9"]);
    if pipeline {
        cmd.arg("--pipeline");
    }
    let mut child = cmd.stdout(Stdio::piped()).stderr(Stdio::null()).spawn().unwrap();
    let mut line = String::new();
    BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).unwrap();
    let addr = line.trim().strip_prefix("listening on ").expect("address line").to_string();
    (Killed(child), addr)
}

fn query(addr: &str, meta: &str, index: u64, extra: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_pir-client"))
        .args(["--connect", addr, "--db-meta", meta, "--query", &index.to_string()])
        .args(extra)
        .output()
        .unwrap()
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[test]
fn client_fetches_entries_over_tcp() {
    let path = scratch("roundtrip.db");
    let db = write_db(&path, 256, 16);
    let (_server, addr) = start_server(&path, false);
    let mut answered = 0;
    for (seed, index) in [(1u64, 0u64), (2, 77), (3, 255), (4, 130)] {
        let out = query(&addr, "256,16", index, &["--seed", &seed.to_string()]);
        if out.status.success() {
            let got = String::from_utf8(out.stdout).unwrap();
            assert_eq!(got.trim(), hex(db.entry(index).unwrap()));
            answered += 1;
        } else {
            // a miss is allowed but must be reported as such
            assert!(String::from_utf8_lossy(&out.stderr).contains("no primary hint"));
        }
    }
    assert!(answered >= 3);
    let _ = std::fs::remove_file(&path);
}

#[test]
fn pipelined_server_and_padded_database() {
    let path = scratch("padded.db");
    // 200 entries pad to 256
    let db = write_db(&path, 200, 8);
    assert_eq!(db.n(), 256);
    let (_server, addr) = start_server(&path, true);
    let out = query(&addr, "200,8", 199, &["--pipeline", "--seed", "5"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(String::from_utf8(out.stdout).unwrap().trim(), hex(db.entry(199).unwrap()));
    let _ = std::fs::remove_file(&path);
}

#[test]
fn client_rejects_mismatched_meta() {
    let path = scratch("meta.db");
    write_db(&path, 64, 4);
    let (_server, addr) = start_server(&path, false);
    let out = query(&addr, "64,8", 1, &[]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("expected 64 x 8"));
    let _ = std::fs::remove_file(&path);
}

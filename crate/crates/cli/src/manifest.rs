//! Reproducibility manifest: seed, config hash, code version and a hash of
//! every output. No timestamps, so reruns give identical bytes.

use std::fmt::Write as _;
use std::path::Path;

use dfgp::Result;
use sha2::{Digest, Sha256};

pub const FILE_NAME: &str = "manifest.txt";

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

pub fn write(out: &Path, command: &str, seed: u64, config: &[u8], files: &[String]) -> Result<()> {
    let mut files = files.to_vec();
    files.sort();
    let mut text = String::new();
    let _ = writeln!(text, "version = {}", env!("CARGO_PKG_VERSION"));
    let _ = writeln!(text, "command = {command}");
    let _ = writeln!(text, "seed = {seed}");
    let _ = writeln!(text, "config_sha256 = {}", sha256_hex(config));
    for f in &files {
        let _ = writeln!(text, "sha256 {f} = {}", sha256_hex(&std::fs::read(out.join(f))?));
    }
    std::fs::write(out.join(FILE_NAME), text)?;
    Ok(())
}

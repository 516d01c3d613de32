//! Timestamped run directories with the resolved config, seed record and
//! versions manifest.

use std::fs;
use std::path::{Path, PathBuf};

use serde_json::json;

use crate::config::RunConfig;
use crate::CliError;

pub const CONFIG_FILE: &str = "config.resolved.json";
pub const SEED_FILE: &str = "seed.json";
pub const VERSIONS_FILE: &str = "versions.json";

pub fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

/// Creates `<out>/<command>-<UTC timestamp>` (suffixed `-N` if taken).
pub fn create_run_dir(out: &Path, command: &str) -> Result<PathBuf, CliError> {
    fs::create_dir_all(out).map_err(|e| CliError::Io(format!("{}: {e}", out.display())))?;
    let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%SZ").to_string();
    let base = format!("{command}-{stamp}");
    for n in 0.. {
        let name = if n == 0 { base.clone() } else { format!("{base}-{n}") };
        let dir = out.join(name);
        match fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(CliError::Io(format!("{}: {e}", dir.display()))),
        }
    }
    unreachable!()
}

pub fn write_run_record(dir: &Path, cfg: &RunConfig, command: &str, argv: &[String]) -> Result<(), CliError> {
    write_text(&dir.join(CONFIG_FILE), &cfg.to_json())?;
    let seeds = json!({
        "train.seed": cfg.train.seed,
        "data.phantom.master_seed": cfg.data.phantom.master_seed,
        "rng": "ChaCha8 (rand_chacha), seed_from_u64; child streams via SplitMix64",
    });
    write_text(&dir.join(SEED_FILE), &serde_json::to_string_pretty(&seeds).expect("json"))?;
    let versions = json!({
        "idhnet": env!("CARGO_PKG_VERSION"),
        "command": command,
        "argv": argv,
        "os": std::env::consts::OS,
        "arch": std::env::consts::ARCH,
        "debug_assertions": cfg!(debug_assertions),
    });
    write_text(&dir.join(VERSIONS_FILE), &serde_json::to_string_pretty(&versions).expect("json"))
}

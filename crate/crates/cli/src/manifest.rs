use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use crate::CliError;

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub command: String,
    pub argv: Vec<String>,
    pub config: Value,
    pub config_sha256: String,
    pub seed: u64,
    pub versions: Value,
    pub started_unix: u64,
    pub wall_time_s: f64,
    pub outputs: Vec<PathBuf>,
    pub results: Value,
}

pub fn config_hash(config: &Value) -> String {
    let canonical = serde_json::to_vec(config).expect("json value serializes");
    Sha256::digest(&canonical).iter().map(|b| format!("{b:02x}")).collect()
}

pub struct RunClock {
    started: Instant,
    started_unix: u64,
}

impl RunClock {
    pub fn start() -> Self {
        Self {
            started: Instant::now(),
            started_unix: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map_or(0, |d| d.as_secs()),
        }
    }
}

/// `<artifact>.manifest.json`
pub fn manifest_path(artifact: &Path) -> PathBuf {
    let mut s = artifact.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

#[allow(clippy::too_many_arguments)]
pub fn write(
    path: &Path,
    command: &str,
    argv: &[String],
    config: &Value,
    seed: u64,
    clock: &RunClock,
    outputs: Vec<PathBuf>,
    results: Value,
) -> Result<(), CliError> {
    let m = Manifest {
        command: command.to_string(),
        argv: argv.to_vec(),
        config: config.clone(),
        config_sha256: config_hash(config),
        seed,
        versions: serde_json::json!({
            "atrans": env!("CARGO_PKG_VERSION"),
            "manifest": 1,
        }),
        started_unix: clock.started_unix,
        wall_time_s: clock.started.elapsed().as_secs_f64(),
        outputs,
        results,
    };
    let text = serde_json::to_string_pretty(&m).map_err(|e| CliError::Runtime(e.into()))?;
    std::fs::write(path, text + "\n").map_err(|e| CliError::Runtime(e.into()))?;
    Ok(())
}

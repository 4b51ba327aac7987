use std::fs::{self, OpenOptions};
use std::io::{ErrorKind, Write};
use std::path::{Path, PathBuf};

use ckstn::{Error, Result};
use serde::Serialize;

use crate::config::RunConfig;

/// Record of one CLI invocation, written next to its outputs.
#[derive(Debug, Serialize)]
pub struct RunManifest<'a> {
    pub command: &'a str,
    pub config_path: Option<&'a Path>,
    pub overrides: &'a [String],
    pub seed: Option<u64>,
    pub output_dir: &'a Path,
    pub version: &'static str,
    pub started: String,
    pub finished: String,
    pub exit_code: i32,
    pub config: &'a RunConfig,
}

/// Writes `run_manifest.json`, or `run_manifest.N.json` with the smallest
/// free `N`, without ever replacing an existing file.
pub fn write_manifest(dir: &Path, manifest: &RunManifest<'_>) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    let json = serde_json::to_string_pretty(manifest).map_err(|e| Error::Format(e.to_string()))?;
    for n in 0usize.. {
        let name = if n == 0 {
            "run_manifest.json".to_string()
        } else {
            format!("run_manifest.{n}.json")
        };
        let path = dir.join(name);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                f.write_all(json.as_bytes()).map_err(|e| Error::Io {
                    path: path.clone(),
                    source: e,
                })?;
                return Ok(path);
            }
            Err(e) if e.kind() == ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(Error::Io { path, source: e }),
        }
    }
    unreachable!("manifest suffixes exhausted")
}

//! Provenance record written next to every command's outputs.

use std::fs::{self, File};
use std::io::{self, Read};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;
use sha2::{Digest, Sha256};
use spoofnet::{Error, Result};

use crate::config::RunConfig;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct InputDigest {
    pub path: PathBuf,
    /// SHA-256 of the file, or for a directory of the sorted
    /// `name sha256` lines of its regular files.
    pub sha256: String,
    pub files: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct Manifest {
    pub command: String,
    pub argv: Vec<String>,
    pub tool_version: String,
    pub seed: u64,
    pub config: RunConfig,
    pub inputs: Vec<InputDigest>,
    pub outputs: Vec<PathBuf>,
    pub created_unix: u64,
}

fn hash_file(path: &Path) -> io::Result<String> {
    let mut f = File::open(path)?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex::encode(h.finalize()))
}

pub const MANIFEST_NAME: &str = "manifest.json";

/// Digest of a file or (non-recursively) a directory. A directory's own
/// manifest is left out, so re-running a command does not change it.
pub fn digest(path: &Path) -> Result<InputDigest> {
    let ctx = |e| Error::io(format!("hashing {}", path.display()), e);
    if path.is_dir() {
        let mut names: Vec<PathBuf> = fs::read_dir(path)
            .map_err(ctx)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file() && p.file_name().is_some_and(|n| n != MANIFEST_NAME))
            .collect();
        names.sort();
        let mut h = Sha256::new();
        for p in &names {
            let name = p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            h.update(format!("{name} {}\n", hash_file(p).map_err(ctx)?));
        }
        Ok(InputDigest {
            path: path.to_path_buf(),
            sha256: hex::encode(h.finalize()),
            files: names.len(),
        })
    } else {
        Ok(InputDigest {
            path: path.to_path_buf(),
            sha256: hash_file(path).map_err(ctx)?,
            files: 1,
        })
    }
}

impl Manifest {
    pub fn new(command: &str, argv: &[String], config: &RunConfig) -> Self {
        Self {
            command: command.to_string(),
            argv: argv.to_vec(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            seed: config.seed,
            config: config.clone(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            created_unix: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
        }
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        self.inputs.push(digest(path)?);
        Ok(())
    }

    pub fn output(&mut self, path: &Path) {
        self.outputs.push(path.to_path_buf());
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
        }
        let text = serde_json::to_string_pretty(self)? + "\n";
        fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }
}

/// `<file>.manifest.json` beside a file output.
pub fn beside(file: &Path) -> PathBuf {
    let mut name = file.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".manifest.json");
    file.with_file_name(name)
}

/// `<dir>/manifest.json` inside a directory output.
pub fn inside(dir: &Path) -> PathBuf {
    dir.join(MANIFEST_NAME)
}

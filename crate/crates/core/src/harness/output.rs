//! Output directory handling, seed bookkeeping and run manifests.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Read};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::ExperimentConfig;
use super::HarnessError;
use crate::seeding;

pub const MANIFEST_NAME: &str = "manifest.json";

/// Derives and remembers every sub-seed handed out during a run.
#[derive(Debug, Clone, Default)]
pub struct SeedBook {
    master: u64,
    seeds: BTreeMap<String, u64>,
}

impl SeedBook {
    pub fn new(master: u64) -> Self {
        Self {
            master,
            seeds: BTreeMap::new(),
        }
    }

    pub fn master(&self) -> u64 {
        self.master
    }

    pub fn get(&mut self, label: &str) -> u64 {
        let s = seeding::derive_seed(self.master, label);
        self.seeds.insert(label.to_string(), s);
        s
    }

    pub fn entries(&self) -> &BTreeMap<String, u64> {
        &self.seeds
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileEntry {
    pub name: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub config: ExperimentConfig,
    pub master_seed: u64,
    pub seeds: BTreeMap<String, u64>,
    pub wall_clock_seconds: f64,
    pub files: Vec<FileEntry>,
}

impl RunManifest {
    pub fn read(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| HarnessError::Config(format!("bad manifest {}: {e}", path.display())))
    }
}

pub fn sha256_file(path: &Path) -> Result<String, HarnessError> {
    let mut f = File::open(path)?;
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hasher.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

/// An output directory that tracks the files written into it.
#[derive(Debug)]
pub struct OutputDir {
    root: PathBuf,
    files: Vec<String>,
}

impl OutputDir {
    pub fn create(root: &Path) -> Result<Self, HarnessError> {
        std::fs::create_dir_all(root)?;
        Ok(Self {
            root: root.to_path_buf(),
            files: Vec::new(),
        })
    }

    pub fn path(&self) -> &Path {
        &self.root
    }

    pub fn csv(&mut self, name: &str) -> Result<csv::Writer<BufWriter<File>>, HarnessError> {
        let f = self.file(name)?;
        Ok(csv::Writer::from_writer(f))
    }

    pub fn file(&mut self, name: &str) -> Result<BufWriter<File>, HarnessError> {
        let path = self.root.join(name);
        if !self.files.iter().any(|f| f == name) {
            self.files.push(name.to_string());
        }
        Ok(BufWriter::new(File::create(path)?))
    }

    pub fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), HarnessError> {
        let w = self.file(name)?;
        serde_json::to_writer_pretty(w, value).map_err(|e| HarnessError::Io(e.into()))?;
        Ok(())
    }

    pub fn finish(
        self,
        command: &str,
        config: &ExperimentConfig,
        seeds: &SeedBook,
        wall_clock_seconds: f64,
    ) -> Result<RunManifest, HarnessError> {
        let mut files = Vec::with_capacity(self.files.len());
        let mut names = self.files.clone();
        names.sort();
        for name in names {
            let path = self.root.join(&name);
            files.push(FileEntry {
                bytes: std::fs::metadata(&path)?.len(),
                sha256: sha256_file(&path)?,
                name,
            });
        }
        let manifest = RunManifest {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            config: config.clone(),
            master_seed: seeds.master(),
            seeds: seeds.entries().clone(),
            wall_clock_seconds,
            files,
        };
        let text = serde_json::to_string_pretty(&manifest).map_err(|e| HarnessError::Io(e.into()))?;
        std::fs::write(self.root.join(MANIFEST_NAME), text)?;
        Ok(manifest)
    }
}

/// Shortest decimal representation that reads back to the same value.
pub fn fmt(v: f64) -> String {
    if v == f64::INFINITY {
        "inf".into()
    } else if v == f64::NEG_INFINITY {
        "-inf".into()
    } else {
        v.to_string()
    }
}

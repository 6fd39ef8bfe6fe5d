//! Run manifest and the checkpoint directory lock.

use std::fmt::Write as _;
use std::fs::{File, OpenOptions, TryLockError};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use crate::codec::digest64;
use crate::error::{read, read_text, write_atomic, Error, Result};

pub const FILE_NAME: &str = "manifest.txt";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    /// `tokenizer`, `dataset`, `eval`, `checkpoint`, `telemetry`, ...
    pub role: String,
    pub path: PathBuf,
    /// Digest of the file contents when recorded.
    pub digest: u64,
    /// Seconds since the Unix epoch.
    pub created: u64,
}

/// Files of a run with the digests they had when recorded.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct RunManifest {
    pub seed: u64,
    /// Digest of the rendered run configuration.
    pub config_digest: u64,
    pub tokenizer_fingerprint: u64,
    pub entries: Vec<ManifestEntry>,
}

pub fn now_unix() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

pub fn file_digest(path: &Path) -> Result<u64> {
    Ok(digest64(&read(path)?))
}

impl RunManifest {
    /// Records `path` under `role`, replacing any entry with the same role.
    pub fn record(&mut self, role: &str, path: &Path) -> Result<()> {
        let entry = ManifestEntry {
            role: role.into(),
            path: path.to_path_buf(),
            digest: file_digest(path)?,
            created: now_unix(),
        };
        match self.entries.iter_mut().find(|e| e.role == role) {
            Some(e) => *e = entry,
            None => self.entries.push(entry),
        }
        Ok(())
    }

    pub fn get(&self, role: &str) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.role == role)
    }

    /// Every referenced file exists and still has its recorded digest.
    pub fn verify(&self) -> Result<()> {
        for e in &self.entries {
            let found = file_digest(&e.path)?;
            if found != e.digest {
                return Err(Error::Fingerprint { what: e.path.display().to_string(), expected: e.digest, found });
            }
        }
        Ok(())
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "seed = {}", self.seed);
        let _ = writeln!(out, "config digest = {:016x}", self.config_digest);
        let _ = writeln!(out, "tokenizer fingerprint = {:016x}", self.tokenizer_fingerprint);
        for e in &self.entries {
            let _ = writeln!(out, "file = {} {:016x} {} {}", e.role, e.digest, e.created, e.path.display());
        }
        out
    }

    pub fn parse(text: &str) -> std::result::Result<Self, String> {
        let hex = |v: &str| u64::from_str_radix(v, 16).map_err(|_| format!("bad hex {v:?}"));
        let mut m = Self::default();
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let (k, v) = line.split_once(" = ").ok_or_else(|| format!("line {}: expected `key = value`", i + 1))?;
            match k {
                "seed" => m.seed = v.parse().map_err(|_| format!("bad seed {v:?}"))?,
                "config digest" => m.config_digest = hex(v)?,
                "tokenizer fingerprint" => m.tokenizer_fingerprint = hex(v)?,
                "file" => {
                    let mut parts = v.splitn(4, ' ');
                    let mut next = || parts.next().ok_or_else(|| format!("line {}: short file entry", i + 1));
                    let role = next()?.to_string();
                    let digest = hex(next()?)?;
                    let created = next()?.parse().map_err(|_| format!("line {}: bad timestamp", i + 1))?;
                    let path = PathBuf::from(next()?);
                    m.entries.push(ManifestEntry { role, path, digest, created });
                }
                other => return Err(format!("line {}: unknown key {other:?}", i + 1)),
            }
        }
        Ok(m)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        write_atomic(&dir.join(FILE_NAME), self.render().as_bytes())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(FILE_NAME);
        Self::parse(&read_text(&path)?).map_err(|e| Error::format(&path, e))
    }
}

/// Exclusive advisory lock on a run directory, released on drop.
#[derive(Debug)]
pub struct DirLock {
    _file: File,
    path: PathBuf,
}

impl DirLock {
    pub const FILE_NAME: &'static str = ".lock";

    pub fn acquire(dir: &Path) -> Result<Self> {
        let path = dir.join(Self::FILE_NAME);
        let file =
            OpenOptions::new().create(true).truncate(false).write(true).open(&path).map_err(|e| Error::io(&path, e))?;
        match file.try_lock() {
            Ok(()) => Ok(Self { _file: file, path }),
            Err(TryLockError::WouldBlock) => Err(Error::Locked(dir.to_path_buf())),
            Err(TryLockError::Error(e)) => Err(Error::io(&path, e)),
        }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

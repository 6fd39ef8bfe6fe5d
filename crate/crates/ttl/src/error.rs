use std::io;
use std::path::{Path, PathBuf};

/// Failures of the IO layer. Each maps to a process exit status.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{}: no such file", .0.display())]
    Missing(PathBuf),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
    #[error("{}: {reason}", path.display())]
    Format { path: PathBuf, reason: String },
    #[error("fingerprint mismatch for {what}: expected {expected:016x}, found {found:016x}")]
    Fingerprint { what: String, expected: u64, found: u64 },
    #[error("{}: locked by another writer", .0.display())]
    Locked(PathBuf),
    #[error("invalid argument: {0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] ttl_core::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_MISSING: i32 = 3;
pub const EXIT_FINGERPRINT: i32 = 4;

impl Error {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Missing(_) => EXIT_MISSING,
            Self::Fingerprint { .. } => EXIT_FINGERPRINT,
            Self::Usage(_) => EXIT_USAGE,
            _ => EXIT_FAILURE,
        }
    }

    /// Wraps an IO error, turning "not found" into [`Error::Missing`].
    pub fn io(path: &Path, source: io::Error) -> Self {
        if source.kind() == io::ErrorKind::NotFound {
            Self::Missing(path.to_path_buf())
        } else {
            Self::Io { path: path.to_path_buf(), source }
        }
    }

    pub fn format(path: &Path, reason: impl Into<String>) -> Self {
        Self::Format { path: path.to_path_buf(), reason: reason.into() }
    }
}

pub(crate) fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Writes through a sibling temporary file and renames it into place.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

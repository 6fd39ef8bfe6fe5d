use alloc::string::String;

/// Errors produced by the core crate.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// An argument lies outside the domain of a function.
    #[error("domain error: {0}")]
    Domain(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    /// An invalid configuration (model, trainer, tokenizer, quantizer).
    #[error("configuration error: {0}")]
    Config(String),
    #[error("decode error: {0}")]
    Decode(String),
    #[error("index out of range: {0}")]
    OutOfRange(String),
    #[error("empty input: {0}")]
    Empty(String),
    /// Failure reported by a caller-supplied hook (IO, formatting).
    #[error("{0}")]
    External(String),
    /// Training produced a NaN or infinity.
    #[error("non-finite {what} at step {step}")]
    NonFinite { what: String, step: u64 },
}

pub type Result<T> = core::result::Result<T, Error>;

macro_rules! bail {
    ($variant:ident, $($arg:tt)*) => {
        return Err($crate::error::Error::$variant(alloc::format!($($arg)*)))
    };
}
pub(crate) use bail;

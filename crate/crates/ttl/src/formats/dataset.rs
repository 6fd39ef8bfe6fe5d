//! Packed dataset: `TTLD`, version, sequence length, sequence count and
//! tokenizer fingerprint (u64 each), then u32 token ids. A loss mask, when
//! present, lives in a `.mask` sidecar: `TTLM`, version, token count, one byte
//! per token.

use std::path::{Path, PathBuf};

use ttl_core::data::PackedDataset;

use crate::codec::{Reader, Writer};
use crate::error::{read, write_atomic, Error, Result};

pub const MAGIC: &[u8; 4] = b"TTLD";
pub const MASK_MAGIC: &[u8; 4] = b"TTLM";
pub const VERSION: u32 = 1;

pub fn mask_path(path: &Path) -> PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".mask");
    PathBuf::from(p)
}

pub fn encode(ds: &PackedDataset) -> Vec<u8> {
    let mut w = Writer::new(MAGIC, VERSION);
    w.u64(ds.seq_len as u64);
    w.u64(ds.n_sequences() as u64);
    w.u64(ds.fingerprint);
    w.buf.reserve(4 * ds.total_tokens());
    for &t in ds.tokens() {
        w.u32(t);
    }
    w.buf
}

fn encode_mask(mask: &[u8]) -> Vec<u8> {
    let mut w = Writer::new(MASK_MAGIC, VERSION);
    w.u64(mask.len() as u64);
    w.buf.extend_from_slice(mask);
    w.buf
}

/// Writes the dataset and, for masked data, its sidecar; a stale sidecar is removed.
pub fn save(ds: &PackedDataset, path: &Path) -> Result<()> {
    write_atomic(path, &encode(ds))?;
    let side = mask_path(path);
    match ds.loss_mask() {
        Some(m) => write_atomic(&side, &encode_mask(m)),
        None => match std::fs::remove_file(&side) {
            Err(e) if e.kind() != std::io::ErrorKind::NotFound => Err(Error::io(&side, e)),
            _ => Ok(()),
        },
    }
}

pub fn decode(bytes: &[u8], path: &Path, mask: Option<Vec<u8>>) -> Result<PackedDataset> {
    let (mut r, version) = Reader::open(bytes, path, MAGIC)?;
    if version != VERSION {
        return Err(r.fail(format!("unsupported version {version}")));
    }
    let seq_len = r.u64()? as usize;
    let n = r.u64()? as usize;
    let fingerprint = r.u64()?;
    let count = n.checked_mul(seq_len).ok_or_else(|| r.fail("size overflow"))?;
    let raw = r.take(count.checked_mul(4).ok_or_else(|| r.fail("size overflow"))?)?;
    r.finish()?;
    let tokens = raw.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
    Ok(PackedDataset::new(seq_len, tokens, mask, fingerprint)?)
}

fn decode_mask(bytes: &[u8], path: &Path) -> Result<Vec<u8>> {
    let (mut r, version) = Reader::open(bytes, path, MASK_MAGIC)?;
    if version != VERSION {
        return Err(r.fail(format!("unsupported version {version}")));
    }
    let n = r.len(1)?;
    let mask = r.take(n)?.to_vec();
    r.finish()?;
    Ok(mask)
}

pub fn load(path: &Path) -> Result<PackedDataset> {
    let bytes = read(path)?;
    let side = mask_path(path);
    let mask = if side.exists() { Some(decode_mask(&read(&side)?, &side)?) } else { None };
    decode(&bytes, path, mask)
}

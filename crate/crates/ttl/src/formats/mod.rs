//! On-disk formats. Binary files open with a 4-byte magic and a u32 version,
//! then little-endian fields.

pub mod checkpoint;
pub mod dataset;
pub mod quantized;
pub mod telemetry_csv;
pub mod tokenizer;

/// Reads the 4-byte magic of a file, if it has one.
pub fn sniff(path: &std::path::Path) -> crate::Result<[u8; 4]> {
    use std::io::Read;
    let mut f = std::fs::File::open(path).map_err(|e| crate::Error::io(path, e))?;
    let mut magic = [0u8; 4];
    f.read_exact(&mut magic).map_err(|e| crate::Error::io(path, e))?;
    Ok(magic)
}

//! Quantized model `TTLQ`: model configuration text, tokenizer fingerprint,
//! group size, embedding flag, then one record per tensor in canonical order.
//! A record is name, storage tag (0 = 4-bit, 1 = f16), rank and dims, then
//! either `n_groups`, f32 scales, i32 zeros and packed codes, or f16 bits.

use std::path::Path;

use half::f16;
use ttl_core::inference::{QuantMatrix, QuantOptions, QuantizedModel, StoredTensor};

use crate::codec::{Reader, Writer};
use crate::config::RunConfig;
use crate::error::{read, write_atomic, Result};

pub const MAGIC: &[u8; 4] = b"TTLQ";
pub const VERSION: u32 = 1;

/// A quantized model together with the tokenizer it was trained with.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedFile {
    pub model: QuantizedModel,
    pub tokenizer_fingerprint: u64,
}

pub fn encode(f: &QuantizedFile) -> Vec<u8> {
    let q = &f.model;
    let mut w = Writer::new(MAGIC, VERSION);
    let cfg = RunConfig { name: "quantized".into(), model: q.config.clone(), train: Default::default() };
    w.str(&cfg.render());
    w.u64(f.tokenizer_fingerprint);
    w.u64(q.options.group_size as u64);
    w.u8(q.options.quantize_embeddings as u8);
    w.u64(q.tensors.len() as u64);
    for (name, t) in &q.tensors {
        w.str(name);
        let shape = t.shape();
        w.u8(matches!(t, StoredTensor::Half { .. }) as u8);
        w.u32(shape.len() as u32);
        for d in shape {
            w.u64(d as u64);
        }
        match t {
            StoredTensor::Quant(m) => {
                w.u64(m.scales.len() as u64);
                m.scales.iter().for_each(|&s| w.f32(s));
                m.zeros.iter().for_each(|&z| w.i32(z));
                w.buf.extend_from_slice(&m.codes);
            }
            StoredTensor::Half { data, .. } => {
                for x in data {
                    w.buf.extend_from_slice(&x.to_bits().to_le_bytes());
                }
            }
        }
    }
    w.buf
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<QuantizedFile> {
    let (mut r, version) = Reader::open(bytes, path, MAGIC)?;
    if version != VERSION {
        return Err(r.fail(format!("unsupported version {version}")));
    }
    let cfg = RunConfig::parse(&r.str()?).map_err(|e| r.fail(e))?;
    let tokenizer_fingerprint = r.u64()?;
    let group_size = r.u64()? as usize;
    let quantize_embeddings = r.u8()? != 0;
    let n = r.len(1)?;
    let mut tensors = Vec::with_capacity(n);
    for _ in 0..n {
        let name = r.str()?;
        let tag = r.u8()?;
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let numel: usize = shape.iter().product();
        let t = match (tag, shape.as_slice()) {
            (0, &[rows, cols]) => {
                let groups = r.len(8)?;
                let scales = (0..groups).map(|_| r.f32()).collect::<Result<Vec<_>>>()?;
                let zeros = (0..groups).map(|_| r.i32()).collect::<Result<Vec<_>>>()?;
                let codes = r.take(numel.div_ceil(2))?.to_vec();
                StoredTensor::Quant(QuantMatrix { rows, cols, group_size, scales, zeros, codes })
            }
            (1, _) => {
                let raw = r.take(numel * 2)?;
                let data = raw.chunks_exact(2).map(|c| f16::from_bits(u16::from_le_bytes([c[0], c[1]]))).collect();
                StoredTensor::Half { shape, data }
            }
            _ => return Err(r.fail(format!("tensor {name}: bad storage tag {tag} for rank {rank}"))),
        };
        tensors.push((name, t));
    }
    r.finish()?;
    let model =
        QuantizedModel { config: cfg.model, options: QuantOptions { group_size, quantize_embeddings }, tensors };
    model.validate().map_err(|e| crate::Error::format(path, e.to_string()))?;
    Ok(QuantizedFile { model, tokenizer_fingerprint })
}

pub fn save(f: &QuantizedFile, path: &Path) -> Result<()> {
    write_atomic(path, &encode(f))
}

pub fn load(path: &Path) -> Result<QuantizedFile> {
    decode(&read(path)?, path)
}

//! Corpus ingestion: filtering, tokenization with eos separators, packing
//! into fixed-length sequences, and a seeded train/eval split.

use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{bail, Result};
use crate::tokenizer::{Tokenizer, EOS};

/// Default packed sequence length.
pub const DEFAULT_SEQ_LEN: usize = 2048;
/// Default share of sequences held out for evaluation.
pub const DEFAULT_EVAL_FRACTION: f64 = 0.01;

/// Ingestion filters applied to raw documents before tokenization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DocumentFilter {
    /// Minimum length in characters.
    pub min_chars: usize,
    /// Largest tolerated share of characters that are neither alphanumeric nor whitespace.
    pub max_symbol_ratio: f64,
}

impl Default for DocumentFilter {
    fn default() -> Self {
        Self { min_chars: 1, max_symbol_ratio: 0.3 }
    }
}

impl DocumentFilter {
    pub fn accepts(&self, doc: &str) -> bool {
        let mut chars = 0usize;
        let mut symbols = 0usize;
        for c in doc.chars() {
            chars += 1;
            if !(c.is_alphanumeric() || c.is_whitespace()) {
                symbols += 1;
            }
        }
        chars >= self.min_chars && (chars == 0 || symbols as f64 <= self.max_symbol_ratio * chars as f64)
    }
}

fn eos_id(tokenizer: &Tokenizer) -> Result<u32> {
    match tokenizer.special_ids().eos {
        Some(id) => Ok(id),
        None => bail!(Config, "tokenizer has no {EOS} token"),
    }
}

/// Appends the tokens of `doc` followed by eos.
pub fn append_document(tokenizer: &Tokenizer, doc: &[u8], stream: &mut Vec<u32>) -> Result<()> {
    let eos = eos_id(tokenizer)?;
    stream.extend(tokenizer.encode(doc));
    stream.push(eos);
    Ok(())
}

/// Order-preserving concatenation of documents, each followed by eos.
pub fn tokenize_corpus<I>(tokenizer: &Tokenizer, documents: I) -> Result<Vec<u32>>
where
    I: IntoIterator,
    I::Item: AsRef<[u8]>,
{
    let mut stream = Vec::new();
    for doc in documents {
        append_document(tokenizer, doc.as_ref(), &mut stream)?;
    }
    Ok(stream)
}

/// One prompt/response pair for supervised fine-tuning.
#[derive(Debug, Clone, PartialEq)]
pub struct SftExample {
    pub prompt: String,
    pub response: String,
}

/// Token stream plus a parallel loss mask: 0 on prompt tokens, 1 on response
/// tokens and the closing eos.
pub fn tokenize_sft(tokenizer: &Tokenizer, examples: &[SftExample]) -> Result<(Vec<u32>, Vec<u8>)> {
    let eos = eos_id(tokenizer)?;
    let mut stream = Vec::new();
    let mut mask = Vec::new();
    for ex in examples {
        let prompt = tokenizer.encode_str(&ex.prompt);
        mask.resize(mask.len() + prompt.len(), 0);
        stream.extend(prompt);
        let response = tokenizer.encode_str(&ex.response);
        mask.resize(mask.len() + response.len() + 1, 1);
        stream.extend(response);
        stream.push(eos);
    }
    Ok((stream, mask))
}

/// Source bookkeeping for a packed dataset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SourceEntry {
    pub name: String,
    pub documents: u64,
    pub tokens: u64,
}

/// Fixed-length token sequences stored contiguously.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedDataset {
    pub seq_len: usize,
    tokens: Vec<u32>,
    /// Per-token loss weights (0 or 1), present for fine-tuning data.
    loss_mask: Option<Vec<u8>>,
    pub fingerprint: u64,
    pub sources: Vec<SourceEntry>,
}

impl PackedDataset {
    /// `tokens.len()` must be a multiple of `seq_len`; the mask, when given, matches it.
    pub fn new(seq_len: usize, tokens: Vec<u32>, loss_mask: Option<Vec<u8>>, fingerprint: u64) -> Result<Self> {
        if seq_len < 2 {
            bail!(Config, "sequence length must be at least 2, got {seq_len}");
        }
        if !tokens.len().is_multiple_of(seq_len) {
            bail!(Shape, "{} tokens do not fill sequences of {seq_len}", tokens.len());
        }
        if let Some(m) = &loss_mask {
            if m.len() != tokens.len() || m.iter().any(|&b| b > 1) {
                bail!(Shape, "loss mask must hold one 0/1 byte per token");
            }
        }
        Ok(Self { seq_len, tokens, loss_mask, fingerprint, sources: Vec::new() })
    }

    pub fn n_sequences(&self) -> usize {
        self.tokens.len() / self.seq_len
    }

    pub fn total_tokens(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    pub fn loss_mask(&self) -> Option<&[u8]> {
        self.loss_mask.as_deref()
    }

    pub fn sequence(&self, i: usize) -> &[u32] {
        &self.tokens[i * self.seq_len..(i + 1) * self.seq_len]
    }

    pub fn sequence_mask(&self, i: usize) -> Option<&[u8]> {
        self.loss_mask.as_ref().map(|m| &m[i * self.seq_len..(i + 1) * self.seq_len])
    }

    pub fn sequences(&self) -> impl Iterator<Item = &[u32]> {
        self.tokens.chunks_exact(self.seq_len)
    }

    /// Largest token id, if any.
    pub fn max_token(&self) -> Option<u32> {
        self.tokens.iter().copied().max()
    }

    /// Fails when any id is outside a vocabulary of `vocab_size`.
    pub fn check_vocab(&self, vocab_size: usize) -> Result<()> {
        match self.max_token() {
            Some(m) if m as usize >= vocab_size => {
                bail!(OutOfRange, "token id {m} outside vocabulary of {vocab_size}")
            }
            _ => Ok(()),
        }
    }

    /// The sequences at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Self {
        let mut tokens = Vec::with_capacity(indices.len() * self.seq_len);
        let mut mask = self.loss_mask.as_ref().map(|_| Vec::with_capacity(tokens.capacity()));
        for &i in indices {
            tokens.extend_from_slice(self.sequence(i));
            if let (Some(out), Some(m)) = (&mut mask, self.sequence_mask(i)) {
                out.extend_from_slice(m);
            }
        }
        Self {
            seq_len: self.seq_len,
            tokens,
            loss_mask: mask,
            fingerprint: self.fingerprint,
            sources: self.sources.clone(),
        }
    }
}

/// Greedy packing across document boundaries; the final partial block is
/// dropped. Returns the dataset and the number of dropped tokens.
pub fn pack(stream: &[u32], seq_len: usize, fingerprint: u64) -> Result<(PackedDataset, usize)> {
    pack_masked(stream, None, seq_len, fingerprint)
}

pub fn pack_masked(
    stream: &[u32],
    mask: Option<&[u8]>,
    seq_len: usize,
    fingerprint: u64,
) -> Result<(PackedDataset, usize)> {
    if seq_len < 2 {
        bail!(Config, "sequence length must be at least 2, got {seq_len}");
    }
    if mask.is_some_and(|m| m.len() != stream.len()) {
        bail!(Shape, "loss mask length differs from the token stream");
    }
    let kept = stream.len() / seq_len * seq_len;
    let ds = PackedDataset::new(seq_len, stream[..kept].to_vec(), mask.map(|m| m[..kept].to_vec()), fingerprint)?;
    Ok((ds, stream.len() - kept))
}

/// Seeded disjoint split with `round(fraction * n)` eval sequences. Both
/// halves keep the original relative order.
pub fn split_eval(dataset: &PackedDataset, fraction: f64, seed: u64) -> Result<(PackedDataset, PackedDataset)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        bail!(Domain, "eval fraction must lie in (0, 1), got {fraction}");
    }
    let n = dataset.n_sequences();
    let n_eval = (fraction * n as f64).round() as usize;
    if n_eval == 0 || n_eval >= n {
        bail!(Empty, "{n} sequences cannot be split {fraction} into non-empty train and eval sets");
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut eval: Vec<usize> = order[..n_eval].to_vec();
    let mut train: Vec<usize> = order[n_eval..].to_vec();
    eval.sort_unstable();
    train.sort_unstable();
    Ok((dataset.select(&train), dataset.select(&eval)))
}

//! Byte-level BPE with byte fallback.
//!
//! Ids are laid out as special tokens first, then the 256 single-byte tokens,
//! then one token per learned merge in priority order. Text is cut into chunks
//! that start at each space byte, so word-initial tokens carry the leading
//! space and decoding is plain concatenation.

mod fertility;
mod train;

use alloc::collections::BinaryHeap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::cmp::Reverse;

use hashbrown::HashMap;
use sha2::{Digest, Sha256};

use crate::error::{bail, Result};

pub use fertility::{benchmark_fertility, EfficiencyReport, EfficiencyRow, FertilitySource};
pub use train::{train_bpe, BpeTrainer, TrainerConfig};

pub const PAD: &str = "<pad>";
pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
pub const UNK: &str = "<unk>";

/// Special tokens used when none are given.
pub fn default_specials() -> Vec<String> {
    [PAD, BOS, EOS, UNK].iter().map(|s| s.to_string()).collect()
}

/// Ids of the recognised special tokens, when present.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SpecialIds {
    pub pad: Option<u32>,
    pub bos: Option<u32>,
    pub eos: Option<u32>,
    pub unk: Option<u32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tokenizer {
    specials: Vec<String>,
    vocab: Vec<Vec<u8>>,
    merges: Vec<(u32, u32)>,
    /// pair -> (rank, merged id)
    ranks: HashMap<(u32, u32), (u32, u32)>,
}

/// Splits `text` into chunks starting at each space byte. Merges never cross chunks.
pub fn chunks(text: &[u8]) -> impl Iterator<Item = &[u8]> {
    let mut start = 0;
    let mut done = text.is_empty();
    core::iter::from_fn(move || {
        if done {
            return None;
        }
        let end = text[start + 1..].iter().position(|&b| b == b' ').map_or(text.len(), |p| start + 1 + p);
        let chunk = &text[start..end];
        start = end;
        done = end == text.len();
        Some(chunk)
    })
}

impl Tokenizer {
    /// A tokenizer with no merges: every byte is its own token.
    pub fn byte_level(specials: Vec<String>) -> Result<Self> {
        Self::from_merges(specials, Vec::new())
    }

    /// Rebuilds the vocabulary from specials and merges, checking that each merge
    /// only references earlier ids.
    pub fn from_merges(specials: Vec<String>, merges: Vec<(u32, u32)>) -> Result<Self> {
        for (i, s) in specials.iter().enumerate() {
            if s.is_empty() || specials[..i].contains(s) {
                bail!(Config, "special token {s:?} is empty or repeated");
            }
        }
        let mut vocab: Vec<Vec<u8>> = specials.iter().map(|s| s.as_bytes().to_vec()).collect();
        vocab.extend((0..=255u8).map(|b| alloc::vec![b]));
        let mut ranks = HashMap::with_capacity(merges.len());
        let first_byte = specials.len() as u32;
        for (rank, &(l, r)) in merges.iter().enumerate() {
            let id = vocab.len() as u32;
            if l < first_byte || r < first_byte || l >= id || r >= id {
                bail!(Config, "merge {rank} ({l}, {r}) references an id not defined before {id}");
            }
            if ranks.insert((l, r), (rank as u32, id)).is_some() {
                bail!(Config, "merge {rank} ({l}, {r}) is repeated");
            }
            let mut bytes = vocab[l as usize].clone();
            bytes.extend_from_slice(&vocab[r as usize]);
            vocab.push(bytes);
        }
        Ok(Self { specials, vocab, merges, ranks })
    }

    /// Like [`Tokenizer::from_merges`], additionally checking an explicit vocabulary.
    pub fn from_parts(specials: Vec<String>, vocab: &[Vec<u8>], merges: Vec<(u32, u32)>) -> Result<Self> {
        let tok = Self::from_merges(specials, merges)?;
        if tok.vocab != vocab {
            bail!(Config, "vocabulary does not match the merge list");
        }
        Ok(tok)
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn vocab(&self) -> &[Vec<u8>] {
        &self.vocab
    }

    pub fn merges(&self) -> &[(u32, u32)] {
        &self.merges
    }

    pub fn specials(&self) -> &[String] {
        &self.specials
    }

    pub fn special_id(&self, name: &str) -> Option<u32> {
        self.specials.iter().position(|s| s == name).map(|i| i as u32)
    }

    pub fn special_ids(&self) -> SpecialIds {
        SpecialIds {
            pad: self.special_id(PAD),
            bos: self.special_id(BOS),
            eos: self.special_id(EOS),
            unk: self.special_id(UNK),
        }
    }

    pub fn is_special(&self, id: u32) -> bool {
        (id as usize) < self.specials.len()
    }

    /// Id of a single byte token.
    pub fn byte_id(&self, byte: u8) -> u32 {
        self.specials.len() as u32 + byte as u32
    }

    /// Token bytes of `id`.
    pub fn token(&self, id: u32) -> Option<&[u8]> {
        self.vocab.get(id as usize).map(Vec::as_slice)
    }

    /// A tokenizer keeping only the first `n` merges.
    pub fn truncated(&self, n: usize) -> Self {
        let merges = self.merges[..n.min(self.merges.len())].to_vec();
        Self::from_merges(self.specials.clone(), merges).expect("prefix of a valid merge list")
    }

    /// Encodes raw bytes. Special-token text is treated as ordinary bytes.
    pub fn encode(&self, text: &[u8]) -> Vec<u32> {
        let mut out = Vec::with_capacity(text.len() / 2);
        for chunk in chunks(text) {
            self.encode_chunk(chunk, &mut out);
        }
        out
    }

    pub fn encode_str(&self, text: &str) -> Vec<u32> {
        self.encode(text.as_bytes())
    }

    /// Applies merges to one chunk, lowest rank first and leftmost among equal ranks.
    pub(crate) fn encode_chunk(&self, chunk: &[u8], out: &mut Vec<u32>) {
        let n = chunk.len();
        let mut ids: Vec<u32> = chunk.iter().map(|&b| self.byte_id(b)).collect();
        if self.merges.is_empty() || n < 2 {
            out.extend(ids);
            return;
        }
        // Doubly linked list over positions; `usize::MAX` marks no neighbour.
        let mut next: Vec<usize> = (1..=n).map(|i| if i == n { usize::MAX } else { i }).collect();
        let mut prev: Vec<usize> = (0..n).map(|i| i.wrapping_sub(1)).collect();
        let mut alive = alloc::vec![true; n];
        let mut heap = BinaryHeap::new();
        let push = |heap: &mut BinaryHeap<_>, ids: &[u32], left: usize, right: usize| {
            if let Some(&(rank, _)) = self.ranks.get(&(ids[left], ids[right])) {
                heap.push(Reverse((rank, left, right)));
            }
        };
        for i in 0..n - 1 {
            push(&mut heap, &ids, i, i + 1);
        }
        while let Some(Reverse((rank, left, right))) = heap.pop() {
            if !alive[left] || !alive[right] || next[left] != right {
                continue;
            }
            let Some(&(current, merged)) = self.ranks.get(&(ids[left], ids[right])) else {
                continue;
            };
            if current != rank {
                continue;
            }
            ids[left] = merged;
            alive[right] = false;
            let after = next[right];
            next[left] = after;
            if after != usize::MAX {
                prev[after] = left;
                push(&mut heap, &ids, left, after);
            }
            if prev[left] != usize::MAX {
                push(&mut heap, &ids, prev[left], left);
            }
        }
        out.extend((0..n).filter(|&i| alive[i]).map(|i| ids[i]));
    }

    /// Concatenates token bytes. Special tokens are dropped when `skip_specials`.
    pub fn decode(&self, ids: &[u32], skip_specials: bool) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(ids.len() * 3);
        for &id in ids {
            let Some(bytes) = self.token(id) else {
                bail!(Decode, "token id {id} outside vocabulary of {}", self.vocab.len());
            };
            if !(skip_specials && self.is_special(id)) {
                out.extend_from_slice(bytes);
            }
        }
        Ok(out)
    }

    /// Decodes to UTF-8 text, failing on invalid UTF-8.
    pub fn decode_str(&self, ids: &[u32], skip_specials: bool) -> Result<String> {
        String::from_utf8(self.decode(ids, skip_specials)?)
            .map_err(|e| crate::Error::Decode(alloc::format!("invalid UTF-8: {e}")))
    }

    /// First 8 bytes (little-endian) of SHA-256 over specials, vocabulary and merges.
    pub fn fingerprint(&self) -> u64 {
        let mut h = Sha256::new();
        h.update(b"ttl-bpe-v1");
        for s in &self.specials {
            h.update((s.len() as u32).to_le_bytes());
            h.update(s.as_bytes());
        }
        h.update((self.vocab.len() as u32).to_le_bytes());
        for t in &self.vocab {
            h.update((t.len() as u32).to_le_bytes());
            h.update(t);
        }
        for &(l, r) in &self.merges {
            h.update(l.to_le_bytes());
            h.update(r.to_le_bytes());
        }
        let digest = h.finalize();
        u64::from_le_bytes(digest[..8].try_into().expect("digest is 32 bytes"))
    }
}

use alloc::collections::{BTreeMap, BinaryHeap};
use alloc::string::String;
use alloc::vec::Vec;
use core::cmp::Ordering;

use hashbrown::HashMap;

use super::{chunks, default_specials, Tokenizer};
use crate::error::{bail, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainerConfig {
    /// Target vocabulary size including specials and the 256 byte tokens.
    pub vocab_size: usize,
    pub specials: Vec<String>,
    /// Pairs seen fewer times than this are never merged.
    pub min_frequency: u64,
    /// Distinct chunks kept in the frequency table; exceeding it drops the
    /// rarer half.
    pub max_words: usize,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self { vocab_size: 32_000, specials: default_specials(), min_frequency: 2, max_words: 1 << 22 }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        let floor = 256 + self.specials.len();
        if self.vocab_size < floor {
            bail!(Config, "vocab size {} is below {floor} (256 bytes + specials)", self.vocab_size);
        }
        if self.max_words < 2 {
            bail!(Config, "word table cap must be at least 2");
        }
        Ok(())
    }
}

/// Streaming trainer: feed documents, then [`BpeTrainer::finish`].
#[derive(Debug, Clone)]
pub struct BpeTrainer {
    config: TrainerConfig,
    words: BTreeMap<Vec<u8>, u64>,
    bytes_seen: u64,
}

impl BpeTrainer {
    pub fn new(config: TrainerConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config, words: BTreeMap::new(), bytes_seen: 0 })
    }

    /// Adds one document. Chunks never span documents.
    pub fn feed(&mut self, doc: &[u8]) {
        self.bytes_seen += doc.len() as u64;
        for chunk in chunks(doc) {
            *self.words.entry(chunk.to_vec()).or_default() += 1;
        }
        if self.words.len() > self.config.max_words {
            self.prune();
        }
    }

    /// Keeps the most frequent half of the table; ties keep the smaller bytes.
    fn prune(&mut self) {
        let mut entries: Vec<(Vec<u8>, u64)> = core::mem::take(&mut self.words).into_iter().collect();
        entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        entries.truncate(self.config.max_words / 2);
        self.words = entries.into_iter().collect();
    }

    pub fn distinct_words(&self) -> usize {
        self.words.len()
    }

    pub fn finish(self) -> Result<Tokenizer> {
        if self.bytes_seen == 0 {
            bail!(Empty, "tokenizer training corpus is empty");
        }
        let merges = learn_merges(&self.config, self.words);
        Tokenizer::from_merges(self.config.specials, merges)
    }
}

/// Trains on every document of `corpus`.
pub fn train_bpe<I>(corpus: I, config: TrainerConfig) -> Result<Tokenizer>
where
    I: IntoIterator,
    I::Item: AsRef<[u8]>,
{
    let mut trainer = BpeTrainer::new(config)?;
    for doc in corpus {
        trainer.feed(doc.as_ref());
    }
    trainer.finish()
}

/// Highest count first; among equal counts the lexicographically smaller
/// (left bytes, right bytes) comes first.
#[derive(Debug, PartialEq, Eq)]
struct Candidate {
    count: u64,
    left: Vec<u8>,
    right: Vec<u8>,
    pair: (u32, u32),
}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.count.cmp(&other.count).then_with(|| (&other.left, &other.right).cmp(&(&self.left, &self.right)))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

type Pair = (u32, u32);

fn learn_merges(config: &TrainerConfig, table: BTreeMap<Vec<u8>, u64>) -> Vec<Pair> {
    let base = config.specials.len() as u32;
    let mut vocab: Vec<Vec<u8>> = config.specials.iter().map(|s| s.as_bytes().to_vec()).collect();
    vocab.extend((0..=255u8).map(|b| alloc::vec![b]));

    let mut words: Vec<(Vec<u32>, u64)> =
        table.into_iter().map(|(w, f)| (w.iter().map(|&b| base + b as u32).collect(), f)).collect();
    let mut counts: HashMap<Pair, u64> = HashMap::new();
    let mut index: HashMap<Pair, Vec<usize>> = HashMap::new();
    for (wi, (sym, f)) in words.iter().enumerate() {
        for p in sym.windows(2) {
            let pair = (p[0], p[1]);
            *counts.entry(pair).or_default() += f;
            let list = index.entry(pair).or_default();
            if list.last() != Some(&wi) {
                list.push(wi);
            }
        }
    }
    let candidate = |vocab: &[Vec<u8>], pair: Pair, count: u64| Candidate {
        count,
        left: vocab[pair.0 as usize].clone(),
        right: vocab[pair.1 as usize].clone(),
        pair,
    };
    let mut heap: BinaryHeap<Candidate> = counts.iter().map(|(&p, &c)| candidate(&vocab, p, c)).collect();

    let mut merges = Vec::new();
    while vocab.len() < config.vocab_size {
        let Some(top) = heap.pop() else { break };
        if counts.get(&top.pair) != Some(&top.count) {
            continue;
        }
        if top.count < config.min_frequency.max(1) {
            break;
        }
        let (l, r) = top.pair;
        let new_id = vocab.len() as u32;
        let mut bytes = top.left;
        bytes.extend_from_slice(&top.right);
        vocab.push(bytes);
        merges.push(top.pair);

        // pair -> count before this merge, for every pair whose count moved
        let mut touched: HashMap<Pair, u64> = HashMap::new();
        for wi in index.remove(&top.pair).unwrap_or_default() {
            let (sym, f) = &mut words[wi];
            let f = *f;
            if !sym.windows(2).any(|p| p[0] == l && p[1] == r) {
                continue;
            }
            let mut merged = Vec::with_capacity(sym.len());
            let mut i = 0;
            while i < sym.len() {
                if i + 1 < sym.len() && sym[i] == l && sym[i + 1] == r {
                    merged.push(new_id);
                    i += 2;
                } else {
                    merged.push(sym[i]);
                    i += 1;
                }
            }
            for p in sym.windows(2) {
                let pair = (p[0], p[1]);
                let c = counts.get_mut(&pair).expect("counted pair");
                touched.entry(pair).or_insert(*c);
                *c -= f;
            }
            for p in merged.windows(2) {
                let pair = (p[0], p[1]);
                let c = counts.entry(pair).or_default();
                touched.entry(pair).or_insert(*c);
                *c += f;
                if pair.0 == new_id || pair.1 == new_id {
                    let list = index.entry(pair).or_default();
                    if list.last() != Some(&wi) {
                        list.push(wi);
                    }
                }
            }
            *sym = merged;
        }
        let mut touched: Vec<(Pair, u64)> = touched.into_iter().collect();
        touched.sort_unstable();
        for (pair, before) in touched {
            let now = counts.get(&pair).copied().unwrap_or(0);
            if now == 0 {
                counts.remove(&pair);
            } else if now != before {
                heap.push(candidate(&vocab, pair, now));
            }
        }
    }
    merges
}

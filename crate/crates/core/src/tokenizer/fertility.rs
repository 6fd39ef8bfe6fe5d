use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt::Write;

use super::Tokenizer;
use crate::error::{bail, Result};

/// A tokenizer to measure, or counts measured elsewhere.
#[derive(Debug, Clone, Copy)]
pub enum FertilitySource<'a> {
    Model { name: &'a str, tokenizer: &'a Tokenizer },
    Fixture { name: &'a str, tokens: u64, vocab_size: u64, words: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct EfficiencyRow {
    pub name: String,
    pub tokens: u64,
    pub vocab_size: u64,
    pub words: u64,
}

impl EfficiencyRow {
    /// Tokens per word.
    pub fn fertility(&self) -> f64 {
        self.tokens as f64 / self.words as f64
    }
}

/// Rows sorted ascending by token count, ties by name.
#[derive(Debug, Clone, PartialEq)]
pub struct EfficiencyReport {
    pub rows: Vec<EfficiencyRow>,
    /// Words in the measured list, when one was given.
    pub word_count: Option<u64>,
}

/// Encodes each whitespace-separated word of `wordlist` on its own, in its
/// word-initial form (leading space marker), and merges the results with
/// fixture rows.
pub fn benchmark_fertility(sources: &[FertilitySource<'_>], wordlist: Option<&str>) -> Result<EfficiencyReport> {
    let words: Option<Vec<&str>> = wordlist.map(|w| w.split_whitespace().collect());
    if let Some(w) = &words {
        if w.is_empty() {
            bail!(Empty, "word list has no words");
        }
    }
    if sources.is_empty() {
        bail!(Empty, "no tokenizers or fixture rows to compare");
    }
    let mut rows = Vec::with_capacity(sources.len());
    for source in sources {
        rows.push(match *source {
            FertilitySource::Model { name, tokenizer } => {
                let Some(words) = &words else {
                    bail!(Empty, "tokenizer {name} needs a word list");
                };
                let mut ids = Vec::new();
                let mut marked = Vec::new();
                let mut tokens = 0u64;
                for w in words {
                    ids.clear();
                    marked.clear();
                    marked.push(b' ');
                    marked.extend_from_slice(w.as_bytes());
                    tokenizer.encode_chunk(&marked, &mut ids);
                    tokens += ids.len() as u64;
                }
                EfficiencyRow {
                    name: name.into(),
                    tokens,
                    vocab_size: tokenizer.vocab_size() as u64,
                    words: words.len() as u64,
                }
            }
            FertilitySource::Fixture { name, tokens, vocab_size, words } => {
                if words == 0 {
                    bail!(Empty, "fixture row {name} has zero words");
                }
                EfficiencyRow { name: name.into(), tokens, vocab_size, words }
            }
        });
    }
    rows.sort_by(|a, b| a.tokens.cmp(&b.tokens).then_with(|| a.name.cmp(&b.name)));
    Ok(EfficiencyReport { rows, word_count: words.map(|w| w.len() as u64) })
}

fn thousands(n: u64) -> String {
    let digits = format!("{n}");
    let mut out = String::new();
    for (i, c) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i) % 3 == 0 {
            out.push(',');
        }
        out.push(c);
    }
    out
}

impl EfficiencyReport {
    /// Plain-text table; fertility to four decimals.
    pub fn render(&self) -> String {
        let width = self.rows.iter().map(|r| r.name.len()).max().unwrap_or(0).max(9);
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<width$}  {:>10}  {:>10}  {:>7}  {:>9}",
            "tokenizer", "tokens", "vocab", "words", "fertility"
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<width$}  {:>10}  {:>10}  {:>7}  {:>9.4}",
                r.name,
                thousands(r.tokens),
                thousands(r.vocab_size),
                thousands(r.words),
                r.fertility()
            );
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn single_letter_words() {
        let t = Tokenizer::from_merges(vec![], vec![(b' ' as u32, b'a' as u32)]).unwrap();
        let r = benchmark_fertility(&[FertilitySource::Model { name: "t", tokenizer: &t }], Some("a a a")).unwrap();
        assert_eq!(r.rows[0].tokens, 3);
        assert_eq!(r.rows[0].fertility(), 1.0);
        assert_eq!(r.word_count, Some(3));
    }

    #[test]
    fn fixture_rows_sort_and_render() {
        let rows = [
            FertilitySource::Fixture { name: "b", tokens: 11_006, vocab_size: 29_794, words: 7_400 },
            FertilitySource::Fixture { name: "a", tokens: 9_937, vocab_size: 32_000, words: 7_400 },
        ];
        let r = benchmark_fertility(&rows, None).unwrap();
        assert_eq!(r.rows[0].name, "a");
        let text = r.render();
        assert!(text.contains("9,937"), "{text}");
        assert!(text.contains("1.3428"), "{text}");
        assert!(benchmark_fertility(&rows, Some("  \n")).is_err());
        assert!(benchmark_fertility(&[], None).is_err());
        assert_eq!(thousands(32_000), "32,000");
        assert_eq!(thousands(999), "999");
    }
}

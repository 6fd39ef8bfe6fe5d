//! Text tokenizer file:
//!
//! ```text
//! ttl-bpe 1 <vocab_size>
//! specials <n>
//! <id> <hex bytes>        one line per vocabulary entry, specials first
//! merges <m>
//! <left id> <right id>    in priority order
//! ```

use std::fmt::Write as _;
use std::path::Path;

use ttl_core::tokenizer::Tokenizer;

use crate::error::{read_text, write_atomic, Error, Result};

pub const MAGIC: &str = "ttl-bpe";
pub const VERSION: u32 = 1;

pub fn render(tok: &Tokenizer) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{MAGIC} {VERSION} {}", tok.vocab_size());
    let _ = writeln!(out, "specials {}", tok.specials().len());
    for (id, bytes) in tok.vocab().iter().enumerate() {
        let hex: String = bytes.iter().map(|b| format!("{b:02x}")).collect();
        let _ = writeln!(out, "{id} {hex}");
    }
    let _ = writeln!(out, "merges {}", tok.merges().len());
    for (l, r) in tok.merges() {
        let _ = writeln!(out, "{l} {r}");
    }
    out
}

fn unhex(s: &str) -> Option<Vec<u8>> {
    if !s.len().is_multiple_of(2) {
        return None;
    }
    (0..s.len()).step_by(2).map(|i| u8::from_str_radix(s.get(i..i + 2)?, 16).ok()).collect()
}

pub fn parse(text: &str) -> std::result::Result<Tokenizer, String> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let mut next = |what: &str| lines.next().ok_or_else(|| format!("missing {what}"));
    let (_, header) = next("header")?;
    let h: Vec<&str> = header.split(' ').collect();
    if h.len() != 3 || h[0] != MAGIC {
        return Err("not a tokenizer file".into());
    }
    if h[1] != VERSION.to_string() {
        return Err(format!("unsupported version {}", h[1]));
    }
    let vocab_size: usize = h[2].parse().map_err(|_| "bad vocabulary size")?;
    let count = |line: &str, key: &str| -> std::result::Result<usize, String> {
        line.strip_prefix(key)
            .and_then(|n| n.strip_prefix(' '))
            .and_then(|n| n.parse().ok())
            .ok_or_else(|| format!("expected `{key} <n>`"))
    };
    let n_specials = count(next("specials")?.1, "specials")?;
    let mut vocab = Vec::with_capacity(vocab_size);
    for id in 0..vocab_size {
        let (ln, line) = next("vocabulary entry")?;
        let (i, hex) = line.split_once(' ').ok_or_else(|| format!("line {ln}: expected `<id> <hex>`"))?;
        if i.parse::<usize>().ok() != Some(id) {
            return Err(format!("line {ln}: expected id {id}"));
        }
        vocab.push(unhex(hex).ok_or_else(|| format!("line {ln}: bad hex"))?);
    }
    if n_specials > vocab.len() {
        return Err("more specials than vocabulary entries".into());
    }
    let specials = vocab[..n_specials]
        .iter()
        .map(|b| String::from_utf8(b.clone()).map_err(|_| "special token is not UTF-8".to_string()))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let n_merges = count(next("merges")?.1, "merges")?;
    let mut merges = Vec::with_capacity(n_merges);
    for _ in 0..n_merges {
        let (ln, line) = next("merge")?;
        let pair = line
            .split_once(' ')
            .and_then(|(l, r)| Some((l.parse().ok()?, r.parse().ok()?)))
            .ok_or_else(|| format!("line {ln}: expected `<left> <right>`"))?;
        merges.push(pair);
    }
    if let Some((ln, extra)) = lines.find(|(_, l)| !l.is_empty()) {
        return Err(format!("line {ln}: unexpected {extra:?}"));
    }
    Tokenizer::from_parts(specials, &vocab, merges).map_err(|e| e.to_string())
}

pub fn save(tok: &Tokenizer, path: &Path) -> Result<()> {
    write_atomic(path, render(tok).as_bytes())
}

pub fn load(path: &Path) -> Result<Tokenizer> {
    parse(&read_text(path)?).map_err(|e| Error::format(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ttl_core::tokenizer::{default_specials, train_bpe, TrainerConfig};

    #[test]
    fn round_trip() {
        let corpus = ["o rato roeu a roupa do rei de roma", "the quick brown fox"];
        let cfg = TrainerConfig { vocab_size: 300, ..TrainerConfig::default() };
        let tok = train_bpe(corpus.iter().map(|s| s.as_bytes()), cfg).unwrap();
        let text = render(&tok);
        let back = parse(&text).unwrap();
        assert_eq!(back.fingerprint(), tok.fingerprint());
        assert_eq!(render(&back), text);
        assert!(text.starts_with(&format!("ttl-bpe 1 {}\nspecials 4\n0 3c7061643e\n", tok.vocab_size())));
        assert_eq!(default_specials().len(), 4);
    }

    #[test]
    fn rejects_damage() {
        let tok = ttl_core::tokenizer::Tokenizer::byte_level(default_specials()).unwrap();
        let text = render(&tok);
        assert!(parse(&text.replace("ttl-bpe 1", "ttl-bpe 2")).is_err());
        assert!(parse(&text.replace("\n4 00\n", "\n4 0g\n")).is_err());
        assert!(parse(&format!("{text}junk\n")).is_err());
        assert!(parse(&text.replace("merges 0", "merges 1\n4 4")).is_err());
        assert!(parse(&text.replace("merges 0", "merges 1\n4 999")).is_err());
    }
}

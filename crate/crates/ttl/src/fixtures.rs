//! Externally measured tokenizer counts: CSV `name,tokens,vocab_size,words`.

use std::path::Path;

use crate::error::{read, Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FixtureRow {
    pub name: String,
    pub tokens: u64,
    pub vocab_size: u64,
    pub words: u64,
}

pub fn parse_efficiency(bytes: &[u8], path: &Path) -> Result<Vec<FixtureRow>> {
    let fail = |reason: String| Error::format(path, reason);
    let mut rdr = csv::Reader::from_reader(bytes);
    let headers = rdr.headers().map_err(|e| fail(e.to_string()))?.clone();
    let want = ["name", "tokens", "vocab_size", "words"];
    if headers.iter().map(str::trim).ne(want) {
        return Err(fail(format!("expected columns {want:?}")));
    }
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| fail(e.to_string()))?;
        let num = |c: usize| -> Result<u64> {
            let s = rec[c].trim().replace(',', "");
            s.parse().map_err(|_| fail(format!("line {}: bad {} {s:?}", i + 2, want[c])))
        };
        rows.push(FixtureRow { name: rec[0].trim().to_string(), tokens: num(1)?, vocab_size: num(2)?, words: num(3)? });
    }
    Ok(rows)
}

pub fn load_efficiency(path: &Path) -> Result<Vec<FixtureRow>> {
    parse_efficiency(&read(path)?, path)
}

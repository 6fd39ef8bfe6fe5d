//! BPE trainer and encoder against brute-force oracles.

use proptest::prelude::*;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use ttl_core::tokenizer::{
    benchmark_fertility, chunks, default_specials, train_bpe, FertilitySource, Tokenizer, TrainerConfig,
};

/// Recounts every pair from scratch at each step.
fn oracle_merges(corpus: &[&[u8]], vocab_size: usize, min_frequency: u64) -> Vec<(u32, u32)> {
    let mut vocab: Vec<Vec<u8>> = (0..=255u8).map(|b| vec![b]).collect();
    let mut words: Vec<Vec<u32>> =
        corpus.iter().flat_map(|d| chunks(d)).map(|c| c.iter().map(|&b| b as u32).collect()).collect();
    let mut merges = Vec::new();
    while vocab.len() < vocab_size {
        let mut counts: BTreeMap<(u32, u32), u64> = BTreeMap::new();
        for w in &words {
            for p in w.windows(2) {
                *counts.entry((p[0], p[1])).or_default() += 1;
            }
        }
        let best = counts.iter().max_by(|a, b| {
            a.1.cmp(b.1).then_with(|| {
                let ka = (&vocab[a.0 .0 as usize], &vocab[a.0 .1 as usize]);
                let kb = (&vocab[b.0 .0 as usize], &vocab[b.0 .1 as usize]);
                kb.cmp(&ka)
            })
        });
        let Some((&(l, r), &c)) = best else { break };
        if c < min_frequency {
            break;
        }
        let id = vocab.len() as u32;
        vocab.push([vocab[l as usize].clone(), vocab[r as usize].clone()].concat());
        merges.push((l, r));
        for w in &mut words {
            *w = apply_merge(w, (l, r), id);
        }
    }
    merges
}

fn apply_merge(w: &[u32], (l, r): (u32, u32), id: u32) -> Vec<u32> {
    let mut out = Vec::with_capacity(w.len());
    let mut i = 0;
    while i < w.len() {
        if i + 1 < w.len() && w[i] == l && w[i + 1] == r {
            out.push(id);
            i += 2;
        } else {
            out.push(w[i]);
            i += 1;
        }
    }
    out
}

/// Applies each merge, in rank order, across every chunk.
fn oracle_encode(t: &Tokenizer, text: &[u8]) -> Vec<u32> {
    let base = t.specials().len() as u32;
    let mut out = Vec::new();
    for chunk in chunks(text) {
        let mut w: Vec<u32> = chunk.iter().map(|&b| base + b as u32).collect();
        for (rank, &pair) in t.merges().iter().enumerate() {
            w = apply_merge(&w, pair, base + 256 + rank as u32);
        }
        out.extend(w);
    }
    out
}

const MULTILINGUAL: &str = "O rato roeu a roupa do rei de Roma. Ação, coração, pão e mãe. \
    Der Bär läuft über die Straße. Ça va très bien, merci! Быстрая коричневая лиса. \
    素早い茶色の狐が怠け者の犬を飛び越える。 快速的棕色狐狸。 🦀🚀 👩‍👩‍👧 العربية हिन्दी ελληνικά \
    \t tabs\r\nand\u{0}nulls \u{FEFF} zero\u{200B}width";

fn portuguese_corpus(rng: &mut ChaCha8Rng, words: usize) -> String {
    let vocab = [
        "de",
        "que",
        "não",
        "uma",
        "para",
        "com",
        "como",
        "mais",
        "também",
        "ação",
        "informação",
        "coração",
        "brasileiro",
        "português",
        "linguagem",
        "modelo",
        "treinamento",
        "pequeno",
        "eficiente",
        "dados",
    ];
    (0..words).map(|_| vocab[rng.random_range(0..vocab.len())]).collect::<Vec<_>>().join(" ")
}

#[test]
fn trainer_matches_brute_force_on_text() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let corpus = portuguese_corpus(&mut rng, 400);
    let docs: Vec<&[u8]> = corpus.as_bytes().chunks(97).collect();
    let cfg = TrainerConfig { vocab_size: 400, specials: vec![], ..TrainerConfig::default() };
    let t = train_bpe(&docs, cfg).unwrap();
    assert_eq!(t.merges(), oracle_merges(&docs, 400, 2).as_slice());
    assert!(t.merges().len() > 40);
}

#[test]
fn round_trip_one_megabyte_of_random_bytes() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let corpus = portuguese_corpus(&mut rng, 5000);
    let t = train_bpe([corpus.as_bytes()], TrainerConfig { vocab_size: 600, ..TrainerConfig::default() }).unwrap();
    let mut bytes = vec![0u8; 1 << 20];
    rng.fill_bytes(&mut bytes);
    let ids = t.encode(&bytes);
    assert_eq!(t.decode(&ids, false).unwrap(), bytes);
    let text = MULTILINGUAL.repeat(20);
    let ids = t.encode_str(&text);
    assert_eq!(t.decode_str(&ids, true).unwrap(), text);
    assert_eq!(ids, oracle_encode(&t, text.as_bytes()));
}

#[test]
fn unseen_characters_fall_back_to_bytes() {
    let t = train_bpe(["hello world hello world hello"], TrainerConfig { vocab_size: 300, ..TrainerConfig::default() })
        .unwrap();
    assert!(!t.merges().is_empty());
    let text = "日本語ñ€";
    let ids = t.encode_str(text);
    assert_eq!(ids.len(), text.len());
    assert!(ids.iter().zip(text.bytes()).all(|(&id, b)| id == t.byte_id(b)));
}

#[test]
fn fertility_beats_byte_baseline_on_held_out_text() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let train = portuguese_corpus(&mut rng, 3000);
    let held_out = portuguese_corpus(&mut rng, 500);
    let t = train_bpe([train.as_bytes()], TrainerConfig { vocab_size: 500, ..TrainerConfig::default() }).unwrap();
    let bytes = Tokenizer::byte_level(default_specials()).unwrap();
    let report = benchmark_fertility(
        &[
            FertilitySource::Model { name: "bpe", tokenizer: &t },
            FertilitySource::Model { name: "bytes", tokenizer: &bytes },
        ],
        Some(&held_out),
    )
    .unwrap();
    assert_eq!(report.rows[0].name, "bpe");
    assert!(report.rows[0].fertility() < report.rows[1].fertility());
    assert!(report.rows[0].fertility() < 1.5, "{}", report.render());
}

fn small_corpus() -> impl Strategy<Value = Vec<Vec<u8>>> {
    let alphabet = prop::sample::select(vec![b'a', b'b', b'c', b' ', 0xc3, 0xa7]);
    prop::collection::vec(prop::collection::vec(alphabet, 0..40), 1..6)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn trainer_matches_brute_force(docs in small_corpus(), extra in 0usize..30, minf in 1u64..3) {
        prop_assume!(docs.iter().any(|d| !d.is_empty()));
        let refs: Vec<&[u8]> = docs.iter().map(Vec::as_slice).collect();
        let cfg = TrainerConfig { vocab_size: 256 + extra, specials: vec![], min_frequency: minf, ..TrainerConfig::default() };
        let t = train_bpe(&refs, cfg).unwrap();
        let want = oracle_merges(&refs, 256 + extra, minf);
        prop_assert_eq!(t.merges(), want.as_slice());
    }

    #[test]
    fn round_trip_random_bytes(train in small_corpus(), text in prop::collection::vec(any::<u8>(), 0..300)) {
        prop_assume!(train.iter().any(|d| !d.is_empty()));
        let t = train_bpe(&train, TrainerConfig { vocab_size: 280, min_frequency: 1, ..TrainerConfig::default() }).unwrap();
        let ids = t.encode(&text);
        prop_assert_eq!(t.decode(&ids, false).unwrap(), text.clone());
        prop_assert_eq!(ids, oracle_encode(&t, &text));
    }

    #[test]
    fn round_trip_unicode(text in "\\PC{0,200}") {
        let t = train_bpe([MULTILINGUAL], TrainerConfig { vocab_size: 320, ..TrainerConfig::default() }).unwrap();
        prop_assert_eq!(t.decode_str(&t.encode_str(&text), false).unwrap(), text);
    }

    /// One more learned merge never lengthens the training corpus encoding.
    #[test]
    fn merges_are_prefix_stable(docs in small_corpus()) {
        prop_assume!(docs.iter().any(|d| !d.is_empty()));
        let t = train_bpe(&docs, TrainerConfig { vocab_size: 300, min_frequency: 1, ..TrainerConfig::default() }).unwrap();
        let total = |tok: &Tokenizer| docs.iter().map(|d| tok.encode(d).len()).sum::<usize>();
        let mut last = total(&t.truncated(0));
        for k in 1..=t.merges().len() {
            let now = total(&t.truncated(k));
            prop_assert!(now <= last, "merge {} raised {} -> {}", k, last, now);
            last = now;
        }
    }
}

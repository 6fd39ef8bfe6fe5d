//! The command line, driven in-process.

use std::path::{Path, PathBuf};

use ttl::manifest::{DirLock, RunManifest};

struct Run {
    code: i32,
    out: String,
    err: String,
}

fn ttl(args: &[&str]) -> Run {
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let argv = std::iter::once("ttl").chain(args.iter().copied());
    let code = ttl::cli::run(argv, &mut out, &mut err);
    Run { code, out: String::from_utf8(out).unwrap(), err: String::from_utf8(err).unwrap() }
}

fn ok(args: &[&str]) -> String {
    let r = ttl(args);
    assert_eq!(r.code, 0, "{args:?}\nstdout: {}\nstderr: {}", r.out, r.err);
    r.out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

#[test]
fn plan_reports_the_budget() {
    let out = ok(&["plan", "--n-params", "160e6"]);
    assert!(out.contains("optimal_tokens=3.2e9"), "{out}");
    assert!(out.contains("3,200,000,000"));
    let out = ok(&["plan", "--n-params", "160e6", "--unique-tokens", "500e6"]);
    assert!(out.contains("epoch_warning=true"), "{out}");
    assert!(out.contains("epochs=6.4"));
    assert_eq!(ttl(&["plan", "--n-params", "0"]).code, 1);
    assert_eq!(ttl(&["plan", "--n-params", "1.5"]).code, 2);
}

#[test]
fn dry_runs_print_the_resolved_presets() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("never");
    let out = ok(&["train", "--preset", "ttl-160m", "--dry-run", "--out", s(&out_dir)]);
    for line in
        ["lr 6.0e-4", "warmup 5,000", "steps 458,000", "batch tokens 8,192", "checkpoints 20", "parameters 162,417,408"]
    {
        assert!(out.lines().any(|l| l == line), "missing {line:?} in\n{out}");
    }
    assert!(out.contains("learning rate = 6.0e-4"));
    assert!(!out_dir.exists(), "a dry run created {}", out_dir.display());

    let out = ok(&["train", "--preset", "ttl-460m", "--dry-run"]);
    for line in ["lr 3.0e-4", "warmup 10,000", "steps 1,200,000", "gradient accumulation 2", "micro batch sequences 2"]
    {
        assert!(out.lines().any(|l| l == line), "missing {line:?} in\n{out}");
    }
    let out = ok(&["train", "--preset", "ttl-sft", "--dry-run"]);
    for line in ["lr 1.0e-5", "warmup 1,000", "epochs 3"] {
        assert!(out.lines().any(|l| l == line), "missing {line:?} in\n{out}");
    }

    let conf = dir.path().join("custom.conf");
    std::fs::write(&conf, "preset = ttl-160m\nname = custom\nwarmup steps = 2,000\nflash attention 2 = true\n")
        .unwrap();
    let out = ok(&["train", "--config", s(&conf), "--dry-run", "--seed", "7"]);
    assert!(out.contains("warmup 2,000") && out.contains("seed = 7"), "{out}");
}

#[test]
fn usage_errors_and_help() {
    assert_eq!(ttl(&["train", "--preset", "ttl-999m", "--dry-run"]).code, 2);
    assert_eq!(ttl(&["train", "--dry-run"]).code, 2);
    assert_eq!(ttl(&["frobnicate"]).code, 2);
    assert_eq!(ttl(&[]).code, 2);
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.conf");
    std::fs::write(&bad, "optimizer = SGD\n").unwrap();
    let r = ttl(&["train", "--config", s(&bad), "--dry-run"]);
    assert_ne!(r.code, 0);
    assert!(r.err.contains("SGD"), "{}", r.err);

    for cmd in [
        &["--help"][..],
        &["plan", "--help"],
        &["tok", "train", "--help"],
        &["tok", "encode", "--help"],
        &["tok", "bench", "--help"],
        &["data", "pack", "--help"],
        &["train", "--help"],
        &["resume", "--help"],
        &["eval", "--help"],
        &["generate", "--help"],
        &["quantize", "--help"],
        &["bench-throughput", "--help"],
        &["report", "--help"],
    ] {
        let r = ttl(cmd);
        assert_eq!(r.code, 0, "{cmd:?}");
        assert!(r.out.contains("Usage"), "{cmd:?}: {}", r.out);
    }
}

#[test]
fn missing_inputs_exit_with_three() {
    let r = ttl(&["eval", "--checkpoint", "/nonexistent/c.ttlc", "--data", "/nonexistent/d.ttld"]);
    assert_eq!(r.code, 3, "{}", r.err);
    assert!(r.err.contains("no such file"));
}

#[test]
fn fertility_benchmark_on_the_fixture() {
    let out = ok(&["tok", "bench", "--fixtures", s(&fixture("tokenizer_efficiency.csv"))]);
    let names: Vec<&str> = out.lines().skip(1).filter_map(|l| l.split_whitespace().next()).collect();
    assert_eq!(names, ["TTL", "GPorTuguese-2", "BERTimbau", "Cabrita-3B", "Sabiá-7B"]);
    assert!(out.lines().nth(1).unwrap().ends_with("1.3428"), "{out}");
}

#[test]
fn energy_report_on_the_fixture() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(&["report", "--telemetry", s(&fixture("energy_460m.csv")), "--out", s(dir.path())]);
    let text = std::fs::read_to_string(fixture("energy_460m.csv")).unwrap();
    let lines: Vec<&str> = out.lines().collect();
    for (i, row) in text.lines().skip(1).enumerate() {
        let cells: Vec<&str> = lines[i + 1].split_whitespace().collect();
        assert_eq!(cells[..4], row.split(',').collect::<Vec<_>>()[..], "row {i}");
    }
    assert!(lines[12].ends_with("0.0197"), "{}", lines[12]);
    for f in ["report.csv", "loss.svg", "perplexity.svg", "energy.svg"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let csv = std::fs::read_to_string(dir.path().join("report.csv")).unwrap();
    assert!(csv.lines().last().unwrap().starts_with("9.8B,11.77,115.69,41.31"), "{csv}");
}

const CORPUS: &str = "o gato come peixe\na menina lê um livro grande\na casa azul fica perto do rio\n\
o sol e a lua sobre o mar\num livro azul para a menina\no peixe nada no rio grande\n";

fn tiny_config(dir: &Path) -> PathBuf {
    let conf = dir.join("tiny.conf");
    std::fs::write(
        &conf,
        "preset = ttl-160m\nname = tiny\ntokens per batch = 68\ntotal training steps = 24\nlearning rate = 3e-3\n\
         warmup steps = 4\nsequence length = 17\ncheckpoint interval = 8\nevaluation interval = 8\n\
         hidden size = 16\nintermediate size = 32\ncontext length = 16\nattention heads = 4\nkey value heads = 2\n\
         layers = 2\nvocabulary size = 300\n",
    )
    .unwrap();
    conf
}

#[test]
fn tiny_pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name);
    std::fs::write(p("corpus.txt"), CORPUS.repeat(40)).unwrap();
    std::fs::write(p("words.txt"), "gato peixe menina livro casa rio").unwrap();

    let out =
        ok(&["tok", "train", "--input", s(&p("corpus.txt")), "--vocab-size", "300", "--output", s(&p("tok.txt"))]);
    assert!(out.contains("vocabulary size = 300"), "{out}");
    let out = ok(&["tok", "encode", "--tokenizer", s(&p("tok.txt")), "--text", "o gato"]);
    assert!(!out.trim().is_empty());
    let out = ok(&["tok", "bench", "--tokenizer", s(&p("tok.txt")), "--wordlist", s(&p("words.txt"))]);
    assert!(out.contains("tok.txt"), "{out}");

    let prefix = p("ds");
    let out = ok(&[
        "data",
        "pack",
        "--tokenizer",
        s(&p("tok.txt")),
        "--input",
        s(&p("corpus.txt")),
        "--seq-len",
        "17",
        "--eval-frac",
        "0.1",
        "--output",
        s(&prefix),
        "--dry-run",
    ]);
    assert!(out.contains("train sequences") && !p("ds.train.ttld").exists());
    ok(&[
        "data",
        "pack",
        "--tokenizer",
        s(&p("tok.txt")),
        "--input",
        s(&p("corpus.txt")),
        "--seq-len",
        "17",
        "--eval-frac",
        "0.1",
        "--output",
        s(&prefix),
    ]);
    let (train, eval) = (p("ds.train.ttld"), p("ds.eval.ttld"));
    assert!(train.exists() && eval.exists());

    let conf = tiny_config(dir.path());
    let tok = p("tok.txt");
    let run = p("run");
    let base =
        ["--config", s(&conf), "--tokenizer", s(&tok), "--data", s(&train), "--eval", s(&eval), "--out", s(&run)];
    let out = ok(&[&["train"][..], &base, &["--steps", "16"]].concat());
    assert!(out.contains("stopped at step 16 of 24"), "{out}");
    assert!(run.join("ckpt-00000008.ttlc").exists() && run.join("ckpt-00000016.ttlc").exists());
    let manifest = RunManifest::load(&run).unwrap();
    manifest.verify().unwrap();
    assert!(manifest.get("checkpoint").is_some() && manifest.get("telemetry").is_some());

    // A second writer on the same run directory is refused.
    {
        let _held = DirLock::acquire(&run).unwrap();
        let r = ttl(&[&["train"][..], &base, &["--steps", "8"]].concat());
        assert_ne!(r.code, 0);
        assert!(r.err.contains("locked"), "{}", r.err);
    }

    let ckpt16 = run.join("ckpt-00000016.ttlc");
    let out = ok(&["resume", "--checkpoint", s(&ckpt16), "--data", s(&train), "--eval", s(&eval), "--out", s(&run)]);
    assert!(out.contains("resuming at step 16") && out.contains("stopped at step 24 of 24"), "{out}");
    let ckpt = run.join("ckpt-00000024.ttlc");

    // The uninterrupted run ends in the same checkpoint bytes.
    let straight = p("straight");
    let alt =
        ["--config", s(&conf), "--tokenizer", s(&tok), "--data", s(&train), "--eval", s(&eval), "--out", s(&straight)];
    ok(&[&["train"][..], &alt].concat());
    let a = ttl::formats::checkpoint::load(&ckpt).unwrap();
    let b = ttl::formats::checkpoint::load(&straight.join("ckpt-00000024.ttlc")).unwrap();
    assert_eq!(a.params, b.params);
    assert_eq!((a.counters.tokens, a.counters.steps), (b.counters.tokens, b.counters.steps));

    let out = ok(&["eval", "--checkpoint", s(&ckpt), "--data", s(&eval)]);
    assert!(out.contains("perplexity = "), "{out}");

    let out = ok(&["quantize", "--checkpoint", s(&ckpt), "--group", "32", "--output", s(&p("m.ttlq"))]);
    let field = |name: &str| out.lines().find_map(|l| l.strip_prefix(name)).unwrap().to_string();
    assert_eq!(field("footprint bytes = "), field("formula bytes = "));

    for model in [&ckpt, &p("m.ttlq")] {
        let g = ttl(&[
            "generate",
            "--checkpoint",
            s(model),
            "--tokenizer",
            s(&p("tok.txt")),
            "--prompt",
            "o gato",
            "--max-new-tokens",
            "5",
        ]);
        assert_eq!(g.code, 0, "{}", g.err);
        assert!(g.out.starts_with("o gato"));
        let again = ok(&[
            "generate",
            "--checkpoint",
            s(model),
            "--tokenizer",
            s(&p("tok.txt")),
            "--prompt",
            "o gato",
            "--max-new-tokens",
            "5",
        ]);
        assert_eq!(g.out, again);
        let sampled = [
            "generate",
            "--checkpoint",
            s(model),
            "--tokenizer",
            s(&tok),
            "--prompt",
            "a",
            "--temperature",
            "0.8",
            "--top-k",
            "5",
            "--seed",
            "3",
        ];
        assert_eq!(ok(&sampled), ok(&sampled));
    }
    let long = "menina ".repeat(40);
    let g = ttl(&[
        "generate",
        "--checkpoint",
        s(&ckpt),
        "--tokenizer",
        s(&p("tok.txt")),
        "--prompt",
        &long,
        "--max-new-tokens",
        "2",
    ]);
    assert_eq!(g.code, 0);
    assert!(g.err.contains("warning"), "{}", g.err);

    // A tokenizer the model was not trained with is refused.
    std::fs::write(p("other.txt"), "xyz xyz xyz qqq qqq\n".repeat(30)).unwrap();
    ok(&["tok", "train", "--input", s(&p("other.txt")), "--vocab-size", "270", "--output", s(&p("other-tok.txt"))]);
    let r = ttl(&["generate", "--checkpoint", s(&ckpt), "--tokenizer", s(&p("other-tok.txt")), "--prompt", "o"]);
    assert_eq!(r.code, 4, "{}", r.err);
    let r = ttl(&[
        &["train"][..],
        &["--config", s(&conf), "--tokenizer", s(&p("other-tok.txt")), "--data", s(&train), "--out", s(&p("x"))],
    ]
    .concat());
    assert_eq!(r.code, 4, "{}", r.err);

    let out = ok(&["bench-throughput", "--checkpoint", s(&p("m.ttlq")), "--tokens", "4", "--repetitions", "2"]);
    assert!(out.contains("median tokens/s") && out.contains("repetitions = 2"), "{out}");

    let out = ok(&["report", "--telemetry", s(&run.join("telemetry.csv"))]);
    assert_eq!(out.lines().count(), 1 + 3, "{out}");
}

#[test]
fn supervised_pairs_pack_with_a_mask() {
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name);
    std::fs::write(p("corpus.txt"), CORPUS.repeat(20)).unwrap();
    ok(&["tok", "train", "--input", s(&p("corpus.txt")), "--vocab-size", "280", "--output", s(&p("tok.txt"))]);
    std::fs::write(p("pairs.tsv"), "qual é a cor da casa?\tazul\no que o gato come?\tpeixe\n".repeat(10)).unwrap();
    ok(&[
        "data",
        "pack",
        "--sft",
        "--tokenizer",
        s(&p("tok.txt")),
        "--input",
        s(&p("pairs.tsv")),
        "--seq-len",
        "16",
        "--eval-frac",
        "0.2",
        "--output",
        s(&p("sft")),
    ]);
    let ds = ttl::formats::dataset::load(&p("sft.train.ttld")).unwrap();
    let mask = ds.loss_mask().expect("mask");
    assert!(mask.contains(&0) && mask.contains(&1));

    std::fs::write(p("bad.tsv"), "no tab here\n").unwrap();
    let r = ttl(&[
        "data",
        "pack",
        "--sft",
        "--tokenizer",
        s(&p("tok.txt")),
        "--input",
        s(&p("bad.tsv")),
        "--output",
        s(&p("bad")),
    ]);
    assert_eq!(r.code, 2, "{}", r.err);
}

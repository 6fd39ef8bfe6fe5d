//! `ttl` command line: plan, tokenize, pack, train, evaluate, quantize,
//! generate and report.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use ttl_core::data::{pack_masked, split_eval, tokenize_sft, DocumentFilter, PackedDataset, SftExample};
use ttl_core::inference::{
    footprint_formula, generate, GenerationParams, InferenceModel, QuantOptions, QuantizedModel, DEFAULT_GROUP_SIZE,
};
use ttl_core::model::{param_count, Llama};
use ttl_core::planner::{plan, ScalingConstants, DEFAULT_TOKENS_PER_PARAM};
use ttl_core::telemetry::{checkpoint_report, CarbonModel, PowerModel, TelemetryLog};
use ttl_core::tokenizer::{benchmark_fertility, BpeTrainer, FertilitySource, Tokenizer, TrainerConfig};
use ttl_core::train::{lr_at, EvalReport, Hooks, StepReport, TrainState, Trainer};

use crate::codec::digest64;
use crate::config::{self, group, real, RunConfig};
use crate::error::{read_text, Error, Result};
use crate::formats::quantized::QuantizedFile;
use crate::formats::{checkpoint, dataset, quantized, sniff, telemetry_csv, tokenizer as tok_file};
use crate::manifest::{DirLock, RunManifest};
use crate::runtime::{measure_throughput, WallClock};
use crate::{fixtures, svg};

#[derive(Debug, Parser)]
#[command(name = "ttl", version, about = "Compact decoder pre-training toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Size a model and dataset from the parametric loss surface.
    Plan(PlanArgs),
    /// Train, apply or benchmark a BPE tokenizer.
    Tok {
        #[command(subcommand)]
        command: TokCommand,
    },
    /// Build packed datasets.
    Data {
        #[command(subcommand)]
        command: DataCommand,
    },
    /// Start a training run.
    Train(TrainArgs),
    /// Continue a run from a checkpoint.
    Resume(ResumeArgs),
    /// Perplexity of a checkpoint on a packed dataset.
    Eval(EvalArgs),
    /// Decode text from a checkpoint or quantized model.
    Generate(GenerateArgs),
    /// Store a checkpoint's weights as 4-bit groups.
    Quantize(QuantizeArgs),
    /// Decoding speed of a checkpoint or quantized model.
    BenchThroughput(BenchArgs),
    /// Cost report and charts from a telemetry CSV.
    Report(ReportArgs),
}

fn count(s: &str) -> std::result::Result<u64, String> {
    let v = config::float(s)?;
    if v < 0.0 || v > u64::MAX as f64 || v.fract() != 0.0 {
        return Err(format!("{s:?} is not a whole non-negative count"));
    }
    Ok(v as u64)
}

#[derive(Debug, Args)]
pub struct PlanArgs {
    /// Parameter count, e.g. `160e6`.
    #[arg(long, value_parser = count)]
    pub n_params: u64,
    /// Unique tokens available in the corpus.
    #[arg(long, value_parser = count)]
    pub unique_tokens: Option<u64>,
    /// Tokens per parameter.
    #[arg(long, default_value_t = DEFAULT_TOKENS_PER_PARAM)]
    pub ratio: f64,
    #[arg(long)]
    pub a: Option<f64>,
    #[arg(long)]
    pub b: Option<f64>,
    #[arg(long)]
    pub e: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
}

#[derive(Debug, Subcommand)]
pub enum TokCommand {
    /// Learn merges from text files (one document per line).
    Train {
        #[arg(long, required = true, num_args = 1..)]
        input: Vec<PathBuf>,
        #[arg(long, default_value_t = 32_000)]
        vocab_size: usize,
        #[arg(long, default_value_t = 2)]
        min_frequency: u64,
        #[arg(long)]
        output: PathBuf,
    },
    /// Print token ids of a text.
    Encode {
        #[arg(long)]
        tokenizer: PathBuf,
        #[arg(long, conflicts_with = "input")]
        text: Option<String>,
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Tokens per word over a word list, alongside fixture rows.
    Bench {
        #[arg(long)]
        wordlist: Option<PathBuf>,
        #[arg(long)]
        fixtures: Option<PathBuf>,
        /// Tokenizer files to measure on the word list.
        #[arg(long)]
        tokenizer: Vec<PathBuf>,
    },
}

#[derive(Debug, Subcommand)]
pub enum DataCommand {
    /// Tokenize, pack into fixed-length sequences and hold out an eval split.
    Pack(PackArgs),
}

#[derive(Debug, Args)]
pub struct PackArgs {
    #[arg(long)]
    pub tokenizer: PathBuf,
    /// Text files, one document per line; with `--sft`, `prompt<TAB>response` lines.
    #[arg(long, required = true, num_args = 1..)]
    pub input: Vec<PathBuf>,
    #[arg(long, default_value_t = ttl_core::data::DEFAULT_SEQ_LEN)]
    pub seq_len: usize,
    #[arg(long, default_value_t = ttl_core::data::DEFAULT_EVAL_FRACTION)]
    pub eval_frac: f64,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    /// Output prefix: writes `<prefix>.train.ttld` and `<prefix>.eval.ttld`.
    #[arg(long)]
    pub output: PathBuf,
    /// Prompt/response pairs with the loss masked to responses.
    #[arg(long)]
    pub sft: bool,
    #[arg(long, default_value_t = 1)]
    pub min_chars: usize,
    #[arg(long, default_value_t = 0.3)]
    pub max_symbol_ratio: f64,
    #[arg(long)]
    pub dry_run: bool,
}

#[derive(Debug, Args, Clone)]
pub struct TelemetryArgs {
    /// Average device power in watts.
    #[arg(long, default_value_t = ttl_core::telemetry::DEFAULT_WATTS)]
    pub watts: f64,
    #[arg(long, default_value_t = 1.0)]
    pub utilization: f64,
    /// kgCO2eq per kWh.
    #[arg(long, default_value_t = ttl_core::telemetry::DEFAULT_INTENSITY)]
    pub intensity: f64,
    #[arg(long, default_value = ttl_core::telemetry::DEFAULT_REGION)]
    pub region: String,
}

impl TelemetryArgs {
    fn models(&self) -> (PowerModel, CarbonModel) {
        (
            PowerModel { avg_watts: self.watts, utilization: self.utilization },
            CarbonModel { intensity: self.intensity, region: self.region.clone() },
        )
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, conflicts_with = "config", value_parser = clap::builder::PossibleValuesParser::new(ttl_core::train::PRESET_NAMES))]
    pub preset: Option<String>,
    /// `key = value` configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Print the resolved configuration and exit without touching any file.
    #[arg(long)]
    pub dry_run: bool,
    #[arg(long, required_unless_present = "dry_run")]
    pub tokenizer: Option<PathBuf>,
    #[arg(long, required_unless_present = "dry_run")]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub eval: Option<PathBuf>,
    /// Run directory for checkpoints, telemetry and the manifest.
    #[arg(long, required_unless_present = "dry_run")]
    pub out: Option<PathBuf>,
    /// Stop after this step (the schedule still spans the configured total).
    #[arg(long)]
    pub steps: Option<u64>,
    /// Overrides the configured seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Start from the weights of this checkpoint (fine-tuning).
    #[arg(long)]
    pub init_from: Option<PathBuf>,
    #[command(flatten)]
    pub telemetry: TelemetryArgs,
}

#[derive(Debug, Args)]
pub struct ResumeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub eval: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub steps: Option<u64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Sequences per forward pass.
    #[arg(long, default_value_t = 4)]
    pub batch: usize,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Training checkpoint or quantized model.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub tokenizer: PathBuf,
    #[arg(long)]
    pub prompt: String,
    #[arg(long, default_value_t = 0.0)]
    pub temperature: f64,
    #[arg(long)]
    pub top_k: Option<usize>,
    #[arg(long, default_value_t = 64)]
    pub max_new_tokens: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Keep decoding past the end-of-sequence token.
    #[arg(long)]
    pub ignore_eos: bool,
}

#[derive(Debug, Args)]
pub struct QuantizeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value_t = DEFAULT_GROUP_SIZE)]
    pub group: usize,
    #[arg(long)]
    pub output: PathBuf,
    /// Also store the embedding table in 4 bits.
    #[arg(long)]
    pub quantize_embeddings: bool,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Training checkpoint or quantized model.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value_t = 32)]
    pub tokens: usize,
    #[arg(long, default_value_t = 5)]
    pub repetitions: usize,
    /// Comma-separated prompt ids.
    #[arg(long, value_delimiter = ',', default_value = "0")]
    pub prompt_ids: Vec<u32>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long)]
    pub telemetry: PathBuf,
    /// Directory for `report.csv` and the SVG charts.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub power: TelemetryArgs,
}

/// Parses `args` (program name first) and runs the command; returns the exit status.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = if e.use_stderr() { write!(err, "{e}") } else { write!(out, "{e}") };
            return e.exit_code();
        }
    };
    match dispatch(cli.command, out, err) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}

fn io_err(e: std::io::Error) -> Error {
    Error::Io { path: PathBuf::from("<stdout>"), source: e }
}

macro_rules! say {
    ($out:expr, $($t:tt)*) => {
        writeln!($out, $($t)*).map_err(io_err)?
    };
}

pub fn dispatch(command: Command, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    match command {
        Command::Plan(a) => cmd_plan(a, out),
        Command::Tok { command } => cmd_tok(command, out),
        Command::Data { command: DataCommand::Pack(a) } => cmd_pack(a, out),
        Command::Train(a) => cmd_train(a, out),
        Command::Resume(a) => cmd_resume(a, out),
        Command::Eval(a) => cmd_eval(a, out),
        Command::Generate(a) => cmd_generate(a, out, err),
        Command::Quantize(a) => cmd_quantize(a, out),
        Command::BenchThroughput(a) => cmd_bench(a, out),
        Command::Report(a) => cmd_report(a, out),
    }
}

fn cmd_plan(a: PlanArgs, out: &mut dyn Write) -> Result<()> {
    let d = ScalingConstants::default();
    let c = ScalingConstants {
        a: a.a.unwrap_or(d.a),
        b: a.b.unwrap_or(d.b),
        e: a.e.unwrap_or(d.e),
        alpha: a.alpha.unwrap_or(d.alpha),
        beta: a.beta.unwrap_or(d.beta),
    };
    let p = plan(a.n_params, a.unique_tokens, a.ratio, &c)?;
    say!(out, "Model of {} parameters at {} tokens per parameter", group(p.n_params), p.ratio);
    say!(out, "  compute-optimal tokens: {} ({:e})", group(p.optimal_tokens), p.optimal_tokens as f64);
    say!(out, "  predicted loss: {:.4} nats", p.predicted_loss);
    say!(out, "  training compute: {:.3e} FLOPs", p.estimated_flops);
    if let (Some(u), Some(e)) = (p.unique_tokens, p.epochs) {
        say!(out, "  epochs over {} unique tokens: {e:.3}", group(u));
        if p.epoch_warning {
            say!(out, "  warning: more than 4 epochs of repeated data");
        }
    }
    say!(out, "n_params={}", p.n_params);
    say!(out, "ratio={}", p.ratio);
    say!(out, "optimal_tokens={:e}", p.optimal_tokens as f64);
    say!(out, "predicted_loss={}", p.predicted_loss);
    say!(out, "estimated_flops={:e}", p.estimated_flops);
    if let Some(e) = p.epochs {
        say!(out, "epochs={e}");
    }
    say!(out, "epoch_warning={}", p.epoch_warning);
    Ok(())
}

fn read_lines(paths: &[PathBuf]) -> Result<Vec<String>> {
    let mut lines = Vec::new();
    for p in paths {
        lines.extend(read_text(p)?.lines().map(str::to_owned));
    }
    Ok(lines)
}

fn cmd_tok(command: TokCommand, out: &mut dyn Write) -> Result<()> {
    match command {
        TokCommand::Train { input, vocab_size, min_frequency, output } => {
            let cfg = TrainerConfig { vocab_size, min_frequency, ..TrainerConfig::default() };
            let mut trainer = BpeTrainer::new(cfg)?;
            for line in read_lines(&input)? {
                trainer.feed(line.as_bytes());
            }
            let tok = trainer.finish()?;
            tok_file::save(&tok, &output)?;
            say!(out, "vocabulary size = {}", tok.vocab_size());
            say!(out, "merges = {}", tok.merges().len());
            say!(out, "fingerprint = {:016x}", tok.fingerprint());
        }
        TokCommand::Encode { tokenizer, text, input } => {
            let tok = tok_file::load(&tokenizer)?;
            let bytes = match (text, input) {
                (Some(t), _) => t.into_bytes(),
                (None, Some(p)) => crate::error::read(&p)?,
                (None, None) => return Err(Error::Usage("give --text or --input".into())),
            };
            let ids: Vec<String> = tok.encode(&bytes).iter().map(u32::to_string).collect();
            say!(out, "{}", ids.join(" "));
        }
        TokCommand::Bench { wordlist, fixtures, tokenizer } => {
            let words = wordlist.as_deref().map(read_text).transpose()?;
            let rows = fixtures.as_deref().map(fixtures::load_efficiency).transpose()?.unwrap_or_default();
            let toks = tokenizer.iter().map(|p| tok_file::load(p)).collect::<Result<Vec<Tokenizer>>>()?;
            let names: Vec<String> = tokenizer.iter().map(|p| p.display().to_string()).collect();
            let mut sources: Vec<FertilitySource<'_>> = rows
                .iter()
                .map(|r| FertilitySource::Fixture {
                    name: &r.name,
                    tokens: r.tokens,
                    vocab_size: r.vocab_size,
                    words: r.words,
                })
                .collect();
            for (name, t) in names.iter().zip(&toks) {
                sources.push(FertilitySource::Model { name, tokenizer: t });
            }
            let report = benchmark_fertility(&sources, words.as_deref())?;
            write!(out, "{}", report.render()).map_err(io_err)?;
        }
    }
    Ok(())
}

fn parse_sft(lines: &[String]) -> Result<Vec<SftExample>> {
    let unescape = |s: &str| s.replace("\\n", "\n").replace("\\t", "\t");
    lines
        .iter()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| match l.split_once('\t') {
            Some((p, r)) => Ok(SftExample { prompt: unescape(p), response: unescape(r) }),
            None => Err(Error::Usage(format!("example {}: expected `prompt<TAB>response`", i + 1))),
        })
        .collect()
}

pub fn split_paths(prefix: &Path) -> (PathBuf, PathBuf) {
    let with = |suffix: &str| {
        let mut s = prefix.as_os_str().to_owned();
        s.push(suffix);
        PathBuf::from(s)
    };
    (with(".train.ttld"), with(".eval.ttld"))
}

fn cmd_pack(a: PackArgs, out: &mut dyn Write) -> Result<()> {
    let tok = tok_file::load(&a.tokenizer)?;
    let fp = tok.fingerprint();
    let lines = read_lines(&a.input)?;
    let (stream, mask) = if a.sft {
        let (s, m) = tokenize_sft(&tok, &parse_sft(&lines)?)?;
        (s, Some(m))
    } else {
        let filter = DocumentFilter { min_chars: a.min_chars, max_symbol_ratio: a.max_symbol_ratio };
        let kept = lines.iter().filter(|l| filter.accepts(l));
        (ttl_core::data::tokenize_corpus(&tok, kept.map(|l| l.as_bytes()))?, None)
    };
    let (ds, dropped) = pack_masked(&stream, mask.as_deref(), a.seq_len, fp)?;
    let (train, eval) = split_eval(&ds, a.eval_frac, a.seed)?;
    say!(out, "tokens = {}", stream.len());
    say!(out, "sequences = {} of {} tokens", ds.n_sequences(), a.seq_len);
    say!(out, "dropped tail tokens = {dropped}");
    say!(out, "train sequences = {}", train.n_sequences());
    say!(out, "eval sequences = {}", eval.n_sequences());
    say!(out, "tokenizer fingerprint = {fp:016x}");
    if !a.dry_run {
        let (tp, ep) = split_paths(&a.output);
        dataset::save(&train, &tp)?;
        dataset::save(&eval, &ep)?;
        say!(out, "wrote {} and {}", tp.display(), ep.display());
    }
    Ok(())
}

fn resolve_config(a: &TrainArgs) -> Result<RunConfig> {
    let mut cfg = match (&a.preset, &a.config) {
        (_, Some(path)) => RunConfig::load(path)?,
        (Some(name), None) => RunConfig::preset(name)?,
        (None, None) => return Err(Error::Usage("give --preset or --config".into())),
    };
    if let Some(seed) = a.seed {
        cfg.train.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_summary(cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    let t = &cfg.train;
    say!(out, "preset {}", cfg.name);
    say!(out, "lr {}", real(t.peak_lr));
    say!(out, "warmup {}", group(t.warmup_steps));
    match t.epochs {
        Some(e) => say!(out, "epochs {e}"),
        None => say!(out, "steps {}", group(t.total_steps)),
    }
    say!(out, "batch tokens {}", group(t.tokens_per_batch));
    say!(out, "gradient accumulation {}", t.grad_accum_steps);
    say!(out, "micro batch sequences {}", t.micro_batch_size());
    if t.epochs.is_none() {
        say!(out, "total tokens {}", group(t.total_tokens()));
        say!(out, "checkpoints {}", t.intermediate_checkpoints());
        say!(out, "lr at step {} {}", t.warmup_steps, real(lr_at(t.warmup_steps, t)?));
    }
    say!(out, "parameters {}", group(param_count(&cfg.model)));
    Ok(())
}

/// Writes a checkpoint, the telemetry CSV and the manifest at every checkpoint step.
struct RunWriter<'a> {
    dir: PathBuf,
    manifest: RunManifest,
    out: &'a mut dyn Write,
}

impl RunWriter<'_> {
    fn save(&mut self, state: &TrainState<f32>) -> Result<PathBuf> {
        let path = self.dir.join(format!("ckpt-{:08}.ttlc", state.step));
        checkpoint::save(state, &path)?;
        let csv = self.dir.join("telemetry.csv");
        telemetry_csv::save_log(&state.log, &csv)?;
        self.manifest.record("checkpoint", &path)?;
        self.manifest.record("telemetry", &csv)?;
        self.manifest.save(&self.dir)?;
        Ok(path)
    }
}

impl Hooks<f32> for RunWriter<'_> {
    fn on_step(&mut self, r: &StepReport) -> ttl_core::Result<()> {
        let _ = writeln!(self.out, "step {} loss {:.4} lr {} grad norm {:.4}", r.step, r.loss, real(r.lr), r.grad_norm);
        Ok(())
    }

    fn on_eval(&mut self, step: u64, r: &EvalReport) -> ttl_core::Result<()> {
        let _ = writeln!(self.out, "eval at step {step}: loss {:.4} perplexity {:.4}", r.loss, r.perplexity);
        Ok(())
    }

    fn on_checkpoint(&mut self, trainer: &Trainer<f32>) -> ttl_core::Result<()> {
        let path = self.save(&trainer.state()).map_err(|e| ttl_core::Error::External(e.to_string()))?;
        let _ = writeln!(self.out, "checkpoint {}", path.display());
        Ok(())
    }
}

fn load_split(path: &Path, fingerprint: u64) -> Result<PackedDataset> {
    let ds = dataset::load(path)?;
    if ds.fingerprint != fingerprint {
        return Err(Error::Fingerprint {
            what: path.display().to_string(),
            expected: fingerprint,
            found: ds.fingerprint,
        });
    }
    Ok(ds)
}

fn train_loop(
    mut trainer: Trainer<f32>,
    data: &PackedDataset,
    eval: Option<&PackedDataset>,
    stop: u64,
    mut writer: RunWriter<'_>,
) -> Result<()> {
    trainer.run_until(data, eval, stop, &mut WallClock::default(), &mut writer)?;
    let state = trainer.state();
    let path = writer.save(&state)?;
    let snap = state.counters;
    say!(writer.out, "stopped at step {} of {}", state.step, state.train.total_steps);
    say!(writer.out, "tokens {} elapsed {:.1} s", group(snap.tokens), snap.elapsed_s);
    say!(writer.out, "checkpoint {}", path.display());
    Ok(())
}

fn cmd_train(a: TrainArgs, out: &mut dyn Write) -> Result<()> {
    let cfg = resolve_config(&a)?;
    if a.dry_run {
        print_summary(&cfg, out)?;
        say!(out, "");
        write!(out, "{}", cfg.render()).map_err(io_err)?;
        return Ok(());
    }
    let missing = |flag: &str| Error::Usage(format!("{flag} is required"));
    let tok_path = a.tokenizer.clone().ok_or_else(|| missing("--tokenizer"))?;
    let data_path = a.data.clone().ok_or_else(|| missing("--data"))?;
    let dir = a.out.clone().ok_or_else(|| missing("--out"))?;
    let tok = tok_file::load(&tok_path)?;
    let fp = tok.fingerprint();
    if tok.vocab_size() > cfg.model.vocab_size {
        return Err(Error::Usage(format!(
            "tokenizer has {} tokens but the model vocabulary is {}",
            tok.vocab_size(),
            cfg.model.vocab_size
        )));
    }
    let data = load_split(&data_path, fp)?;
    let eval = a.eval.as_deref().map(|p| load_split(p, fp)).transpose()?;
    let mut cfg = cfg;
    cfg.train = cfg.train.resolve_steps(data.n_sequences())?;
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let _lock = DirLock::acquire(&dir)?;

    let model = match &a.init_from {
        Some(p) => {
            let base = checkpoint::load_matching(p, fp)?;
            if base.model != cfg.model {
                return Err(Error::Usage(format!("{} was trained with a different model shape", p.display())));
            }
            Llama::new(base.model, base.params)?
        }
        None => Llama::init(cfg.model.clone(), cfg.train.seed)?,
    };
    let (power, carbon) = a.telemetry.models();
    let log = TelemetryLog::new(power, carbon)?;
    let trainer = Trainer::new(model, cfg.train.clone(), log, fp)?;

    let mut manifest = RunManifest {
        seed: cfg.train.seed,
        config_digest: digest64(cfg.render().as_bytes()),
        tokenizer_fingerprint: fp,
        entries: Vec::new(),
    };
    manifest.record("tokenizer", &tok_path)?;
    manifest.record("dataset", &data_path)?;
    if let Some(p) = &a.eval {
        manifest.record("eval", p)?;
    }
    crate::error::write_atomic(&dir.join("config.txt"), cfg.render().as_bytes())?;
    manifest.record("config", &dir.join("config.txt"))?;
    let stop = a.steps.unwrap_or(cfg.train.total_steps);
    train_loop(trainer, &data, eval.as_ref(), stop, RunWriter { dir, manifest, out })
}

fn cmd_resume(a: ResumeArgs, out: &mut dyn Write) -> Result<()> {
    let state = checkpoint::load(&a.checkpoint)?;
    let fp = state.tokenizer_fingerprint;
    let data = load_split(&a.data, fp)?;
    let eval = a.eval.as_deref().map(|p| load_split(p, fp)).transpose()?;
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let _lock = DirLock::acquire(&a.out)?;
    let mut manifest = match RunManifest::load(&a.out) {
        Ok(m) => m,
        Err(Error::Missing(_)) => RunManifest {
            seed: state.train.seed,
            config_digest: digest64(
                RunConfig { name: checkpoint::RUN_NAME.into(), model: state.model.clone(), train: state.train.clone() }
                    .render()
                    .as_bytes(),
            ),
            tokenizer_fingerprint: fp,
            entries: Vec::new(),
        },
        Err(e) => return Err(e),
    };
    if manifest.tokenizer_fingerprint != fp {
        return Err(Error::Fingerprint {
            what: "run manifest".into(),
            expected: manifest.tokenizer_fingerprint,
            found: fp,
        });
    }
    manifest.record("dataset", &a.data)?;
    if let Some(p) = &a.eval {
        manifest.record("eval", p)?;
    }
    let stop = a.steps.unwrap_or(state.train.total_steps);
    say!(out, "resuming at step {}", state.step);
    let trainer = Trainer::from_state(state)?;
    train_loop(trainer, &data, eval.as_ref(), stop, RunWriter { dir: a.out, manifest, out })
}

fn cmd_eval(a: EvalArgs, out: &mut dyn Write) -> Result<()> {
    let state = checkpoint::load(&a.checkpoint)?;
    let data = load_split(&a.data, state.tokenizer_fingerprint)?;
    let step = state.step;
    let trainer = Trainer::from_state(state)?;
    let r = trainer.evaluate(&data, a.batch.max(1))?;
    say!(out, "step = {step}");
    say!(out, "tokens = {}", r.tokens);
    say!(out, "loss = {:.6}", r.loss);
    say!(out, "perplexity = {:.4}", r.perplexity);
    Ok(())
}

/// A decoder from either file kind, with its tokenizer fingerprint and stored weight bytes.
pub fn load_decoder(path: &Path) -> Result<(InferenceModel, u64, u64)> {
    if &sniff(path)? == quantized::MAGIC {
        let f = quantized::load(path)?;
        let bytes = f.model.footprint_bytes();
        Ok((InferenceModel::from_quantized(&f.model)?, f.tokenizer_fingerprint, bytes))
    } else {
        let s = checkpoint::load(path)?;
        let bytes = 4 * param_count(&s.model);
        Ok((InferenceModel::from_params(&s.model, &s.params)?, s.tokenizer_fingerprint, bytes))
    }
}

fn cmd_generate(a: GenerateArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    let tok = tok_file::load(&a.tokenizer)?;
    let (model, fp, _) = load_decoder(&a.checkpoint)?;
    if fp != tok.fingerprint() {
        return Err(Error::Fingerprint {
            what: a.tokenizer.display().to_string(),
            expected: fp,
            found: tok.fingerprint(),
        });
    }
    let mut prompt = Vec::new();
    if let Some(bos) = tok.special_ids().bos {
        prompt.push(bos);
    }
    prompt.extend(tok.encode_str(&a.prompt));
    let stop_ids = match (a.ignore_eos, tok.special_ids().eos) {
        (false, Some(eos)) => vec![eos],
        _ => Vec::new(),
    };
    let params = GenerationParams {
        max_new_tokens: a.max_new_tokens,
        temperature: a.temperature,
        top_k: a.top_k,
        seed: a.seed,
        stop_ids,
    };
    if params.top_k.is_some_and(|k| k > model.config().vocab_size) {
        return Err(Error::Usage(format!("top-k exceeds the vocabulary of {}", model.config().vocab_size)));
    }
    let g = generate(&model, &prompt, &params)?;
    if g.truncated {
        let _ = writeln!(
            err,
            "warning: prompt longer than the context of {}; kept its last tokens",
            model.config().context_length
        );
    }
    let text = tok.decode(&g.tokens, true)?;
    say!(out, "{}{}", a.prompt, String::from_utf8_lossy(&text));
    Ok(())
}

fn cmd_quantize(a: QuantizeArgs, out: &mut dyn Write) -> Result<()> {
    let state = checkpoint::load(&a.checkpoint)?;
    let options = QuantOptions { group_size: a.group, quantize_embeddings: a.quantize_embeddings };
    let q = QuantizedModel::quantize(&state.model, &state.params, options)?;
    let f = QuantizedFile { model: q, tokenizer_fingerprint: state.tokenizer_fingerprint };
    quantized::save(&f, &a.output)?;
    let dense = 4 * param_count(&state.model);
    say!(out, "group size = {}", a.group);
    say!(out, "full precision bytes = {dense}");
    say!(out, "footprint bytes = {}", f.model.footprint_bytes());
    say!(out, "formula bytes = {}", footprint_formula(&state.model, &options));
    say!(out, "footprint MB = {:.1}", f.model.footprint_bytes() as f64 / 1e6);
    say!(out, "wrote {}", a.output.display());
    Ok(())
}

fn cmd_bench(a: BenchArgs, out: &mut dyn Write) -> Result<()> {
    let (model, _, bytes) = load_decoder(&a.checkpoint)?;
    let r = measure_throughput(&model, &a.prompt_ids, a.tokens, a.repetitions, bytes)?;
    write!(out, "{}", r.render()).map_err(io_err)?;
    Ok(())
}

fn cmd_report(a: ReportArgs, out: &mut dyn Write) -> Result<()> {
    let (power, carbon) = a.power.models();
    let log = telemetry_csv::load_log(&a.telemetry, power, carbon)?;
    let report = checkpoint_report(&log)?;
    write!(out, "{}", report.render()).map_err(io_err)?;
    if let Some(dir) = a.out {
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        crate::error::write_atomic(&dir.join("report.csv"), &telemetry_csv::write_report(&report))?;
        let rows = log.rows();
        let series = |f: &dyn Fn(&ttl_core::telemetry::TelemetryRow) -> Option<f64>| -> Vec<(f64, f64)> {
            rows.iter().filter_map(|r| f(r).map(|y| (r.tokens as f64, y))).collect()
        };
        let charts = [
            ("loss.svg", "Training loss", "loss", series(&|r| r.loss)),
            ("perplexity.svg", "Evaluation perplexity", "perplexity", series(&|r| r.eval_perplexity)),
            ("energy.svg", "Cumulative energy", "kWh", series(&|r| Some(r.energy_kwh))),
        ];
        for (file, title, label, points) in charts {
            crate::error::write_atomic(
                &dir.join(file),
                svg::line_chart(title, "processed tokens", label, &points).as_bytes(),
            )?;
        }
        say!(out, "wrote report.csv, loss.svg, perplexity.svg, energy.svg to {}", dir.display());
    }
    Ok(())
}

//! Flat `key = value` run configuration.
//!
//! Training keys use the hyperparameter names of the published training
//! table (`tokens per batch`, `warmup steps`, ...). A file may name a base
//! `preset` and override any subset of keys; `name` labels the run.

use std::fmt::Write as _;
use std::path::Path;

use ttl_core::model::ModelConfig;
use ttl_core::train::{preset, TrainConfig};

use crate::error::{read_text, Error, Result};

/// Keys accepted for the record but without effect: GPU execution settings.
pub const IGNORED_KEYS: [&str; 4] = ["gradient checkpointing", "mixed precision", "tf32", "flash attention 2"];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub name: String,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn preset(name: &str) -> Result<Self> {
        let p = preset(name)?;
        Ok(Self { name: p.name, model: p.model, train: p.train })
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.train.seq_len > self.model.context_length + 1 {
            return Err(Error::Usage(format!(
                "sequence length {} exceeds the context length {} plus the shifted target",
                self.train.seq_len, self.model.context_length
            )));
        }
        Ok(())
    }

    pub fn render(&self) -> String {
        let (t, m) = (&self.train, &self.model);
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        kv("name", self.name.clone());
        kv("tokens per batch", group(t.tokens_per_batch));
        kv("total training steps", group(t.total_steps));
        kv("gradient accumulation steps", group(t.grad_accum_steps));
        kv("optimizer", "AdamW".into());
        kv("learning rate", real(t.peak_lr));
        kv("minimum learning rate", real(t.min_lr));
        kv("adam epsilon", real(t.eps));
        kv("adam beta 1", real(t.beta1));
        kv("adam beta 2", real(t.beta2));
        kv("weight decay", real(t.weight_decay));
        kv("scheduler type", "cosine".into());
        kv("warmup steps", group(t.warmup_steps));
        kv("epochs", t.epochs.map_or_else(|| "none".into(), |e| e.to_string()));
        kv("max gradient norm", t.clip_norm.map_or_else(|| "none".into(), real));
        kv("sequence length", group(t.seq_len as u64));
        kv("checkpoint interval", group(t.checkpoint_interval));
        kv("evaluation interval", group(t.eval_interval));
        kv("seed", t.seed.to_string());
        kv("hidden size", group(m.hidden_size as u64));
        kv("intermediate size", group(m.intermediate_size as u64));
        kv("context length", group(m.context_length as u64));
        kv("attention heads", m.n_heads.to_string());
        kv("key value heads", m.n_kv_heads.to_string());
        kv("layers", m.n_layers.to_string());
        kv("vocabulary size", group(m.vocab_size as u64));
        kv("rope theta", real(m.rope_theta));
        kv("rms norm epsilon", real(m.norm_eps));
        kv("tie embeddings", m.tie_embeddings.to_string());
        out
    }

    pub fn parse(text: &str) -> std::result::Result<Self, String> {
        let mut pairs = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(format!("line {}: expected `key = value`", i + 1));
            };
            pairs.push((i + 1, k.trim().to_string(), v.trim().to_string()));
        }
        let base = pairs.iter().find(|(_, k, _)| k == "preset").map_or("ttl-160m", |(_, _, v)| v.as_str());
        let mut cfg = Self::preset(base).map_err(|e| e.to_string())?;
        for (line, key, value) in &pairs {
            apply(&mut cfg, key, value).map_err(|e| format!("line {line}: {key}: {e}"))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = read_text(path)?;
        let cfg = Self::parse(&text).map_err(|e| Error::format(path, e))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn apply(c: &mut RunConfig, key: &str, v: &str) -> std::result::Result<(), String> {
    let (t, m) = (&mut c.train, &mut c.model);
    match key {
        "preset" => {}
        "name" => c.name = v.to_string(),
        "tokens per batch" => t.tokens_per_batch = int(v)?,
        "total training steps" => t.total_steps = int(v)?,
        "gradient accumulation steps" => t.grad_accum_steps = int(v)?,
        "optimizer" => expect(v, "AdamW")?,
        "learning rate" => t.peak_lr = float(v)?,
        "minimum learning rate" => t.min_lr = float(v)?,
        "adam epsilon" => t.eps = float(v)?,
        "adam beta 1" => t.beta1 = float(v)?,
        "adam beta 2" => t.beta2 = float(v)?,
        "weight decay" => t.weight_decay = float(v)?,
        "scheduler type" => expect(v, "cosine")?,
        "warmup steps" => t.warmup_steps = int(v)?,
        "epochs" => t.epochs = optional(v, |s| int(s).map(|e| e as u32))?,
        "max gradient norm" => t.clip_norm = optional(v, float)?,
        "sequence length" => t.seq_len = int(v)? as usize,
        "checkpoint interval" => t.checkpoint_interval = int(v)?,
        "evaluation interval" => t.eval_interval = int(v)?,
        "seed" => t.seed = int(v)?,
        "hidden size" => m.hidden_size = int(v)? as usize,
        "intermediate size" => m.intermediate_size = int(v)? as usize,
        "context length" => m.context_length = int(v)? as usize,
        "attention heads" => m.n_heads = int(v)? as usize,
        "key value heads" => m.n_kv_heads = int(v)? as usize,
        "layers" => m.n_layers = int(v)? as usize,
        "vocabulary size" => m.vocab_size = int(v)? as usize,
        "rope theta" => m.rope_theta = float(v)?,
        "rms norm epsilon" => m.norm_eps = float(v)?,
        "tie embeddings" => m.tie_embeddings = v.parse().map_err(|_| format!("expected true or false, got {v:?}"))?,
        k if IGNORED_KEYS.contains(&k) => {}
        _ => return Err("unknown key".into()),
    }
    Ok(())
}

fn expect(v: &str, want: &str) -> std::result::Result<(), String> {
    if v.eq_ignore_ascii_case(want) {
        Ok(())
    } else {
        Err(format!("only {want} is supported, got {v:?}"))
    }
}

fn optional<T>(v: &str, f: impl Fn(&str) -> std::result::Result<T, String>) -> std::result::Result<Option<T>, String> {
    if v == "none" {
        Ok(None)
    } else {
        f(v).map(Some)
    }
}

/// Integer with optional thousands separators.
pub fn int(v: &str) -> std::result::Result<u64, String> {
    v.replace(',', "").parse().map_err(|_| format!("expected an integer, got {v:?}"))
}

pub fn float(v: &str) -> std::result::Result<f64, String> {
    match v.replace(',', "").parse::<f64>() {
        Ok(x) if x.is_finite() => Ok(x),
        _ => Err(format!("expected a number, got {v:?}")),
    }
}

/// `8,192`.
pub fn group(n: u64) -> String {
    let digits = n.to_string();
    let mut out = String::new();
    for (i, c) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i).is_multiple_of(3) {
            out.push(',');
        }
        out.push(c);
    }
    out
}

/// Shortest round-trip text; small and large magnitudes as `6.0e-4`.
pub fn real(x: f64) -> String {
    let e = if x == 0.0 { 0 } else { x.abs().log10().floor() as i32 };
    if (-3..6).contains(&e) {
        return format!("{x}");
    }
    let s = format!("{x:e}");
    match s.split_once('e') {
        Some((mant, exp)) if !mant.contains('.') => format!("{mant}.0e{exp}"),
        _ => s,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn number_text() {
        assert_eq!(group(8192), "8,192");
        assert_eq!(group(1_200_000), "1,200,000");
        assert_eq!(group(42), "42");
        assert_eq!(real(6.0e-4), "6.0e-4");
        assert_eq!(real(1e-8), "1.0e-8");
        assert_eq!(real(0.999), "0.999");
        assert_eq!(real(10_000.0), "10000");
        assert_eq!(real(2.5e-7), "2.5e-7");
        for x in [6.0e-4, 1e-8, 0.1 + 0.2, 123456789.125, 3.0e-4] {
            assert_eq!(float(&real(x)).unwrap(), x);
        }
    }

    #[test]
    fn presets_round_trip() {
        for name in ttl_core::train::PRESET_NAMES {
            let c = RunConfig::preset(name).unwrap();
            assert_eq!(RunConfig::parse(&c.render()).unwrap(), c);
        }
    }

    #[test]
    fn overrides_and_errors() {
        let c = RunConfig::parse("preset = ttl-460m\nwarmup steps = 7\n# note\nmixed precision = bfloat16\n").unwrap();
        assert_eq!(c.train.warmup_steps, 7);
        assert_eq!(c.model.n_layers, 24);
        assert!(RunConfig::parse("optimizer = SGD").is_err());
        assert!(RunConfig::parse("warmup = 5").is_err());
        assert!(RunConfig::parse("no equals sign").is_err());
        assert!(RunConfig::parse("preset = ttl-2b").is_err());
    }
}

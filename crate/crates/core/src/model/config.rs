use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{bail, Result};

/// Dimensions of a decoder. Weight matrices are stored `[in, out]`, so a
/// projection is `x . W`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub hidden_size: usize,
    pub intermediate_size: usize,
    pub context_length: usize,
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub n_layers: usize,
    pub vocab_size: usize,
    pub rope_theta: f64,
    pub norm_eps: f64,
    pub tie_embeddings: bool,
}

impl ModelConfig {
    /// 768 hidden, 3072 intermediate, 12 heads, 12 layers.
    pub fn ttl_160m() -> Self {
        Self {
            hidden_size: 768,
            intermediate_size: 3072,
            context_length: 2048,
            n_heads: 12,
            n_kv_heads: 12,
            n_layers: 12,
            vocab_size: 32_000,
            rope_theta: 10_000.0,
            norm_eps: 1e-5,
            tie_embeddings: false,
        }
    }

    /// 1024 hidden, 4096 intermediate, 16 heads, 24 layers.
    pub fn ttl_460m() -> Self {
        Self {
            hidden_size: 1024,
            intermediate_size: 4096,
            n_heads: 16,
            n_kv_heads: 16,
            n_layers: 24,
            ..Self::ttl_160m()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("hidden size", self.hidden_size),
            ("intermediate size", self.intermediate_size),
            ("context length", self.context_length),
            ("heads", self.n_heads),
            ("key-value heads", self.n_kv_heads),
            ("vocab size", self.vocab_size),
        ];
        for (name, v) in dims {
            if v == 0 {
                bail!(Config, "{name} must be positive");
            }
        }
        if !self.hidden_size.is_multiple_of(self.n_heads) {
            bail!(Config, "hidden size {} is not divisible by {} heads", self.hidden_size, self.n_heads);
        }
        if !self.n_heads.is_multiple_of(self.n_kv_heads) {
            bail!(Config, "{} heads cannot be grouped over {} key-value heads", self.n_heads, self.n_kv_heads);
        }
        if !self.head_dim().is_multiple_of(2) {
            bail!(Config, "head dimension {} must be even for rotary embeddings", self.head_dim());
        }
        if !(self.rope_theta > 0.0 && self.norm_eps > 0.0) {
            bail!(Config, "rope theta and norm eps must be positive");
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_size / self.n_heads.max(1)
    }

    /// Width of the key and value projections.
    pub fn kv_dim(&self) -> usize {
        self.head_dim() * self.n_kv_heads
    }

    /// Query heads sharing each key/value head.
    pub fn kv_groups(&self) -> usize {
        self.n_heads / self.n_kv_heads.max(1)
    }
}

/// Role of a parameter tensor, used by initialization and quantization.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Embedding,
    /// RMSNorm gain vector.
    Norm,
    Projection,
    /// Projections feeding the residual stream (attention output, MLP down).
    ResidualProjection,
    Head,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Every parameter tensor in canonical order: embedding, then per layer
/// `attention_norm, wq, wk, wv, wo, ffn_norm, w_gate, w_up, w_down`, then the
/// final norm and (when untied) the output head. No biases anywhere.
pub fn param_specs(config: &ModelConfig) -> Vec<ParamSpec> {
    let (h, f, v, kv) = (config.hidden_size, config.intermediate_size, config.vocab_size, config.kv_dim());
    let spec = |name: String, shape: Vec<usize>, kind| ParamSpec { name, shape, kind };
    let mut out = vec![spec("tok_embeddings".into(), vec![v, h], ParamKind::Embedding)];
    for i in 0..config.n_layers {
        let p = |s: &str| format!("layers.{i}.{s}");
        out.extend([
            spec(p("attention_norm"), vec![h], ParamKind::Norm),
            spec(p("attention.wq"), vec![h, h], ParamKind::Projection),
            spec(p("attention.wk"), vec![h, kv], ParamKind::Projection),
            spec(p("attention.wv"), vec![h, kv], ParamKind::Projection),
            spec(p("attention.wo"), vec![h, h], ParamKind::ResidualProjection),
            spec(p("ffn_norm"), vec![h], ParamKind::Norm),
            spec(p("feed_forward.w_gate"), vec![h, f], ParamKind::Projection),
            spec(p("feed_forward.w_up"), vec![h, f], ParamKind::Projection),
            spec(p("feed_forward.w_down"), vec![f, h], ParamKind::ResidualProjection),
        ]);
    }
    out.push(spec("norm".into(), vec![h], ParamKind::Norm));
    if !config.tie_embeddings {
        out.push(spec("output".into(), vec![h, v], ParamKind::Head));
    }
    out
}

/// Exact number of scalar parameters.
pub fn param_count(config: &ModelConfig) -> u64 {
    param_specs(config).iter().map(|s| s.numel() as u64).sum()
}

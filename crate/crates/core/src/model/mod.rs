//! Llama-style decoder: pre-RMSNorm residual blocks with rotary
//! grouped-query attention and a SwiGLU MLP, no biases, no dropout.
//!
//! The training path records onto a [`Tape`]; the free functions at the
//! bottom wrap single components for direct use and testing.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{bail, Result};
use crate::tensor::{Scalar, Tape, Tensor, Var};

mod config;
mod params;

pub use config::{param_count, param_specs, ModelConfig, ParamKind, ParamSpec};
pub use params::{LayerParams, ModelParams, INIT_STD};

/// Tape handles of one decoder layer.
#[derive(Debug, Clone, Copy)]
pub struct LayerVars {
    pub attention_norm: Var,
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub ffn_norm: Var,
    pub w_gate: Var,
    pub w_up: Var,
    pub w_down: Var,
}

/// Tape handles of every parameter, in [`param_specs`] order.
#[derive(Debug, Clone)]
pub struct ParamVars {
    pub tok_embeddings: Var,
    pub layers: Vec<LayerVars>,
    pub norm: Var,
    pub output: Option<Var>,
}

impl ParamVars {
    pub fn all(&self) -> Vec<Var> {
        let mut out = vec![self.tok_embeddings];
        for l in &self.layers {
            out.extend([l.attention_norm, l.wq, l.wk, l.wv, l.wo, l.ffn_norm, l.w_gate, l.w_up, l.w_down]);
        }
        out.push(self.norm);
        out.extend(self.output);
        out
    }
}

fn layer_vars<S: Scalar>(tape: &mut Tape<S>, l: &LayerParams<S>, requires_grad: bool) -> LayerVars {
    let mut leaf = |t: &Tensor<S>| tape.leaf(t.clone(), requires_grad);
    LayerVars {
        attention_norm: leaf(&l.attention_norm),
        wq: leaf(&l.wq),
        wk: leaf(&l.wk),
        wv: leaf(&l.wv),
        wo: leaf(&l.wo),
        ffn_norm: leaf(&l.ffn_norm),
        w_gate: leaf(&l.w_gate),
        w_up: leaf(&l.w_up),
        w_down: leaf(&l.w_down),
    }
}

/// A decoder: configuration plus weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Llama<S = f32> {
    pub config: ModelConfig,
    pub params: ModelParams<S>,
}

impl<S: Scalar> Llama<S> {
    pub fn new(config: ModelConfig, params: ModelParams<S>) -> Result<Self> {
        config.validate()?;
        let params = ModelParams::from_tensors(&config, params.into_tensors())?;
        Ok(Self { config, params })
    }

    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = ModelParams::init(&config, seed);
        Ok(Self { config, params })
    }

    /// Copies every weight onto the tape as a leaf.
    pub fn record(&self, tape: &mut Tape<S>, requires_grad: bool) -> ParamVars {
        let tok_embeddings = tape.leaf(self.params.tok_embeddings.clone(), requires_grad);
        let layers = self.params.layers.iter().map(|l| layer_vars(tape, l, requires_grad)).collect();
        let norm = tape.leaf(self.params.norm.clone(), requires_grad);
        let output = self.params.output.as_ref().map(|t| tape.leaf(t.clone(), requires_grad));
        ParamVars { tok_embeddings, layers, norm, output }
    }

    /// Logits `[batch * seq, vocab]` for `batch` sequences of `seq` tokens stored back to back.
    pub fn forward_tape(
        &self,
        tape: &mut Tape<S>,
        vars: &ParamVars,
        tokens: &[u32],
        batch: usize,
        seq: usize,
    ) -> Result<Var> {
        let c = &self.config;
        if tokens.len() != batch * seq || seq == 0 {
            bail!(Shape, "{} tokens do not form {batch} sequences of {seq}", tokens.len());
        }
        if seq > c.context_length {
            bail!(Domain, "sequence of {seq} exceeds the context length {}", c.context_length);
        }
        let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        let mut x = tape.embedding(vars.tok_embeddings, &ids)?;
        for layer in &vars.layers {
            let h = tape.rms_norm(x, layer.attention_norm, c.norm_eps)?;
            let a = attention_block(tape, c, layer, h, batch, seq, true)?;
            x = tape.add(x, a)?;
            let h = tape.rms_norm(x, layer.ffn_norm, c.norm_eps)?;
            let m = mlp_block(tape, layer, h)?;
            x = tape.add(x, m)?;
        }
        let h = tape.rms_norm(x, vars.norm, c.norm_eps)?;
        let head = match vars.output {
            Some(w) => w,
            None => tape.permute(vars.tok_embeddings, &[1, 0])?,
        };
        tape.matmul(h, head)
    }

    /// Logits `[tokens.len(), vocab]` for one sequence.
    pub fn forward(&self, tokens: &[u32]) -> Result<Tensor<S>> {
        let mut tape = Tape::new();
        let vars = self.record(&mut tape, false);
        let logits = self.forward_tape(&mut tape, &vars, tokens, 1, tokens.len())?;
        Ok(tape.take_value(logits))
    }
}

/// Additive causal mask `[seq, seq]`: `-inf` above the diagonal.
pub fn causal_mask<S: Scalar>(seq: usize) -> Tensor<S> {
    Tensor::from_fn(&[seq, seq], |i| if i % seq > i / seq { S::neg_infinity() } else { S::zero() })
}

/// Grouped-query self-attention over `x: [batch * seq, hidden]`.
pub fn attention_block<S: Scalar>(
    tape: &mut Tape<S>,
    c: &ModelConfig,
    layer: &LayerVars,
    x: Var,
    batch: usize,
    seq: usize,
    causal: bool,
) -> Result<Var> {
    let (hd, heads, kv_heads) = (c.head_dim(), c.n_heads, c.n_kv_heads);
    let positions: Vec<usize> = (0..seq).collect();

    let q = tape.matmul(x, layer.wq)?;
    let q = tape.reshape(q, &[batch, seq, heads, hd])?;
    let q = tape.rope(q, &positions, c.rope_theta)?;
    let q = tape.permute(q, &[0, 2, 1, 3])?;

    let k = tape.matmul(x, layer.wk)?;
    let k = tape.reshape(k, &[batch, seq, kv_heads, hd])?;
    let k = tape.rope(k, &positions, c.rope_theta)?;
    let k = tape.permute(k, &[0, 2, 1, 3])?;

    let v = tape.matmul(x, layer.wv)?;
    let v = tape.reshape(v, &[batch, seq, kv_heads, hd])?;
    let v = tape.permute(v, &[0, 2, 1, 3])?;

    let (k, v) = if kv_heads == heads {
        (k, v)
    } else {
        let g = c.kv_groups();
        (tape.repeat_kv(k, g)?, tape.repeat_kv(v, g)?)
    };

    let kt = tape.permute(k, &[0, 1, 3, 2])?;
    let scores = tape.matmul(q, kt)?;
    let scores = tape.scale(scores, 1.0 / (hd as f64).sqrt());
    let mask = causal.then(|| causal_mask::<S>(seq));
    let probs = tape.softmax_rows(scores, mask.as_ref())?;
    let out = tape.matmul(probs, v)?;
    let out = tape.permute(out, &[0, 2, 1, 3])?;
    let out = tape.reshape(out, &[batch * seq, heads * hd])?;
    tape.matmul(out, layer.wo)
}

/// `down(silu(x . gate) * (x . up))`.
pub fn mlp_block<S: Scalar>(tape: &mut Tape<S>, layer: &LayerVars, x: Var) -> Result<Var> {
    let gate = tape.matmul(x, layer.w_gate)?;
    let gate = tape.silu(gate);
    let up = tape.matmul(x, layer.w_up)?;
    let h = tape.mul(gate, up)?;
    tape.matmul(h, layer.w_down)
}

/// `x / sqrt(mean(x^2) + eps) * gain`.
pub fn rmsnorm<S: Scalar>(x: &[S], gain: &[S], eps: f64) -> Result<Vec<S>> {
    if x.len() != gain.len() || x.is_empty() {
        bail!(Shape, "rmsnorm input of {} with gain of {}", x.len(), gain.len());
    }
    let ms = x.iter().fold(S::zero(), |acc, &v| acc + v * v) / S::of(x.len() as f64);
    let r = S::one() / (ms + S::of(eps)).sqrt();
    Ok(x.iter().zip(gain).map(|(&v, &g)| v * r * g).collect())
}

/// Rotary embedding of `[seq, heads, head_dim]` at the given positions.
pub fn rope_apply<S: Scalar>(x: &Tensor<S>, positions: &[usize], theta: f64) -> Result<Tensor<S>> {
    let mut tape = Tape::new();
    let v = tape.leaf(x.clone(), false);
    let r = tape.rope(v, positions, theta)?;
    Ok(tape.take_value(r))
}

fn layer_only<S: Scalar>(tape: &mut Tape<S>, layer: &LayerParams<S>) -> LayerVars {
    layer_vars(tape, layer, false)
}

/// Attention sub-layer (without norm or residual) applied to one sequence `[seq, hidden]`.
pub fn gqa_attention<S: Scalar>(
    x: &Tensor<S>,
    layer: &LayerParams<S>,
    config: &ModelConfig,
    causal: bool,
) -> Result<Tensor<S>> {
    config.validate()?;
    let [seq, hidden] = x.shape() else {
        bail!(Shape, "attention input must be [seq, hidden], got {:?}", x.shape());
    };
    if *hidden != config.hidden_size {
        bail!(Shape, "attention input width {hidden} != hidden size {}", config.hidden_size);
    }
    if *seq > config.context_length {
        bail!(Domain, "sequence of {seq} exceeds the context length {}", config.context_length);
    }
    let seq = *seq;
    let mut tape = Tape::new();
    let vars = layer_only(&mut tape, layer);
    let xv = tape.leaf(x.clone(), false);
    let out = attention_block(&mut tape, config, &vars, xv, 1, seq, causal)?;
    Ok(tape.take_value(out))
}

/// SwiGLU sub-layer applied to `[seq, hidden]`.
pub fn swiglu_mlp<S: Scalar>(x: &Tensor<S>, layer: &LayerParams<S>) -> Result<Tensor<S>> {
    let mut tape = Tape::new();
    let vars = layer_only(&mut tape, layer);
    let xv = tape.leaf(x.clone(), false);
    let out = mlp_block(&mut tape, &vars, xv)?;
    Ok(tape.take_value(out))
}

/// Mean next-token negative log-likelihood (nats) of `targets` under `[n, vocab]` logits.
pub fn cross_entropy<S: Scalar>(logits: &Tensor<S>, targets: &[u32]) -> Result<f64> {
    let mut tape = Tape::new();
    let l = tape.leaf(logits.clone(), false);
    let t: Vec<usize> = targets.iter().map(|&t| t as usize).collect();
    let loss = tape.cross_entropy(l, &t, None)?;
    Ok(tape.value(loss).item()?.real())
}

//! Autoregressive decoding with a key-value cache, over dense or 4-bit weights.

use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{bail, Result};
use crate::model::{rmsnorm, Llama, ModelConfig, ModelParams};
use crate::tensor::kernels::{matmul_acc, matmul_acc_bt};
use crate::tensor::tape::{rope_tables, rotate, silu, softmax_into};
use crate::tensor::Tensor;

mod quant;

pub use quant::{
    dequant_matmul, footprint_formula, QuantMatrix, QuantOptions, QuantizedModel, StoredTensor, DEFAULT_GROUP_SIZE,
    GROUP_META_BYTES, MAX_CODE,
};

/// A projection `x . W` with `W: [in, out]`.
#[derive(Debug, Clone, PartialEq)]
pub enum Linear {
    Dense(Tensor<f32>),
    Quant(QuantMatrix),
}

impl Linear {
    fn from_stored(t: &StoredTensor) -> Result<Self> {
        Ok(match t {
            StoredTensor::Quant(q) => Self::Quant(q.clone()),
            StoredTensor::Half { .. } => Self::Dense(t.to_tensor()?),
        })
    }

    fn dims(&self) -> (usize, usize) {
        match self {
            Self::Dense(t) => (t.shape()[0], t.shape()[1]),
            Self::Quant(q) => (q.rows, q.cols),
        }
    }

    fn apply(&self, x: &[f32], m: usize) -> Result<Vec<f32>> {
        match self {
            Self::Dense(w) => {
                let (k, n) = self.dims();
                if x.len() != m * k {
                    bail!(Shape, "input of {} values is not [{m}, {k}]", x.len());
                }
                let mut out = vec![0.0; m * n];
                matmul_acc(x, w.data(), &mut out, m, k, n);
                Ok(out)
            }
            Self::Quant(q) => dequant_matmul(x, m, q),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Layer {
    attention_norm: Vec<f32>,
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    ffn_norm: Vec<f32>,
    w_gate: Linear,
    w_up: Linear,
    w_down: Linear,
}

#[derive(Debug, Clone, PartialEq)]
enum Head {
    /// Logits against the embedding table.
    Tied,
    Linear(Linear),
}

/// Forward-only decoder.
#[derive(Debug, Clone, PartialEq)]
pub struct InferenceModel {
    config: ModelConfig,
    embeddings: Vec<f32>,
    layers: Vec<Layer>,
    norm: Vec<f32>,
    head: Head,
}

/// Per-layer keys and values after rotation, `[len, kv_dim]` each.
#[derive(Debug, Clone, Default)]
pub struct KvCache {
    keys: Vec<Vec<f32>>,
    values: Vec<Vec<f32>>,
    len: usize,
}

impl KvCache {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn clear(&mut self) {
        self.keys.iter_mut().chain(self.values.iter_mut()).for_each(Vec::clear);
        self.len = 0;
    }
}

impl InferenceModel {
    pub fn from_llama(model: &Llama<f32>) -> Result<Self> {
        Self::from_params(&model.config, &model.params)
    }

    pub fn from_params(config: &ModelConfig, p: &ModelParams<f32>) -> Result<Self> {
        config.validate()?;
        let dense = |t: &Tensor<f32>| Linear::Dense(t.clone());
        let layers = p
            .layers
            .iter()
            .map(|l| Layer {
                attention_norm: l.attention_norm.data().to_vec(),
                wq: dense(&l.wq),
                wk: dense(&l.wk),
                wv: dense(&l.wv),
                wo: dense(&l.wo),
                ffn_norm: l.ffn_norm.data().to_vec(),
                w_gate: dense(&l.w_gate),
                w_up: dense(&l.w_up),
                w_down: dense(&l.w_down),
            })
            .collect();
        let head = match &p.output {
            Some(w) => Head::Linear(dense(w)),
            None => Head::Tied,
        };
        Ok(Self {
            config: config.clone(),
            embeddings: p.tok_embeddings.data().to_vec(),
            layers,
            norm: p.norm.data().to_vec(),
            head,
        })
    }

    /// Runs projections straight from 4-bit storage; exempt tensors are widened to f32.
    pub fn from_quantized(q: &QuantizedModel) -> Result<Self> {
        q.validate()?;
        let mut it = q.tensors.iter().map(|(_, t)| t);
        let mut next = || it.next().expect("validated tensor count");
        let embeddings = next().to_tensor()?.into_data();
        let mut layers = Vec::with_capacity(q.config.n_layers);
        for _ in 0..q.config.n_layers {
            layers.push(Layer {
                attention_norm: next().to_tensor()?.into_data(),
                wq: Linear::from_stored(next())?,
                wk: Linear::from_stored(next())?,
                wv: Linear::from_stored(next())?,
                wo: Linear::from_stored(next())?,
                ffn_norm: next().to_tensor()?.into_data(),
                w_gate: Linear::from_stored(next())?,
                w_up: Linear::from_stored(next())?,
                w_down: Linear::from_stored(next())?,
            });
        }
        let norm = next().to_tensor()?.into_data();
        let head = if q.config.tie_embeddings { Head::Tied } else { Head::Linear(Linear::from_stored(next())?) };
        Ok(Self { config: q.config.clone(), embeddings, layers, norm, head })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn new_cache(&self) -> KvCache {
        KvCache { keys: vec![Vec::new(); self.layers.len()], values: vec![Vec::new(); self.layers.len()], len: 0 }
    }

    fn norm_rows(&self, x: &[f32], gain: &[f32]) -> Result<Vec<f32>> {
        let mut out = Vec::with_capacity(x.len());
        for row in x.chunks(self.config.hidden_size) {
            out.extend(rmsnorm(row, gain, self.config.norm_eps)?);
        }
        Ok(out)
    }

    /// Appends `tokens` to the cache and returns the logits of the last one.
    pub fn forward(&self, cache: &mut KvCache, tokens: &[u32]) -> Result<Vec<f32>> {
        let c = &self.config;
        let (h, hd, heads, kv_heads) = (c.hidden_size, c.head_dim(), c.n_heads, c.n_kv_heads);
        let (kv_dim, groups) = (c.kv_dim(), c.kv_groups());
        let m = tokens.len();
        if m == 0 {
            bail!(Empty, "no tokens to decode");
        }
        if cache.len + m > c.context_length {
            bail!(Domain, "{} cached plus {m} new tokens exceed the context length {}", cache.len, c.context_length);
        }
        if cache.keys.len() != self.layers.len() {
            bail!(Shape, "cache built for {} layers, model has {}", cache.keys.len(), self.layers.len());
        }
        let mut x = Vec::with_capacity(m * h);
        for &t in tokens {
            if t as usize >= c.vocab_size {
                bail!(OutOfRange, "token {t} outside the vocabulary of {}", c.vocab_size);
            }
            x.extend_from_slice(&self.embeddings[t as usize * h..(t as usize + 1) * h]);
        }
        let start = cache.len;
        let positions: Vec<usize> = (start..start + m).collect();
        let (cos, sin) = rope_tables::<f32>(&positions, hd, c.rope_theta);
        let inv_sqrt = 1.0 / (hd as f32).sqrt();
        let mut scores = vec![0.0f32; start + m];
        let mut probs = vec![0.0f32; start + m];

        for (li, layer) in self.layers.iter().enumerate() {
            let xn = self.norm_rows(&x, &layer.attention_norm)?;
            let mut q = layer.wq.apply(&xn, m)?;
            let mut k = layer.wk.apply(&xn, m)?;
            let v = layer.wv.apply(&xn, m)?;
            rotate(&mut q, &cos, &sin, m, heads, hd, false);
            rotate(&mut k, &cos, &sin, m, kv_heads, hd, false);
            cache.keys[li].extend_from_slice(&k);
            cache.values[li].extend_from_slice(&v);
            let (keys, values) = (&cache.keys[li], &cache.values[li]);

            let mut attn = vec![0.0f32; m * h];
            for i in 0..m {
                let visible = start + i + 1;
                for head in 0..heads {
                    let kvh = head / groups;
                    let qv = &q[i * h + head * hd..i * h + (head + 1) * hd];
                    for (j, s) in scores[..visible].iter_mut().enumerate() {
                        let kv = &keys[j * kv_dim + kvh * hd..j * kv_dim + (kvh + 1) * hd];
                        let dot = qv.iter().zip(kv).fold(0.0f32, |a, (&p, &q)| a + p * q);
                        *s = dot * inv_sqrt;
                    }
                    softmax_into(&scores[..visible], &mut probs[..visible]);
                    let out = &mut attn[i * h + head * hd..i * h + (head + 1) * hd];
                    for (j, &p) in probs[..visible].iter().enumerate() {
                        let vv = &values[j * kv_dim + kvh * hd..j * kv_dim + (kvh + 1) * hd];
                        for (o, &val) in out.iter_mut().zip(vv) {
                            *o += p * val;
                        }
                    }
                }
            }
            let proj = layer.wo.apply(&attn, m)?;
            x.iter_mut().zip(&proj).for_each(|(a, b)| *a += b);

            let xn = self.norm_rows(&x, &layer.ffn_norm)?;
            let gate = layer.w_gate.apply(&xn, m)?;
            let up = layer.w_up.apply(&xn, m)?;
            let hidden: Vec<f32> = gate.iter().zip(&up).map(|(&g, &u)| silu(g) * u).collect();
            let down = layer.w_down.apply(&hidden, m)?;
            x.iter_mut().zip(&down).for_each(|(a, b)| *a += b);
        }
        cache.len += m;

        let last = rmsnorm(&x[(m - 1) * h..], &self.norm, c.norm_eps)?;
        match &self.head {
            Head::Linear(w) => w.apply(&last, 1),
            Head::Tied => {
                let mut out = vec![0.0; c.vocab_size];
                matmul_acc_bt(&last, &self.embeddings, &mut out, 1, c.vocab_size, h);
                Ok(out)
            }
        }
    }

    /// Logits after a fresh pass over `tokens`, without reusing any cache.
    pub fn logits(&self, tokens: &[u32]) -> Result<Vec<f32>> {
        self.forward(&mut self.new_cache(), tokens)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationParams {
    pub max_new_tokens: usize,
    /// Zero selects the arg-max.
    pub temperature: f64,
    pub top_k: Option<usize>,
    pub seed: u64,
    /// Decoding ends after emitting any of these.
    pub stop_ids: Vec<u32>,
}

impl Default for GenerationParams {
    fn default() -> Self {
        Self { max_new_tokens: 64, temperature: 0.0, top_k: None, seed: 0, stop_ids: Vec::new() }
    }
}

impl GenerationParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            bail!(Config, "temperature must be finite and non-negative");
        }
        if self.top_k == Some(0) {
            bail!(Config, "top-k must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Generation {
    /// New tokens only.
    pub tokens: Vec<u32>,
    /// The prompt was longer than the context window and lost its head.
    pub truncated: bool,
    /// Ended on a stop token rather than the length limit.
    pub stopped: bool,
}

/// First index of the maximum.
pub fn argmax(logits: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in logits.iter().enumerate() {
        if x > logits[best] {
            best = i;
        }
    }
    best
}

/// Draws one token from temperature-scaled logits restricted to the top `k`.
pub fn sample(logits: &[f32], temperature: f64, top_k: Option<usize>, rng: &mut impl Rng) -> usize {
    if temperature == 0.0 {
        return argmax(logits);
    }
    let mut order: Vec<usize> = (0..logits.len()).collect();
    order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    order.truncate(top_k.unwrap_or(logits.len()).min(logits.len()));
    let max = logits[order[0]] as f64;
    let weights: Vec<f64> = order.iter().map(|&i| Float::exp((logits[i] as f64 - max) / temperature)).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (&i, &w) in order.iter().zip(&weights) {
        if u < w {
            return i;
        }
        u -= w;
    }
    *order.last().expect("non-empty vocabulary")
}

/// Sliding-window decoder state: the cache always holds a suffix of `history`.
struct Window<'a> {
    model: &'a InferenceModel,
    cache: KvCache,
    history: Vec<u32>,
}

impl<'a> Window<'a> {
    /// Prefills with the last context-length tokens of `prompt`.
    fn start(model: &'a InferenceModel, prompt: &[u32]) -> Result<(Self, Vec<f32>, bool)> {
        if prompt.is_empty() {
            bail!(Empty, "prompt is empty");
        }
        let ctx = model.config.context_length;
        let truncated = prompt.len() > ctx;
        let history = prompt[prompt.len().saturating_sub(ctx)..].to_vec();
        let mut cache = model.new_cache();
        let logits = model.forward(&mut cache, &history)?;
        Ok((Self { model, cache, history }, logits, truncated))
    }

    /// Feeds one token; re-prefills the last context-length tokens when the cache is full.
    fn push(&mut self, token: u32) -> Result<Vec<f32>> {
        self.history.push(token);
        let ctx = self.model.config.context_length;
        if self.cache.len() < ctx {
            return self.model.forward(&mut self.cache, &[token]);
        }
        self.cache.clear();
        let tail = &self.history[self.history.len() - ctx..];
        self.model.forward(&mut self.cache, tail)
    }
}

pub fn generate(model: &InferenceModel, prompt: &[u32], params: &GenerationParams) -> Result<Generation> {
    params.validate()?;
    let (mut window, mut logits, truncated) = Window::start(model, prompt)?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut tokens = Vec::with_capacity(params.max_new_tokens);
    let mut stopped = false;
    for i in 0..params.max_new_tokens {
        let next = sample(&logits, params.temperature, params.top_k, &mut rng) as u32;
        tokens.push(next);
        if params.stop_ids.contains(&next) {
            stopped = true;
            break;
        }
        if i + 1 < params.max_new_tokens {
            logits = window.push(next)?;
        }
    }
    Ok(Generation { tokens, truncated, stopped })
}

/// Greedy choice at each position of `continuation` when it is fed after `prompt`.
pub fn teacher_forced_choices(model: &InferenceModel, prompt: &[u32], continuation: &[u32]) -> Result<Vec<u32>> {
    let (mut window, mut logits, _) = Window::start(model, prompt)?;
    let mut out = Vec::with_capacity(continuation.len());
    for (i, &t) in continuation.iter().enumerate() {
        out.push(argmax(&logits) as u32);
        if i + 1 < continuation.len() {
            logits = window.push(t)?;
        }
    }
    Ok(out)
}

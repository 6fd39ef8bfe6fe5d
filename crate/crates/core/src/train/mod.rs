//! Deterministic, resumable training: AdamW with warmup-cosine schedule,
//! gradient accumulation, global-norm clipping, periodic evaluation and
//! checkpoint hooks.
//!
//! All state that influences future steps lives in [`TrainState`], so a run
//! split at any step and resumed from a saved state reproduces the unbroken
//! run bit for bit (given the same [`Clock`] readings).

mod config;
mod optim;

use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::PackedDataset;
use crate::error::{bail, Error, Result};
use crate::model::{Llama, ModelConfig, ModelParams};
use crate::telemetry::{CounterSnapshot, Counters, TelemetryLog};
use crate::tensor::{Scalar, Tape, Tensor};

pub use config::{preset, Preset, TrainConfig, PRESET_NAMES};
pub use optim::{clip_grad_norm, global_norm, lr_at, AdamW};

/// Position of the shuffled data stream: permutation `(seed, epoch)`, next index `cursor`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SamplerState {
    pub seed: u64,
    pub epoch: u64,
    pub cursor: u64,
}

/// Permutation of `0..n` for one epoch.
pub fn epoch_permutation(seed: u64, epoch: u64, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Draws sequence indices epoch by epoch; a batch never spans two epochs.
#[derive(Debug, Clone)]
pub struct Sampler {
    state: SamplerState,
    order: Vec<usize>,
}

impl Sampler {
    pub fn new(state: SamplerState, n: usize) -> Self {
        Self { order: epoch_permutation(state.seed, state.epoch, n), state }
    }

    pub fn state(&self) -> SamplerState {
        self.state
    }

    pub fn next_batch(&mut self, size: usize) -> Result<Vec<usize>> {
        let n = self.order.len();
        if size == 0 || size > n {
            bail!(Config, "batch of {size} sequences from a dataset of {n}");
        }
        if self.state.cursor as usize + size > n {
            self.state.epoch += 1;
            self.state.cursor = 0;
            self.order = epoch_permutation(self.state.seed, self.state.epoch, n);
        }
        let start = self.state.cursor as usize;
        self.state.cursor += size as u64;
        Ok(self.order[start..start + size].to_vec())
    }
}

/// `rows` sequences of `seq_len` tokens, plus optional per-token loss weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub tokens: Vec<u32>,
    pub mask: Option<Vec<u8>>,
    pub rows: usize,
    pub seq_len: usize,
}

impl Batch {
    pub fn from_dataset(ds: &PackedDataset, indices: &[usize]) -> Self {
        let view = ds.select(indices);
        Self {
            mask: view.loss_mask().map(<[u8]>::to_vec),
            tokens: view.tokens().to_vec(),
            rows: indices.len(),
            seq_len: ds.seq_len,
        }
    }

    /// Model inputs `seq[..L-1]`, targets `seq[1..]` and target weights.
    fn shifted<S: Scalar>(&self) -> (Vec<u32>, Vec<usize>, Option<Vec<S>>) {
        let l = self.seq_len;
        let mut inputs = Vec::with_capacity(self.rows * (l - 1));
        let mut targets = Vec::with_capacity(self.rows * (l - 1));
        let mut weights = self.mask.as_ref().map(|_| Vec::with_capacity(self.rows * (l - 1)));
        for r in 0..self.rows {
            let seq = &self.tokens[r * l..(r + 1) * l];
            inputs.extend_from_slice(&seq[..l - 1]);
            targets.extend(seq[1..].iter().map(|&t| t as usize));
            if let (Some(w), Some(m)) = (&mut weights, &self.mask) {
                w.extend(m[r * l + 1..(r + 1) * l].iter().map(|&b| S::of(b as f64)));
            }
        }
        (inputs, targets, weights)
    }
}

/// Cross-entropy over unmasked positions only. `prompt_mask[i]` marks position
/// `i` as prompt; a fully masked input is an error.
pub fn sft_loss<S: Scalar>(logits: &Tensor<S>, targets: &[u32], prompt_mask: &[bool]) -> Result<f64> {
    if prompt_mask.len() != targets.len() {
        bail!(Shape, "{} mask entries for {} targets", prompt_mask.len(), targets.len());
    }
    let mut tape = Tape::new();
    let x = tape.leaf(logits.clone(), false);
    let t: Vec<usize> = targets.iter().map(|&t| t as usize).collect();
    let w: Vec<S> = prompt_mask.iter().map(|&m| if m { S::zero() } else { S::one() }).collect();
    let loss = tape.cross_entropy(x, &t, Some(&w))?;
    Ok(tape.value(loss).item()?.real())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    /// Step count after the update.
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub tokens: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalReport {
    pub loss: f64,
    pub perplexity: f64,
    pub tokens: u64,
}

/// Source of wall-clock readings in seconds.
pub trait Clock {
    fn now(&mut self) -> f64;
}

/// Advances by a fixed amount per reading.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FixedClock {
    pub t: f64,
    pub dt: f64,
}

impl FixedClock {
    pub fn new(dt: f64) -> Self {
        Self { t: 0.0, dt }
    }
}

impl Clock for FixedClock {
    fn now(&mut self) -> f64 {
        let t = self.t;
        self.t += self.dt;
        t
    }
}

/// Callbacks fired by [`Trainer::run_until`]. All default to no-ops.
pub trait Hooks<S: Scalar> {
    fn on_step(&mut self, _report: &StepReport) -> Result<()> {
        Ok(())
    }
    fn on_eval(&mut self, _step: u64, _report: &EvalReport) -> Result<()> {
        Ok(())
    }
    fn on_checkpoint(&mut self, _trainer: &Trainer<S>) -> Result<()> {
        Ok(())
    }
}

pub struct NoHooks;

impl<S: Scalar> Hooks<S> for NoHooks {}

/// Everything needed to continue a run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState<S = f32> {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub step: u64,
    pub params: ModelParams<S>,
    pub first_moment: Vec<Tensor<S>>,
    pub second_moment: Vec<Tensor<S>>,
    pub sampler: SamplerState,
    pub counters: CounterSnapshot,
    pub log: TelemetryLog,
    pub tokenizer_fingerprint: u64,
}

pub struct Trainer<S: Scalar = f32> {
    model: Llama<S>,
    config: TrainConfig,
    optimizer: AdamW,
    step: u64,
    first_moment: Vec<Tensor<S>>,
    second_moment: Vec<Tensor<S>>,
    sampler: SamplerState,
    counters: Counters,
    log: TelemetryLog,
    tokenizer_fingerprint: u64,
}

impl<S: Scalar> Trainer<S> {
    pub fn new(model: Llama<S>, config: TrainConfig, log: TelemetryLog, tokenizer_fingerprint: u64) -> Result<Self> {
        let state = TrainState {
            step: 0,
            first_moment: zeros_like(&model.params),
            second_moment: zeros_like(&model.params),
            sampler: SamplerState { seed: config.seed, ..SamplerState::default() },
            counters: CounterSnapshot::default(),
            model: model.config,
            params: model.params,
            train: config,
            log,
            tokenizer_fingerprint,
        };
        Self::from_state(state)
    }

    pub fn from_state(s: TrainState<S>) -> Result<Self> {
        s.train.validate()?;
        if s.step > s.train.total_steps {
            bail!(Config, "checkpoint step {} beyond total steps {}", s.step, s.train.total_steps);
        }
        let model = Llama::new(s.model, s.params)?;
        let shapes: Vec<&[usize]> = model.params.tensors().iter().map(|t| t.shape()).collect();
        for moments in [&s.first_moment, &s.second_moment] {
            let ok = moments.len() == shapes.len() && moments.iter().zip(&shapes).all(|(m, s)| m.shape() == *s);
            if !ok {
                bail!(Shape, "optimizer moments do not match the parameter shapes");
            }
        }
        Ok(Self {
            optimizer: AdamW::from_config(&s.train),
            model,
            config: s.train,
            step: s.step,
            first_moment: s.first_moment,
            second_moment: s.second_moment,
            sampler: s.sampler,
            counters: Counters::from_snapshot(s.counters),
            log: s.log,
            tokenizer_fingerprint: s.tokenizer_fingerprint,
        })
    }

    pub fn state(&self) -> TrainState<S> {
        TrainState {
            model: self.model.config.clone(),
            train: self.config.clone(),
            step: self.step,
            params: self.model.params.clone(),
            first_moment: self.first_moment.clone(),
            second_moment: self.second_moment.clone(),
            sampler: self.sampler,
            counters: self.counters.snapshot(),
            log: self.log.clone(),
            tokenizer_fingerprint: self.tokenizer_fingerprint,
        }
    }

    pub fn model(&self) -> &Llama<S> {
        &self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn counters(&self) -> CounterSnapshot {
        self.counters.snapshot()
    }

    pub fn log(&self) -> &TelemetryLog {
        &self.log
    }

    pub fn tokenizer_fingerprint(&self) -> u64 {
        self.tokenizer_fingerprint
    }

    /// Mean loss of one micro-batch and the gradient of every parameter.
    pub fn loss_and_grads(&self, batch: &Batch) -> Result<(f64, Vec<Vec<S>>)> {
        let (inputs, targets, weights) = batch.shifted::<S>();
        let mut tape = Tape::new();
        let vars = self.model.record(&mut tape, true);
        let logits = self.model.forward_tape(&mut tape, &vars, &inputs, batch.rows, batch.seq_len - 1)?;
        let loss = tape.cross_entropy(logits, &targets, weights.as_deref())?;
        tape.backward(loss)?;
        let value = tape.value(loss).item()?.real();
        let grads = vars.all().into_iter().map(|v| tape.take_grad(v).expect("parameters require gradients")).collect();
        Ok((value, grads))
    }

    /// One optimizer step over `grad_accum_steps` micro-batches. Gradients are
    /// averaged across micro-batches; the reported loss is their mean.
    pub fn train_step(&mut self, micro_batches: &[Batch]) -> Result<StepReport> {
        let c = &self.config;
        if micro_batches.len() as u64 != c.grad_accum_steps {
            bail!(Shape, "{} micro-batches for {} accumulation steps", micro_batches.len(), c.grad_accum_steps);
        }
        for b in micro_batches {
            if b.seq_len != c.seq_len || (b.rows * b.seq_len) as u64 * c.grad_accum_steps != c.tokens_per_batch {
                bail!(
                    Shape,
                    "micro-batch of {}x{} does not match {} tokens per batch",
                    b.rows,
                    b.seq_len,
                    c.tokens_per_batch
                );
            }
        }
        if self.step >= c.total_steps {
            bail!(OutOfRange, "training already reached {} steps", c.total_steps);
        }
        let lr = lr_at(self.step, c)?;
        let mut total: Option<Vec<Vec<S>>> = None;
        let mut loss_sum = 0.0;
        for b in micro_batches {
            let (loss, grads) = self.loss_and_grads(b)?;
            loss_sum += loss;
            match &mut total {
                None => total = Some(grads),
                Some(acc) => {
                    for (a, g) in acc.iter_mut().zip(grads) {
                        a.iter_mut().zip(g).for_each(|(x, y)| *x = *x + y);
                    }
                }
            }
        }
        let mut grads = total.expect("at least one micro-batch");
        let loss = loss_sum / micro_batches.len() as f64;
        if !loss.is_finite() {
            return Err(Error::NonFinite { what: "loss".into(), step: self.step });
        }
        if micro_batches.len() > 1 {
            let inv = S::of(1.0 / micro_batches.len() as f64);
            grads.iter_mut().flat_map(|g| g.iter_mut()).for_each(|x| *x = *x * inv);
        }
        let grad_norm = match c.clip_norm {
            Some(max) => clip_grad_norm(&mut grads, max),
            None => global_norm(&grads),
        };
        if !grad_norm.is_finite() {
            return Err(Error::NonFinite { what: "gradient".into(), step: self.step });
        }
        let t = self.step + 1;
        let opt = self.optimizer;
        for (((p, g), m), v) in self
            .model
            .params
            .tensors_mut()
            .into_iter()
            .zip(&grads)
            .zip(&mut self.first_moment)
            .zip(&mut self.second_moment)
        {
            opt.update(p.data_mut(), g, m.data_mut(), v.data_mut(), lr, t);
        }
        self.step = t;
        self.counters.add_tokens(c.tokens_per_batch);
        self.counters.add_step();
        Ok(StepReport { step: t, loss, lr, grad_norm, tokens: c.tokens_per_batch })
    }

    /// Mean next-token loss and perplexity over every sequence of `eval`.
    pub fn evaluate(&self, eval: &PackedDataset, rows_per_batch: usize) -> Result<EvalReport> {
        if eval.is_empty() {
            bail!(Empty, "evaluation set is empty");
        }
        let mut nll = 0.0;
        let mut weight = 0.0;
        let indices: Vec<usize> = (0..eval.n_sequences()).collect();
        for chunk in indices.chunks(rows_per_batch.max(1)) {
            let batch = Batch::from_dataset(eval, chunk);
            let (inputs, targets, weights) = batch.shifted::<S>();
            let w = weights.as_ref().map_or(targets.len() as f64, |w| w.iter().map(|x| x.real()).sum());
            if w == 0.0 {
                continue;
            }
            let mut tape = Tape::new();
            let vars = self.model.record(&mut tape, false);
            let logits = self.model.forward_tape(&mut tape, &vars, &inputs, batch.rows, batch.seq_len - 1)?;
            let loss = tape.cross_entropy(logits, &targets, weights.as_deref())?;
            nll += tape.value(loss).item()?.real() * w;
            weight += w;
        }
        if weight == 0.0 {
            bail!(Empty, "every evaluation position is masked");
        }
        let loss = nll / weight;
        Ok(EvalReport { loss, perplexity: Float::exp(loss), tokens: weight as u64 })
    }

    /// Trains until `stop` (capped at the configured total), evaluating every
    /// `eval_interval` steps and at the last step, and firing the checkpoint
    /// hook every `checkpoint_interval` steps.
    pub fn run_until(
        &mut self,
        train: &PackedDataset,
        eval: Option<&PackedDataset>,
        stop: u64,
        clock: &mut dyn Clock,
        hooks: &mut dyn Hooks<S>,
    ) -> Result<()> {
        if train.is_empty() {
            bail!(Empty, "training set is empty");
        }
        if train.seq_len != self.config.seq_len {
            bail!(Shape, "dataset sequences of {} but config expects {}", train.seq_len, self.config.seq_len);
        }
        train.check_vocab(self.model.config.vocab_size)?;
        let stop = stop.min(self.config.total_steps);
        let micro = self.config.micro_batch_size();
        let mut sampler = Sampler::new(self.sampler, train.n_sequences());
        let mut last = clock.now();
        while self.step < stop {
            let mut batches = Vec::with_capacity(self.config.grad_accum_steps as usize);
            for _ in 0..self.config.grad_accum_steps {
                batches.push(Batch::from_dataset(train, &sampler.next_batch(micro)?));
            }
            let report = self.train_step(&batches)?;
            self.sampler = sampler.state();
            let now = clock.now();
            self.counters.add_elapsed(now - last);
            last = now;
            hooks.on_step(&report)?;

            let s = self.step;
            let due = |interval: u64| interval > 0 && s.is_multiple_of(interval);
            let eval_due = eval.is_some() && (due(self.config.eval_interval) || s == self.config.total_steps);
            let ckpt_due = due(self.config.checkpoint_interval);
            if eval_due || ckpt_due {
                let ppl = match eval.filter(|_| eval_due) {
                    Some(ds) => {
                        let r = self.evaluate(ds, micro)?;
                        hooks.on_eval(s, &r)?;
                        Some(r.perplexity)
                    }
                    None => None,
                };
                let snap = self.counters.snapshot();
                self.log.record(s, snap.tokens, Some(report.loss), ppl, snap.elapsed_s)?;
            }
            if ckpt_due {
                hooks.on_checkpoint(self)?;
            }
        }
        Ok(())
    }
}

fn zeros_like<S: Scalar>(params: &ModelParams<S>) -> Vec<Tensor<S>> {
    params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect()
}

/// Per-token negative log-likelihoods `[n]` of `targets` under `logits [n, vocab]`.
pub fn token_nll<S: Scalar>(logits: &Tensor<S>, targets: &[u32]) -> Result<Vec<f64>> {
    let [n, v] = logits.shape() else {
        bail!(Shape, "expected [n, vocab] logits");
    };
    if targets.len() != *n {
        bail!(Shape, "{} targets for {n} rows", targets.len());
    }
    let mut out = vec![0.0; *n];
    for (i, row) in logits.data().chunks(*v).enumerate() {
        let max = row.iter().map(|x| x.real()).fold(f64::NEG_INFINITY, f64::max);
        let lse = max + Float::ln(row.iter().map(|x| Float::exp(x.real() - max)).sum::<f64>());
        out[i] = lse - row[targets[i] as usize].real();
    }
    Ok(out)
}

use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::{param_specs, ModelConfig, ParamKind, ParamSpec};
use crate::error::{bail, Result};
use crate::tensor::{Scalar, Tensor};

/// Standard deviation of projection and embedding initialization.
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<S = f32> {
    pub attention_norm: Tensor<S>,
    pub wq: Tensor<S>,
    pub wk: Tensor<S>,
    pub wv: Tensor<S>,
    pub wo: Tensor<S>,
    pub ffn_norm: Tensor<S>,
    pub w_gate: Tensor<S>,
    pub w_up: Tensor<S>,
    pub w_down: Tensor<S>,
}

/// All weights of a decoder, shaped by a [`ModelConfig`].
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<S = f32> {
    pub tok_embeddings: Tensor<S>,
    pub layers: Vec<LayerParams<S>>,
    pub norm: Tensor<S>,
    /// `None` when the head reuses the embedding table.
    pub output: Option<Tensor<S>>,
}

impl<S: Scalar> ModelParams<S> {
    /// Builds parameters from tensors in [`param_specs`] order, checking every shape.
    pub fn from_tensors(config: &ModelConfig, tensors: Vec<Tensor<S>>) -> Result<Self> {
        let specs = param_specs(config);
        if specs.len() != tensors.len() {
            bail!(Shape, "expected {} parameter tensors, got {}", specs.len(), tensors.len());
        }
        for (spec, t) in specs.iter().zip(&tensors) {
            if spec.shape != t.shape() {
                bail!(Shape, "{} should be {:?}, got {:?}", spec.name, spec.shape, t.shape());
            }
        }
        let mut it = tensors.into_iter();
        let mut next = || it.next().expect("length checked above");
        let tok_embeddings = next();
        let layers = (0..config.n_layers)
            .map(|_| LayerParams {
                attention_norm: next(),
                wq: next(),
                wk: next(),
                wv: next(),
                wo: next(),
                ffn_norm: next(),
                w_gate: next(),
                w_up: next(),
                w_down: next(),
            })
            .collect();
        let norm = next();
        let output = (!config.tie_embeddings).then(&mut next);
        Ok(Self { tok_embeddings, layers, norm, output })
    }

    /// Tensors in [`param_specs`] order.
    pub fn tensors(&self) -> Vec<&Tensor<S>> {
        let mut out = Vec::with_capacity(2 + 9 * self.layers.len() + 1);
        out.push(&self.tok_embeddings);
        for l in &self.layers {
            out.extend([&l.attention_norm, &l.wq, &l.wk, &l.wv, &l.wo, &l.ffn_norm, &l.w_gate, &l.w_up, &l.w_down]);
        }
        out.push(&self.norm);
        out.extend(self.output.as_ref());
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<S>> {
        let mut out = Vec::with_capacity(2 + 9 * self.layers.len() + 1);
        out.push(&mut self.tok_embeddings);
        for l in &mut self.layers {
            out.extend([
                &mut l.attention_norm,
                &mut l.wq,
                &mut l.wk,
                &mut l.wv,
                &mut l.wo,
                &mut l.ffn_norm,
                &mut l.w_gate,
                &mut l.w_up,
                &mut l.w_down,
            ]);
        }
        out.push(&mut self.norm);
        out.extend(self.output.as_mut());
        out
    }

    pub fn into_tensors(self) -> Vec<Tensor<S>> {
        let mut out = Vec::new();
        out.push(self.tok_embeddings);
        for l in self.layers {
            out.extend([l.attention_norm, l.wq, l.wk, l.wv, l.wo, l.ffn_norm, l.w_gate, l.w_up, l.w_down]);
        }
        out.push(self.norm);
        out.extend(self.output);
        out
    }

    pub fn zeros(config: &ModelConfig) -> Self {
        let tensors = param_specs(config).iter().map(|s| Tensor::zeros(&s.shape)).collect();
        Self::from_tensors(config, tensors).expect("shapes come from the specs")
    }

    /// Normal(0, 0.02) projections and embeddings, residual-output projections
    /// scaled by `1/sqrt(2 * n_layers)`, unit norm gains.
    pub fn init(config: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let residual_std = INIT_STD / (2.0 * config.n_layers.max(1) as f64).sqrt();
        let tensors = param_specs(config)
            .iter()
            .map(|spec: &ParamSpec| {
                let std = match spec.kind {
                    ParamKind::Norm => return Tensor::full(&spec.shape, S::one()),
                    ParamKind::ResidualProjection => residual_std,
                    _ => INIT_STD,
                };
                let normal = Normal::new(0.0, std).expect("positive std");
                Tensor::from_fn(&spec.shape, |_| S::of(normal.sample(&mut rng)))
            })
            .collect();
        Self::from_tensors(config, tensors).expect("shapes come from the specs")
    }

    pub fn cast<T: Scalar>(&self) -> ModelParams<T> {
        ModelParams {
            tok_embeddings: self.tok_embeddings.cast(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    attention_norm: l.attention_norm.cast(),
                    wq: l.wq.cast(),
                    wk: l.wk.cast(),
                    wv: l.wv.cast(),
                    wo: l.wo.cast(),
                    ffn_norm: l.ffn_norm.cast(),
                    w_gate: l.w_gate.cast(),
                    w_up: l.w_up.cast(),
                    w_down: l.w_down.cast(),
                })
                .collect(),
            norm: self.norm.cast(),
            output: self.output.as_ref().map(Tensor::cast),
        }
    }

    pub fn numel(&self) -> usize {
        self.tensors().iter().map(|t| t.numel()).sum()
    }

    /// True when every weight is finite.
    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.data().iter().all(|v| v.is_finite()))
    }
}

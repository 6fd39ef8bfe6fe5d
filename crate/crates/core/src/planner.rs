//! Compute planning before any training happens.
//!
//! The loss surface is the parametric fit `L(N, D) = A / N^alpha + B / D^beta + E`
//! over parameter count `N` and training tokens `D`. The compute-optimal
//! token budget follows a fixed tokens-per-parameter ratio, and repeating a
//! dataset for more than four epochs is flagged as wasteful.

use crate::error::{bail, Result};

/// Tokens per parameter at the compute-optimal point.
pub const DEFAULT_TOKENS_PER_PARAM: f64 = 20.0;

/// Repetition beyond this many epochs yields diminishing returns.
pub const MAX_USEFUL_EPOCHS: f64 = 4.0;

/// Coefficients of the parametric loss surface.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScalingConstants {
    pub a: f64,
    pub b: f64,
    /// Irreducible loss in nats.
    pub e: f64,
    /// Model-size exponent.
    pub alpha: f64,
    /// Data-size exponent.
    pub beta: f64,
}

impl Default for ScalingConstants {
    fn default() -> Self {
        Self { a: 406.4, b: 410.7, e: 1.69, alpha: 0.32, beta: 0.28 }
    }
}

impl ScalingConstants {
    pub fn validate(&self) -> Result<()> {
        let finite = [self.a, self.b, self.e, self.alpha, self.beta].iter().all(|v| v.is_finite());
        if !finite {
            bail!(Domain, "scaling constants must be finite: {self:?}");
        }
        if self.a <= 0.0 || self.b <= 0.0 || self.e <= 0.0 {
            bail!(Domain, "A, B and E must be positive: {self:?}");
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0 && self.beta > 0.0 && self.beta < 1.0) {
            bail!(Domain, "exponents must lie in (0, 1): {self:?}");
        }
        Ok(())
    }
}

/// Predicted language-modeling loss (nats) for `n_params` trained on `n_tokens`.
pub fn predict_loss(n_params: u64, n_tokens: u64, constants: &ScalingConstants) -> Result<f64> {
    constants.validate()?;
    if n_params == 0 || n_tokens == 0 {
        bail!(Domain, "predict_loss needs positive N and D (got N={n_params}, D={n_tokens})");
    }
    let n = n_params as f64;
    let d = n_tokens as f64;
    Ok(constants.a / n.powf(constants.alpha) + constants.b / d.powf(constants.beta) + constants.e)
}

/// Compute-optimal token budget, `ratio * n_params` rounded to the nearest integer.
pub fn optimal_tokens(n_params: u64, ratio: f64) -> Result<u64> {
    if n_params == 0 {
        bail!(Domain, "optimal_tokens needs a positive parameter count");
    }
    if !(ratio.is_finite() && ratio > 0.0) {
        bail!(Domain, "tokens-per-parameter ratio must be positive, got {ratio}");
    }
    Ok((ratio * n_params as f64).round() as u64)
}

/// How many passes over the unique data a token budget requires.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochBudget {
    pub epochs: f64,
    /// Set iff `epochs > MAX_USEFUL_EPOCHS`.
    pub warning: bool,
}

pub fn epochs_required(target_tokens: u64, unique_tokens: u64) -> Result<EpochBudget> {
    if unique_tokens == 0 {
        bail!(Domain, "unique token count must be positive");
    }
    if target_tokens == 0 {
        bail!(Domain, "target token count must be positive");
    }
    let epochs = target_tokens as f64 / unique_tokens as f64;
    Ok(EpochBudget { epochs, warning: epochs > MAX_USEFUL_EPOCHS })
}

/// Training FLOPs under the usual `6 * N * D` estimate.
pub fn estimate_flops(n_params: u64, n_tokens: u64) -> f64 {
    6.0 * n_params as f64 * n_tokens as f64
}

/// Everything the planner says about one model size.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanReport {
    pub n_params: u64,
    pub ratio: f64,
    pub optimal_tokens: u64,
    pub predicted_loss: f64,
    /// Present when the unique corpus size is known.
    pub unique_tokens: Option<u64>,
    pub epochs: Option<f64>,
    pub epoch_warning: bool,
    pub estimated_flops: f64,
}

pub fn plan(n_params: u64, unique_tokens: Option<u64>, ratio: f64, constants: &ScalingConstants) -> Result<PlanReport> {
    let optimal = optimal_tokens(n_params, ratio)?;
    let predicted_loss = predict_loss(n_params, optimal, constants)?;
    let budget = unique_tokens.map(|u| epochs_required(optimal, u)).transpose()?;
    Ok(PlanReport {
        n_params,
        ratio,
        optimal_tokens: optimal,
        predicted_loss,
        unique_tokens,
        epochs: budget.map(|b| b.epochs),
        epoch_warning: budget.is_some_and(|b| b.warning),
        estimated_flops: estimate_flops(n_params, optimal),
    })
}

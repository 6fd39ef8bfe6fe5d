//! Wall-clock time and decoding throughput.

use std::time::Instant;

use ttl_core::inference::{generate, GenerationParams, InferenceModel};
use ttl_core::train::Clock;

use crate::error::{Error, Result};

/// Seconds since construction.
#[derive(Debug, Clone, Copy)]
pub struct WallClock {
    start: Instant,
}

impl Default for WallClock {
    fn default() -> Self {
        Self { start: Instant::now() }
    }
}

impl Clock for WallClock {
    fn now(&mut self) -> f64 {
        self.start.elapsed().as_secs_f64()
    }
}

/// `os/arch, N threads`.
pub fn hardware_descriptor() -> String {
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get());
    format!("{}/{}, {threads} threads", std::env::consts::OS, std::env::consts::ARCH)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ThroughputReport {
    pub n_tokens: usize,
    /// Tokens per second of each repetition.
    pub runs: Vec<f64>,
    pub median: f64,
    pub mean: f64,
    /// Sample standard deviation (zero for a single run).
    pub std_dev: f64,
    pub footprint_bytes: u64,
    pub hardware: String,
}

impl ThroughputReport {
    pub fn from_runs(n_tokens: usize, runs: Vec<f64>, footprint_bytes: u64) -> Self {
        let mut sorted = runs.clone();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len();
        let median = match n {
            0 => 0.0,
            _ if n % 2 == 1 => sorted[n / 2],
            _ => 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]),
        };
        let mean = if n == 0 { 0.0 } else { runs.iter().sum::<f64>() / n as f64 };
        let std_dev =
            if n < 2 { 0.0 } else { (runs.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt() };
        Self { n_tokens, runs, median, mean, std_dev, footprint_bytes, hardware: hardware_descriptor() }
    }

    pub fn render(&self) -> String {
        format!(
            "tokens per run = {}\nrepetitions = {}\nmedian tokens/s = {:.3}\nmean tokens/s = {:.3}\nstd dev tokens/s = {:.3}\nfootprint bytes = {}\nhardware = {}\n",
            self.n_tokens,
            self.runs.len(),
            self.median,
            self.mean,
            self.std_dev,
            self.footprint_bytes,
            self.hardware
        )
    }
}

/// Greedy-decodes `n_tokens` after `prompt`, `repetitions` times.
pub fn measure_throughput(
    model: &InferenceModel,
    prompt: &[u32],
    n_tokens: usize,
    repetitions: usize,
    footprint_bytes: u64,
) -> Result<ThroughputReport> {
    if n_tokens == 0 || repetitions == 0 {
        return Err(Error::Usage("throughput needs at least one token and one repetition".into()));
    }
    let params = GenerationParams { max_new_tokens: n_tokens, ..GenerationParams::default() };
    let mut runs = Vec::with_capacity(repetitions);
    for _ in 0..repetitions {
        let start = Instant::now();
        let out = generate(model, prompt, &params)?;
        let secs = start.elapsed().as_secs_f64().max(1e-9);
        if out.tokens.len() != n_tokens {
            return Err(Error::Usage(format!("generated {} of {n_tokens} tokens", out.tokens.len())));
        }
        runs.push(n_tokens as f64 / secs);
    }
    Ok(ThroughputReport::from_runs(n_tokens, runs, footprint_bytes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn statistics() {
        let r = ThroughputReport::from_runs(10, vec![4.0, 1.0, 3.0, 2.0, 5.0], 99);
        assert_eq!((r.median, r.mean), (3.0, 3.0));
        assert!((r.std_dev - 2.5f64.sqrt()).abs() < 1e-12);
        assert_eq!(ThroughputReport::from_runs(1, vec![2.0, 4.0], 0).median, 3.0);
        assert!(r.render().contains("footprint bytes = 99"));
    }
}

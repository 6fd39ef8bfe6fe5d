//! Energy and emissions accounting with per-evaluation cost reports.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt::Write;
use core::sync::atomic::{AtomicU64, Ordering};

use crate::error::{bail, Result};

/// kgCO2eq per kWh used when no region is configured.
pub const DEFAULT_INTENSITY: f64 = 0.3655;
pub const DEFAULT_REGION: &str = "North Rhine-Westphalia";
/// Average draw of the reference single-accelerator training host.
pub const DEFAULT_WATTS: f64 = 403.6;

const SECONDS_PER_HOUR: f64 = 3600.0;

fn non_negative(name: &str, v: f64) -> Result<()> {
    if !(v >= 0.0 && v.is_finite()) {
        bail!(Domain, "{name} must be finite and non-negative, got {v}");
    }
    Ok(())
}

/// `watts * seconds / 3.6e6`.
pub fn energy_kwh(elapsed_s: f64, avg_power_w: f64) -> Result<f64> {
    non_negative("elapsed seconds", elapsed_s)?;
    non_negative("power", avg_power_w)?;
    Ok(avg_power_w * elapsed_s / (1000.0 * SECONDS_PER_HOUR))
}

pub fn emissions_kg(energy_kwh: f64, intensity: f64) -> Result<f64> {
    non_negative("energy", energy_kwh)?;
    non_negative("carbon intensity", intensity)?;
    Ok(energy_kwh * intensity)
}

/// Configured average draw scaled by utilization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PowerModel {
    pub avg_watts: f64,
    pub utilization: f64,
}

impl Default for PowerModel {
    fn default() -> Self {
        Self { avg_watts: DEFAULT_WATTS, utilization: 1.0 }
    }
}

impl PowerModel {
    pub fn watts(&self) -> f64 {
        self.avg_watts * self.utilization
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CarbonModel {
    pub intensity: f64,
    pub region: String,
}

impl Default for CarbonModel {
    fn default() -> Self {
        Self { intensity: DEFAULT_INTENSITY, region: DEFAULT_REGION.into() }
    }
}

/// One logged point. Cumulative columns never decrease along a log.
#[derive(Debug, Clone, PartialEq)]
pub struct TelemetryRow {
    pub step: Option<u64>,
    pub tokens: u64,
    pub loss: Option<f64>,
    pub eval_perplexity: Option<f64>,
    pub elapsed_s: f64,
    pub energy_kwh: f64,
    pub emissions_kg: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TelemetryLog {
    pub power: PowerModel,
    pub carbon: CarbonModel,
    rows: Vec<TelemetryRow>,
}

impl TelemetryLog {
    pub fn new(power: PowerModel, carbon: CarbonModel) -> Result<Self> {
        non_negative("power", power.watts())?;
        non_negative("carbon intensity", carbon.intensity)?;
        Ok(Self { power, carbon, rows: Vec::new() })
    }

    pub fn rows(&self) -> &[TelemetryRow] {
        &self.rows
    }

    pub fn last(&self) -> Option<&TelemetryRow> {
        self.rows.last()
    }

    /// Appends a row whose energy and emissions derive from cumulative elapsed time.
    pub fn record(
        &mut self,
        step: u64,
        tokens: u64,
        loss: Option<f64>,
        eval_perplexity: Option<f64>,
        elapsed_s: f64,
    ) -> Result<&TelemetryRow> {
        let energy = energy_kwh(elapsed_s, self.power.watts())?;
        let emissions = emissions_kg(energy, self.carbon.intensity)?;
        self.push(TelemetryRow {
            step: Some(step),
            tokens,
            loss,
            eval_perplexity,
            elapsed_s,
            energy_kwh: energy,
            emissions_kg: emissions,
        })?;
        Ok(self.rows.last().expect("just pushed"))
    }

    /// Appends an externally measured row, checking monotonicity.
    pub fn push(&mut self, row: TelemetryRow) -> Result<()> {
        for (name, v) in [("elapsed", row.elapsed_s), ("energy", row.energy_kwh), ("emissions", row.emissions_kg)] {
            non_negative(name, v)?;
        }
        if let Some(prev) = self.rows.last() {
            if row.tokens < prev.tokens
                || row.elapsed_s < prev.elapsed_s
                || row.energy_kwh < prev.energy_kwh
                || row.emissions_kg < prev.emissions_kg
                || matches!((prev.step, row.step), (Some(a), Some(b)) if b < a)
            {
                bail!(Domain, "telemetry row {} decreases a cumulative column", self.rows.len());
            }
        }
        self.rows.push(row);
        Ok(())
    }
}

/// Token, elapsed-time and step counters shared with the training thread.
#[derive(Debug, Default)]
pub struct Counters {
    tokens: AtomicU64,
    steps: AtomicU64,
    elapsed_bits: AtomicU64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CounterSnapshot {
    pub tokens: u64,
    pub steps: u64,
    pub elapsed_s: f64,
}

impl Counters {
    pub fn from_snapshot(s: CounterSnapshot) -> Self {
        Self {
            tokens: AtomicU64::new(s.tokens),
            steps: AtomicU64::new(s.steps),
            elapsed_bits: AtomicU64::new(s.elapsed_s.to_bits()),
        }
    }

    pub fn add_tokens(&self, n: u64) {
        self.tokens.fetch_add(n, Ordering::Relaxed);
    }

    pub fn add_step(&self) {
        self.steps.fetch_add(1, Ordering::Relaxed);
    }

    pub fn add_elapsed(&self, seconds: f64) {
        let mut cur = self.elapsed_bits.load(Ordering::Relaxed);
        loop {
            let next = (f64::from_bits(cur) + seconds).to_bits();
            match self.elapsed_bits.compare_exchange_weak(cur, next, Ordering::AcqRel, Ordering::Relaxed) {
                Ok(_) => return,
                Err(seen) => cur = seen,
            }
        }
    }

    pub fn snapshot(&self) -> CounterSnapshot {
        CounterSnapshot {
            tokens: self.tokens.load(Ordering::Acquire),
            steps: self.steps.load(Ordering::Acquire),
            elapsed_s: f64::from_bits(self.elapsed_bits.load(Ordering::Acquire)),
        }
    }
}

impl Clone for Counters {
    fn clone(&self) -> Self {
        Self::from_snapshot(self.snapshot())
    }
}

/// `8.1M`, `9.8B`: one decimal with a K/M/B/T suffix.
pub fn humanize_tokens(n: u64) -> String {
    let v = n as f64;
    for (unit, suffix) in [(1e12, "T"), (1e9, "B"), (1e6, "M"), (1e3, "K")] {
        if v >= unit {
            return format!("{:.1}{suffix}", v / unit);
        }
    }
    format!("{n}")
}

/// Inverse of [`humanize_tokens`] for report ingestion.
pub fn parse_tokens(text: &str) -> Result<u64> {
    let t = text.trim().replace(',', "");
    let (num, mult) = match t.chars().last() {
        Some('K' | 'k') => (&t[..t.len() - 1], 1e3),
        Some('M') => (&t[..t.len() - 1], 1e6),
        Some('B') => (&t[..t.len() - 1], 1e9),
        Some('T') => (&t[..t.len() - 1], 1e12),
        _ => (&t[..], 1.0),
    };
    match num.parse::<f64>() {
        Ok(v) if v >= 0.0 && v.is_finite() => Ok(num_traits::Float::round(v * mult) as u64),
        _ => bail!(Decode, "not a token count: {text:?}"),
    }
}

/// One evaluation point of a cost report.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub tokens: u64,
    pub perplexity: f64,
    pub energy_kwh: f64,
    pub emissions_kg: f64,
    /// Perplexity drop per kWh since the previous evaluation point.
    pub marginal_gain: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointReport {
    pub rows: Vec<ReportRow>,
}

/// One row per logged evaluation.
pub fn checkpoint_report(log: &TelemetryLog) -> Result<CheckpointReport> {
    let mut rows: Vec<ReportRow> = Vec::new();
    for r in log.rows() {
        let Some(ppl) = r.eval_perplexity else { continue };
        let marginal_gain = rows.last().and_then(|prev| {
            let de = r.energy_kwh - prev.energy_kwh;
            (de > 0.0).then(|| (prev.perplexity - ppl) / de)
        });
        rows.push(ReportRow {
            tokens: r.tokens,
            perplexity: ppl,
            energy_kwh: r.energy_kwh,
            emissions_kg: r.emissions_kg,
            marginal_gain,
        });
    }
    if rows.is_empty() {
        bail!(Empty, "telemetry log has no evaluation rows");
    }
    Ok(CheckpointReport { rows })
}

impl CheckpointReport {
    /// Fixed-width table, two decimals, humanized token counts.
    pub fn render(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:>16}  {:>10}  {:>24}  {:>24}  {:>20}",
            "Processed Tokens", "Perplexity", "Energy Consumption (kWh)", "Emissions (KgCO2eq)", "ppl drop per kWh"
        );
        for r in &self.rows {
            let gain = r.marginal_gain.map_or_else(|| String::from("-"), |g| format!("{g:.4}"));
            let _ = writeln!(
                out,
                "{:>16}  {:>10.2}  {:>24.2}  {:>24.2}  {:>20}",
                humanize_tokens(r.tokens),
                r.perplexity,
                r.energy_kwh,
                r.emissions_kg,
                gain
            );
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn energy_examples() {
        assert!((energy_kwh(280.0 * 3600.0, 403.6).unwrap() - 113.0).abs() < 0.01);
        assert_eq!(energy_kwh(1234.0, 0.0).unwrap(), 0.0);
        assert_eq!(energy_kwh(3600.0, 1000.0).unwrap(), 1.0);
        assert!(energy_kwh(-1.0, 10.0).is_err());
        assert!(energy_kwh(1.0, f64::NAN).is_err());
    }

    #[test]
    fn emissions_examples() {
        assert!((emissions_kg(113.0, DEFAULT_INTENSITY).unwrap() - 41.30).abs() < 0.005);
        assert_eq!(emissions_kg(0.0, DEFAULT_INTENSITY).unwrap(), 0.0);
        assert!((emissions_kg(15.5, DEFAULT_INTENSITY).unwrap() - 5.66).abs() < 0.05);
    }

    #[test]
    fn log_rows_are_consistent() {
        let mut log =
            TelemetryLog::new(PowerModel { avg_watts: 500.0, utilization: 0.8 }, CarbonModel::default()).unwrap();
        for i in 1..=5u64 {
            log.record(i * 10, i * 10 * 8192, Some(1.0), Some(10.0 / i as f64), i as f64 * 3600.0).unwrap();
        }
        for r in log.rows() {
            assert_eq!(r.emissions_kg, r.energy_kwh * DEFAULT_INTENSITY);
            assert_eq!(r.tokens, r.step.unwrap() * 8192);
        }
        assert!(log.record(60, 0, None, None, 1e9).is_err());
        let report = checkpoint_report(&log).unwrap();
        assert_eq!(report.rows.len(), 5);
        assert_eq!(report.rows[0].marginal_gain, None);
        let g = report.rows[1].marginal_gain.unwrap();
        assert!((g - 5.0 / 0.4).abs() < 1e-9);
        let empty = TelemetryLog::new(PowerModel::default(), CarbonModel::default()).unwrap();
        assert!(checkpoint_report(&empty).is_err());
    }

    #[test]
    fn counters_accumulate() {
        let c = Counters::default();
        c.add_tokens(5);
        c.add_tokens(7);
        c.add_elapsed(0.25);
        c.add_elapsed(0.5);
        c.add_step();
        let s = c.snapshot();
        assert_eq!((s.tokens, s.steps, s.elapsed_s), (12, 1, 0.75));
        assert_eq!(Counters::from_snapshot(s).snapshot(), s);
    }

    #[test]
    fn token_humanizing() {
        for (n, s) in [(8_100_000, "8.1M"), (9_830_400_000, "9.8B"), (950, "950"), (1_600_000_000, "1.6B")] {
            assert_eq!(humanize_tokens(n), s);
        }
        assert_eq!(parse_tokens("8.1M").unwrap(), 8_100_000);
        assert_eq!(parse_tokens("9.8B").unwrap(), 9_800_000_000);
        assert_eq!(parse_tokens("1,024").unwrap(), 1024);
        assert!(parse_tokens("x").is_err());
        assert_eq!(vec![humanize_tokens(parse_tokens("2.4B").unwrap())], vec!["2.4B"]);
    }
}

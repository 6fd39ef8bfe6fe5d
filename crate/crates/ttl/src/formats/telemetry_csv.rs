//! Telemetry CSV and the per-evaluation cost report.
//!
//! A log is written with the cost-table columns plus `step`, `loss` and
//! `elapsed_s`; empty cells stand for missing values. Reading goes by header
//! name, so a file holding only the cost-table columns (token counts such as
//! `8.1M` allowed) is also accepted.

use std::path::Path;

use ttl_core::telemetry::{
    humanize_tokens, parse_tokens, CarbonModel, CheckpointReport, PowerModel, TelemetryLog, TelemetryRow,
};

use crate::error::{read, write_atomic, Error, Result};

pub const TOKENS: &str = "Processed Tokens";
pub const PERPLEXITY: &str = "Perplexity";
pub const ENERGY: &str = "Energy Consumption (kWh)";
pub const EMISSIONS: &str = "Emissions (KgCO2eq)";
pub const GAIN: &str = "ppl drop per kWh";

pub const LOG_COLUMNS: [&str; 7] = ["step", TOKENS, "loss", PERPLEXITY, "elapsed_s", ENERGY, EMISSIONS];

fn cell(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

pub fn write_log(log: &TelemetryLog) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(LOG_COLUMNS).expect("in-memory write");
    for r in log.rows() {
        w.write_record([
            r.step.map_or_else(String::new, |s| s.to_string()),
            r.tokens.to_string(),
            cell(r.loss),
            cell(r.eval_perplexity),
            r.elapsed_s.to_string(),
            r.energy_kwh.to_string(),
            r.emissions_kg.to_string(),
        ])
        .expect("in-memory write");
    }
    w.into_inner().expect("in-memory flush")
}

pub fn read_log(bytes: &[u8], path: &Path, power: PowerModel, carbon: CarbonModel) -> Result<TelemetryLog> {
    let fail = |reason: String| Error::format(path, reason);
    let mut rdr = csv::Reader::from_reader(bytes);
    let headers = rdr.headers().map_err(|e| fail(e.to_string()))?.clone();
    let col = |name: &str| headers.iter().position(|h| h.trim() == name);
    let need = |name: &str| col(name).ok_or_else(|| fail(format!("missing column {name:?}")));
    let (tokens, energy, emissions) = (need(TOKENS)?, need(ENERGY)?, need(EMISSIONS)?);
    let (step, loss, ppl, elapsed) = (col("step"), col("loss"), col(PERPLEXITY), col("elapsed_s"));
    let mut log = TelemetryLog::new(power, carbon)?;
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| fail(e.to_string()))?;
        let line = i + 2;
        let text = |c: Option<usize>| c.and_then(|c| rec.get(c)).map(str::trim).filter(|s| !s.is_empty());
        let real = |c: Option<usize>| -> Result<Option<f64>> {
            text(c).map(|s| s.parse::<f64>().map_err(|_| fail(format!("line {line}: not a number: {s:?}")))).transpose()
        };
        let required = |c: usize, name: &str| -> Result<f64> {
            real(Some(c))?.ok_or_else(|| fail(format!("line {line}: empty {name}")))
        };
        let row = TelemetryRow {
            step: text(step)
                .map(|s| s.parse::<u64>().map_err(|_| fail(format!("line {line}: bad step {s:?}"))))
                .transpose()?,
            tokens: parse_tokens(text(Some(tokens)).unwrap_or_default())
                .map_err(|e| fail(format!("line {line}: {e}")))?,
            loss: real(loss)?,
            eval_perplexity: real(ppl)?,
            elapsed_s: real(elapsed)?.unwrap_or(0.0),
            energy_kwh: required(energy, ENERGY)?,
            emissions_kg: required(emissions, EMISSIONS)?,
        };
        log.push(row).map_err(|e| fail(format!("line {line}: {e}")))?;
    }
    Ok(log)
}

pub fn save_log(log: &TelemetryLog, path: &Path) -> Result<()> {
    write_atomic(path, &write_log(log))
}

pub fn load_log(path: &Path, power: PowerModel, carbon: CarbonModel) -> Result<TelemetryLog> {
    read_log(&read(path)?, path, power, carbon)
}

/// The report as CSV cells: humanized tokens, two decimals, four for the gain.
pub fn report_cells(report: &CheckpointReport) -> Vec<[String; 5]> {
    report
        .rows
        .iter()
        .map(|r| {
            [
                humanize_tokens(r.tokens),
                format!("{:.2}", r.perplexity),
                format!("{:.2}", r.energy_kwh),
                format!("{:.2}", r.emissions_kg),
                r.marginal_gain.map_or_else(String::new, |g| format!("{g:.4}")),
            ]
        })
        .collect()
}

pub fn write_report(report: &CheckpointReport) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([TOKENS, PERPLEXITY, ENERGY, EMISSIONS, GAIN]).expect("in-memory write");
    for row in report_cells(report) {
        w.write_record(&row).expect("in-memory write");
    }
    w.into_inner().expect("in-memory flush")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_round_trips_exactly() {
        let mut log =
            TelemetryLog::new(PowerModel { avg_watts: 333.3, utilization: 0.83 }, CarbonModel::default()).unwrap();
        for i in 1..=6u64 {
            let ppl = (i % 2 == 0).then(|| 100.0 / (i as f64 + 0.1));
            log.record(i * 7, i * 7 * 8192, Some(1.0 / 3.0 + i as f64), ppl, i as f64 * 0.1 + 1e-9).unwrap();
        }
        let bytes = write_log(&log);
        let back = read_log(&bytes, Path::new("t.csv"), log.power, log.carbon.clone()).unwrap();
        assert_eq!(back, log);
        assert!(String::from_utf8(bytes).unwrap().starts_with(
            "step,Processed Tokens,loss,Perplexity,elapsed_s,Energy Consumption (kWh),Emissions (KgCO2eq)\n"
        ));
    }

    #[test]
    fn cost_table_only() {
        let text = "Processed Tokens,Perplexity,Energy Consumption (kWh),Emissions (KgCO2eq)\n8.1M,20.49,9.40,3.34\n1.6B,16.90,18.82,6.70\n";
        let log = read_log(text.as_bytes(), Path::new("f"), PowerModel::default(), CarbonModel::default()).unwrap();
        assert_eq!(log.rows()[1].tokens, 1_600_000_000);
        assert_eq!(log.rows()[0].step, None);
        let decreasing = "Processed Tokens,Energy Consumption (kWh),Emissions (KgCO2eq)\n2,5,1\n3,4,1\n";
        assert!(read_log(decreasing.as_bytes(), Path::new("f"), PowerModel::default(), CarbonModel::default()).is_err());
        let missing = "Processed Tokens,Perplexity\n1,2\n";
        assert!(read_log(missing.as_bytes(), Path::new("f"), PowerModel::default(), CarbonModel::default()).is_err());
    }
}

//! Training checkpoint `TTLC`.
//!
//! Layout after magic and version: the run configuration as `key = value`
//! text, tokenizer fingerprint, step, sampler `(seed, epoch, cursor)`,
//! counters, a tensor table (parameters, then first and second moments; each
//! entry name, rank, dims, f32 data), the telemetry block, and a trailing
//! digest of every preceding byte.

use std::path::Path;

use ttl_core::model::{param_specs, ModelParams};
use ttl_core::telemetry::{CarbonModel, CounterSnapshot, PowerModel, TelemetryLog, TelemetryRow};
use ttl_core::tensor::Tensor;
use ttl_core::train::{SamplerState, TrainState};

use crate::codec::{digest64, Reader, Writer};
use crate::config::RunConfig;
use crate::error::{read, write_atomic, Error, Result};

pub const MAGIC: &[u8; 4] = b"TTLC";
pub const VERSION: u32 = 1;

/// Label stored in the configuration block.
pub const RUN_NAME: &str = "checkpoint";

fn put_tensor(w: &mut Writer, name: &str, t: &Tensor<f32>) {
    w.str(name);
    w.u32(t.shape().len() as u32);
    for &d in t.shape() {
        w.u64(d as u64);
    }
    for &x in t.data() {
        w.f32(x);
    }
}

fn get_tensor(r: &mut Reader<'_>, want_name: &str, want_shape: &[usize]) -> Result<Tensor<f32>> {
    let name = r.str()?;
    let rank = r.u32()? as usize;
    let mut shape = Vec::with_capacity(rank.min(8));
    for _ in 0..rank {
        shape.push(r.u64()? as usize);
    }
    if name != want_name || shape != want_shape {
        return Err(r.fail(format!("tensor {name} {shape:?} where {want_name} {want_shape:?} was expected")));
    }
    let n: usize = shape.iter().product();
    let raw = r.take(n * 4)?;
    let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
    Ok(Tensor::new(&shape, data)?)
}

fn put_log(w: &mut Writer, log: &TelemetryLog) {
    w.f64(log.power.avg_watts);
    w.f64(log.power.utilization);
    w.f64(log.carbon.intensity);
    w.str(&log.carbon.region);
    w.u64(log.rows().len() as u64);
    for row in log.rows() {
        match row.step {
            Some(s) => {
                w.u8(1);
                w.u64(s);
            }
            None => w.u8(0),
        }
        w.u64(row.tokens);
        w.opt_f64(row.loss);
        w.opt_f64(row.eval_perplexity);
        w.f64(row.elapsed_s);
        w.f64(row.energy_kwh);
        w.f64(row.emissions_kg);
    }
}

fn get_log(r: &mut Reader<'_>) -> Result<TelemetryLog> {
    let power = PowerModel { avg_watts: r.f64()?, utilization: r.f64()? };
    let carbon = CarbonModel { intensity: r.f64()?, region: r.str()? };
    let mut log = TelemetryLog::new(power, carbon)?;
    let n = r.len(1)?;
    for _ in 0..n {
        let step = match r.u8()? {
            0 => None,
            1 => Some(r.u64()?),
            t => return Err(r.fail(format!("bad option tag {t}"))),
        };
        log.push(TelemetryRow {
            step,
            tokens: r.u64()?,
            loss: r.opt_f64()?,
            eval_perplexity: r.opt_f64()?,
            elapsed_s: r.f64()?,
            energy_kwh: r.f64()?,
            emissions_kg: r.f64()?,
        })?;
    }
    Ok(log)
}

pub fn encode(state: &TrainState<f32>) -> Vec<u8> {
    let mut w = Writer::new(MAGIC, VERSION);
    let cfg = RunConfig { name: RUN_NAME.into(), model: state.model.clone(), train: state.train.clone() };
    w.str(&cfg.render());
    w.u64(state.tokenizer_fingerprint);
    w.u64(state.step);
    w.u64(state.sampler.seed);
    w.u64(state.sampler.epoch);
    w.u64(state.sampler.cursor);
    w.u64(state.counters.tokens);
    w.u64(state.counters.steps);
    w.f64(state.counters.elapsed_s);
    let specs = param_specs(&state.model);
    w.u64(3 * specs.len() as u64);
    for (prefix, tensors) in [
        ("", state.params.tensors()),
        ("adam.m.", state.first_moment.iter().collect()),
        ("adam.v.", state.second_moment.iter().collect()),
    ] {
        for (spec, t) in specs.iter().zip(tensors) {
            put_tensor(&mut w, &format!("{prefix}{}", spec.name), t);
        }
    }
    put_log(&mut w, &state.log);
    let digest = digest64(&w.buf);
    w.u64(digest);
    w.buf
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<TrainState<f32>> {
    if bytes.len() < 8 {
        return Err(Error::format(path, "truncated checkpoint"));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    let (mut r, version) = Reader::open(body, path, MAGIC)?;
    if version != VERSION {
        return Err(r.fail(format!("unsupported checkpoint version {version}")));
    }
    if digest64(body) != u64::from_le_bytes(tail.try_into().expect("8 bytes")) {
        return Err(r.fail("checksum mismatch"));
    }
    let cfg = RunConfig::parse(&r.str()?).map_err(|e| r.fail(e))?;
    let tokenizer_fingerprint = r.u64()?;
    let step = r.u64()?;
    let sampler = SamplerState { seed: r.u64()?, epoch: r.u64()?, cursor: r.u64()? };
    let counters = CounterSnapshot { tokens: r.u64()?, steps: r.u64()?, elapsed_s: r.f64()? };
    let specs = param_specs(&cfg.model);
    if r.u64()? != 3 * specs.len() as u64 {
        return Err(r.fail("tensor count does not match the model configuration"));
    }
    let mut groups: Vec<Vec<Tensor<f32>>> = Vec::with_capacity(3);
    for prefix in ["", "adam.m.", "adam.v."] {
        let mut g = Vec::with_capacity(specs.len());
        for spec in &specs {
            g.push(get_tensor(&mut r, &format!("{prefix}{}", spec.name), &spec.shape)?);
        }
        groups.push(g);
    }
    let log = get_log(&mut r)?;
    r.finish()?;
    let second_moment = groups.pop().expect("three groups");
    let first_moment = groups.pop().expect("three groups");
    let params = ModelParams::from_tensors(&cfg.model, groups.pop().expect("three groups"))?;
    Ok(TrainState {
        model: cfg.model,
        train: cfg.train,
        step,
        params,
        first_moment,
        second_moment,
        sampler,
        counters,
        log,
        tokenizer_fingerprint,
    })
}

pub fn save(state: &TrainState<f32>, path: &Path) -> Result<()> {
    write_atomic(path, &encode(state))
}

pub fn load(path: &Path) -> Result<TrainState<f32>> {
    decode(&read(path)?, path)
}

/// Loads a checkpoint and refuses it unless it was trained with `tokenizer_fingerprint`.
pub fn load_matching(path: &Path, tokenizer_fingerprint: u64) -> Result<TrainState<f32>> {
    let state = load(path)?;
    if state.tokenizer_fingerprint != tokenizer_fingerprint {
        return Err(Error::Fingerprint {
            what: path.display().to_string(),
            expected: tokenizer_fingerprint,
            found: state.tokenizer_fingerprint,
        });
    }
    Ok(state)
}

//! Optimizer, schedule, accumulation and resume behaviour of the trainer.

use proptest::prelude::*;
use ttl_core::data::{pack, PackedDataset};
use ttl_core::model::{Llama, ModelConfig};
use ttl_core::telemetry::{CarbonModel, PowerModel, TelemetryLog};
use ttl_core::train::{lr_at, preset, AdamW, Batch, FixedClock, NoHooks, Sampler, SamplerState, TrainConfig, Trainer};

fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        hidden_size: 16,
        intermediate_size: 32,
        context_length: 16,
        n_heads: 4,
        n_kv_heads: 2,
        n_layers: 2,
        vocab_size: 37,
        ..ModelConfig::ttl_160m()
    }
}

fn tiny_train_config(accum: u64, total: u64) -> TrainConfig {
    TrainConfig {
        tokens_per_batch: 4 * 9,
        seq_len: 9,
        total_steps: total,
        grad_accum_steps: accum,
        peak_lr: 3e-3,
        warmup_steps: 3,
        checkpoint_interval: 0,
        eval_interval: 0,
        seed: 11,
        ..TrainConfig::default()
    }
}

fn log() -> TelemetryLog {
    TelemetryLog::new(PowerModel::default(), CarbonModel::default()).unwrap()
}

fn dataset(n_seq: usize, seq: usize, vocab: u32, seed: u32) -> PackedDataset {
    let stream: Vec<u32> = (0..(n_seq * seq) as u32).map(|i| (i * 7 + seed * 13 + i / 5) % vocab).collect();
    pack(&stream, seq, 0).unwrap().0
}

fn trainer(config: TrainConfig) -> Trainer<f32> {
    Trainer::new(Llama::init(tiny_model_config(), 5).unwrap(), config, log(), 0).unwrap()
}

/// Scalar reference: bias-corrected Adam with decoupled decay on a plain f64.
fn scalar_adamw(theta: &mut f64, m: &mut f64, v: &mut f64, g: f64, lr: f64, t: i32) {
    let (b1, b2, eps, wd) = (0.9f64, 0.999f64, 1e-8, 0.01);
    *m = b1 * *m + (1.0 - b1) * g;
    *v = b2 * *v + (1.0 - b2) * g * g;
    let m_hat = *m / (1.0 - b1.powi(t));
    let v_hat = *v / (1.0 - b2.powi(t));
    *theta -= lr * m_hat / (v_hat.sqrt() + eps) + lr * wd * *theta;
}

#[test]
fn adamw_matches_scalar_oracle_over_100_steps() {
    let config = TrainConfig { total_steps: 100, warmup_steps: 10, ..TrainConfig::default() };
    let opt = AdamW::from_config(&config);
    let mut theta = vec![2.0f64, -1.0, 0.5, 0.0];
    let (mut m, mut v) = (vec![0.0; 4], vec![0.0; 4]);
    let mut oracle: Vec<(f64, f64, f64)> = theta.iter().map(|&p| (p, 0.0, 0.0)).collect();
    for s in 0..100u64 {
        // Gradient of a shifted quadratic plus a step-dependent wobble.
        let grads: Vec<f64> = theta.iter().enumerate().map(|(i, p)| p - i as f64 + (s as f64 * 0.3).sin()).collect();
        let lr = lr_at(s, &config).unwrap();
        opt.update(&mut theta, &grads, &mut m, &mut v, lr, s + 1);
        for (o, g) in oracle.iter_mut().zip(&grads) {
            scalar_adamw(&mut o.0, &mut o.1, &mut o.2, *g, lr, s as i32 + 1);
        }
    }
    for (p, o) in theta.iter().zip(&oracle) {
        assert!((p - o.0).abs() < 1e-7, "{p} vs {}", o.0);
    }
    assert!(theta.iter().zip(&oracle).all(|(p, o)| (p - o.0).abs() < 1e-12));
}

#[test]
fn preset_schedule_values() {
    let c = preset("ttl-160m").unwrap().train;
    assert_eq!(lr_at(0, &c).unwrap(), 0.0);
    assert_eq!(lr_at(5_000, &c).unwrap(), 6.0e-4);
    let mid = c.warmup_steps + (c.total_steps - c.warmup_steps) / 2;
    assert!((lr_at(mid, &c).unwrap() - 3.0e-4).abs() < 1e-15);
}

proptest! {
    #[test]
    fn schedule_invariants(total in 2u64..5000, warm_frac in 0.0f64..0.99, min_frac in 0.0f64..1.0, peak in 1e-6f64..1e-2) {
        let warmup = ((total as f64 * warm_frac) as u64).min(total - 1);
        let c = TrainConfig { total_steps: total, warmup_steps: warmup, peak_lr: peak, min_lr: peak * min_frac, ..TrainConfig::default() };
        let at = |s| lr_at(s, &c).unwrap();
        prop_assert!((at(total) - c.min_lr).abs() <= 1e-12 * peak);
        prop_assert!((at(warmup) - peak).abs() <= 1e-12 * peak);
        if warmup > 0 {
            // Continuity: the last warmup step sits one increment below the peak.
            prop_assert!((at(warmup - 1) - peak * (warmup - 1) as f64 / warmup as f64).abs() <= 1e-15);
        }
        let mut prev = at(warmup);
        for s in warmup + 1..=total {
            let now = at(s);
            prop_assert!(now <= prev + 1e-18);
            prev = now;
        }
    }
}

#[test]
fn fresh_model_loss_is_near_uniform() {
    let t = trainer(tiny_train_config(1, 10));
    let ds = dataset(4, 9, 37, 1);
    let (loss, _) = t.loss_and_grads(&Batch::from_dataset(&ds, &[0, 1, 2, 3])).unwrap();
    let uniform = (37f64).ln();
    assert!((loss - uniform).abs() < 0.1 * uniform, "{loss} vs {uniform}");
}

fn run_accum(accum: u64, ds: &PackedDataset, steps: usize) -> (Vec<f64>, Vec<f32>) {
    let mut t = trainer(tiny_train_config(accum, 20));
    let rows = 4 / accum as usize;
    let mut losses = Vec::new();
    for s in 0..steps {
        let batches: Vec<Batch> = (0..accum as usize)
            .map(|k| {
                let idx: Vec<usize> = (0..rows).map(|r| (s * 4 + k * rows + r) % ds.n_sequences()).collect();
                Batch::from_dataset(ds, &idx)
            })
            .collect();
        losses.push(t.train_step(&batches).unwrap().loss);
    }
    let flat = t.model().params.tensors().iter().flat_map(|x| x.data().to_vec()).collect();
    (losses, flat)
}

#[test]
fn accumulation_matches_full_batch() {
    let ds = dataset(16, 9, 37, 2);
    let init: Vec<f32> =
        trainer(tiny_train_config(1, 20)).model().params.tensors().iter().flat_map(|x| x.data().to_vec()).collect();
    let (base_loss, base) = run_accum(1, &ds, 10);
    for accum in [2, 4] {
        let (loss, params) = run_accum(accum, &ds, 10);
        let loss_err = loss.iter().zip(&base_loss).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        let delta_err =
            params.iter().zip(&base).zip(&init).map(|((p, q), i)| ((p - i) - (q - i)).abs()).fold(0.0f32, f32::max);
        assert!(loss_err < 1e-5, "accum {accum}: loss error {loss_err}");
        assert!(delta_err < 1e-4, "accum {accum}: parameter delta error {delta_err}");
    }
}

#[test]
fn micro_batch_shape_is_checked() {
    let mut t = trainer(tiny_train_config(2, 20));
    let ds = dataset(8, 9, 37, 3);
    let one = Batch::from_dataset(&ds, &[0, 1]);
    assert!(t.train_step(std::slice::from_ref(&one)).is_err());
    let wide = Batch::from_dataset(&ds, &[0, 1, 2]);
    assert!(t.train_step(&[wide.clone(), wide]).is_err());
    assert!(t.train_step(&[one.clone(), one]).is_ok());
}

#[test]
fn resume_is_bitwise_identical() {
    let ds = dataset(10, 9, 37, 4);
    let eval = dataset(2, 9, 37, 5);
    let config = TrainConfig { checkpoint_interval: 25, eval_interval: 20, ..tiny_train_config(1, 100) };

    let mut full = trainer(config.clone());
    full.run_until(&ds, Some(&eval), 100, &mut FixedClock::new(0.5), &mut NoHooks).unwrap();

    let mut first = trainer(config);
    first.run_until(&ds, Some(&eval), 50, &mut FixedClock::new(0.5), &mut NoHooks).unwrap();
    let saved = first.state();
    drop(first);
    let mut resumed = Trainer::from_state(saved).unwrap();
    resumed.run_until(&ds, Some(&eval), 100, &mut FixedClock::new(0.5), &mut NoHooks).unwrap();

    let a = full.state();
    let b = resumed.state();
    assert_eq!(a.step, 100);
    assert_eq!(a.params, b.params);
    assert_eq!(a.first_moment, b.first_moment);
    assert_eq!(a.second_moment, b.second_moment);
    assert_eq!(a.sampler, b.sampler);
    assert_eq!(a.counters.tokens, b.counters.tokens);
    assert_eq!(a.counters.elapsed_s.to_bits(), b.counters.elapsed_s.to_bits());
    assert_eq!(a.log, b.log);
    // 100 steps of 4 sequences from 10 wrap through several epochs.
    assert!(a.sampler.epoch >= 40);
}

#[test]
fn runs_are_deterministic_and_logged() {
    let ds = dataset(12, 9, 37, 6);
    let eval = dataset(3, 9, 37, 7);
    let config = TrainConfig { eval_interval: 10, checkpoint_interval: 15, ..tiny_train_config(1, 30) };
    let run = || {
        let mut t = trainer(config.clone());
        t.run_until(&ds, Some(&eval), u64::MAX, &mut FixedClock::new(1.0), &mut NoHooks).unwrap();
        t.state()
    };
    let (a, b) = (run(), run());
    assert_eq!(a, b);
    let steps: Vec<u64> = a.log.rows().iter().map(|r| r.step.unwrap()).collect();
    assert_eq!(steps, vec![10, 15, 20, 30]);
    for r in a.log.rows() {
        assert_eq!(r.tokens, r.step.unwrap() * config.tokens_per_batch);
        assert_eq!(r.eval_perplexity.is_some(), r.step.unwrap() % 10 == 0);
        assert_eq!(r.emissions_kg, r.energy_kwh * a.log.carbon.intensity);
    }
    assert_eq!(a.counters.steps, 30);
}

#[test]
fn sampler_state_survives_round_trip() {
    let mut s = Sampler::new(SamplerState { seed: 1, epoch: 0, cursor: 0 }, 7);
    for _ in 0..5 {
        s.next_batch(3).unwrap();
    }
    let mut again = Sampler::new(s.state(), 7);
    for _ in 0..5 {
        assert_eq!(s.next_batch(3).unwrap(), again.next_batch(3).unwrap());
    }
}

#[test]
fn masked_batches() {
    let mut t = trainer(tiny_train_config(1, 10));
    let stream: Vec<u32> = (0..36).map(|i| i % 37).collect();
    let mask: Vec<u8> = (0..36).map(|i| (i % 9 >= 5) as u8).collect();
    let (ds, _) = ttl_core::data::pack_masked(&stream, Some(&mask), 9, 0).unwrap();
    let batch = Batch::from_dataset(&ds, &[0, 1, 2, 3]);
    assert!(t.train_step(&[batch]).is_ok());
    let silent = ttl_core::data::pack_masked(&stream, Some(&[0u8; 36]), 9, 0).unwrap().0;
    assert!(t.train_step(&[Batch::from_dataset(&silent, &[0, 1, 2, 3])]).is_err());
}

//! Cached decoding and 4-bit weight storage.

mod common;

use proptest::prelude::*;
use rand::Rng;
use ttl_core::inference::{
    dequant_matmul, footprint_formula, generate, teacher_forced_choices, GenerationParams, InferenceModel, QuantMatrix,
    QuantOptions, QuantizedModel,
};
use ttl_core::model::{Llama, ModelConfig};
use ttl_core::tensor::kernels::matmul_acc;

fn config(tied: bool, kv_heads: usize) -> ModelConfig {
    ModelConfig {
        hidden_size: 32,
        intermediate_size: 48,
        context_length: 12,
        n_heads: 4,
        n_kv_heads: kv_heads,
        n_layers: 2,
        vocab_size: 41,
        tie_embeddings: tied,
        ..ModelConfig::ttl_160m()
    }
}

/// Initialization scaled up so logits are far from uniform.
fn model(tied: bool, kv_heads: usize, seed: u64) -> Llama<f32> {
    let mut m = Llama::init(config(tied, kv_heads), seed).unwrap();
    for t in m.params.tensors_mut() {
        if t.shape().len() == 2 {
            t.data_mut().iter_mut().for_each(|x| *x *= 8.0);
        }
    }
    m
}

#[test]
fn cached_decoding_equals_recompute() {
    for (tied, kv) in [(false, 4), (true, 2), (false, 1)] {
        let m = InferenceModel::from_llama(&model(tied, kv, 7)).unwrap();
        let prompt = [3u32, 17, 5];
        let g = generate(&m, &prompt, &GenerationParams { max_new_tokens: 25, ..Default::default() }).unwrap();
        assert_eq!(g.tokens.len(), 25);
        // Recompute every step from scratch over the visible window.
        let mut history = prompt.to_vec();
        for &t in &g.tokens {
            let window = &history[history.len().saturating_sub(12)..];
            let logits = m.logits(window).unwrap();
            assert_eq!(ttl_core::inference::argmax(&logits) as u32, t);
            history.push(t);
        }
        let mut cache = m.new_cache();
        let mut incremental = Vec::new();
        for &t in &history[..12] {
            incremental.push(m.forward(&mut cache, &[t]).unwrap());
        }
        for (i, inc) in incremental.iter().enumerate() {
            let fresh = m.logits(&history[..=i]).unwrap();
            assert_eq!(
                inc.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
                fresh.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
            );
        }
    }
}

#[test]
fn decoder_matches_training_forward() {
    for (tied, kv) in [(false, 4), (true, 2)] {
        let llama = model(tied, kv, 9);
        let m = InferenceModel::from_llama(&llama).unwrap();
        let tokens = [1u32, 40, 2, 2, 19, 33, 0, 8];
        let reference = llama.forward(&tokens).unwrap();
        let v = llama.config.vocab_size;
        for n in 1..=tokens.len() {
            let got = m.logits(&tokens[..n]).unwrap();
            let want = &reference.data()[(n - 1) * v..n * v];
            for (a, b) in got.iter().zip(want) {
                assert!((a - b).abs() <= 1e-4 * (1.0 + b.abs()), "{a} vs {b}");
            }
        }
    }
}

#[test]
fn sampling_controls() {
    let m = InferenceModel::from_llama(&model(false, 2, 4)).unwrap();
    let greedy = generate(&m, &[5, 6], &GenerationParams { max_new_tokens: 30, ..Default::default() }).unwrap();
    let top1 =
        GenerationParams { max_new_tokens: 30, temperature: 1.5, top_k: Some(1), seed: 99, ..Default::default() };
    assert_eq!(generate(&m, &[5, 6], &top1).unwrap(), greedy);

    let hot = GenerationParams { max_new_tokens: 30, temperature: 2.0, top_k: Some(10), seed: 5, ..Default::default() };
    let a = generate(&m, &[5, 6], &hot).unwrap();
    assert_eq!(a, generate(&m, &[5, 6], &hot).unwrap());
    let b = generate(&m, &[5, 6], &GenerationParams { seed: 6, ..hot }).unwrap();
    assert_ne!(a.tokens, b.tokens);
}

#[test]
fn teacher_forcing_reproduces_greedy_choices() {
    let m = InferenceModel::from_llama(&model(false, 4, 12)).unwrap();
    let g = generate(&m, &[9], &GenerationParams { max_new_tokens: 40, ..Default::default() }).unwrap();
    assert_eq!(teacher_forced_choices(&m, &[9], &g.tokens).unwrap(), g.tokens);
}

#[test]
fn quantized_storage_runs_like_its_dequantized_weights() {
    for (tied, embed) in [(false, false), (true, true), (false, true)] {
        let llama = model(tied, 2, 21);
        let options = QuantOptions { group_size: 16, quantize_embeddings: embed };
        let q = QuantizedModel::quantize(&llama.config, &llama.params, options).unwrap();
        assert_eq!(q.footprint_bytes(), footprint_formula(&llama.config, &options));
        let direct = InferenceModel::from_quantized(&q).unwrap();
        let widened = InferenceModel::from_params(&llama.config, &q.dequantize().unwrap()).unwrap();
        let tokens = [4u32, 8, 15, 16, 23, 42 % 41];
        assert_eq!(direct.logits(&tokens).unwrap(), widened.logits(&tokens).unwrap());
    }
}

#[test]
fn reference_group_error() {
    let q = QuantMatrix::quantize(&[0.1, -0.2, 0.3, -0.4], 1, 4, 128).unwrap();
    assert!((q.scales[0] as f64 - 0.046_667).abs() < 1e-6);
    for (i, x) in [0.1f64, -0.2, 0.3, -0.4].iter().enumerate() {
        assert!((q.value_f64(i) - x).abs() <= 0.02334);
    }
}

#[test]
fn zero_matrix_gives_zero_output() {
    let q = QuantMatrix::quantize(&[0.0; 64], 8, 8, 16).unwrap();
    assert!(q.dequantize().iter().all(|&x| x == 0.0));
    let x: Vec<f32> = (0..24).map(|i| i as f32 - 7.5).collect();
    assert!(dequant_matmul(&x, 3, &q).unwrap().iter().all(|&y| y == 0.0));
}

fn assert_bound(data: &[f32], q: &QuantMatrix) {
    let rec = q.dequantize();
    for (i, &x) in data.iter().enumerate() {
        let s = q.scales[i / q.group_size] as f64;
        let err = (q.value_f64(i) - x as f64).abs();
        assert!(err <= s / 2.0 * (1.0 + 1e-9), "element {i}: error {err} above half of scale {s}");
        let err32 = (rec[i] as f64 - x as f64).abs();
        let ulp = f32::EPSILON as f64 * (x as f64).abs().max(f32::MIN_POSITIVE as f64);
        assert!(err32 <= s / 2.0 * (1.0 + 1e-9) + ulp, "element {i}: f32 error {err32}");
    }
}

#[test]
fn bound_on_an_8_by_16_matrix() {
    let mut rng = common::rng(816);
    let data: Vec<f32> = (0..128).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    for g in [4, 16, 32, 128] {
        assert_bound(&data, &QuantMatrix::quantize(&data, 8, 16, g).unwrap());
    }
}

proptest! {
    #[test]
    fn reconstruction_stays_within_half_a_step(
        rows in 1usize..20,
        cols in 1usize..20,
        group in 2usize..40,
        scale in 1e-4f32..100.0,
        seed in any::<u64>(),
    ) {
        let mut rng = common::rng(seed);
        let data: Vec<f32> = (0..rows * cols).map(|_| rng.random_range(-1.0f32..1.0) * scale).collect();
        let q = QuantMatrix::quantize(&data, rows, cols, group).unwrap();
        prop_assert!((0..rows * cols).all(|i| q.code(i) <= 15));
        assert_bound(&data, &q);
    }

    #[test]
    fn blocked_product_is_bitwise_dense(m in 1usize..5, k in 1usize..200, n in 1usize..9, seed in any::<u64>()) {
        let mut rng = common::rng(seed);
        let w: Vec<f32> = (0..k * n).map(|_| rng.random_range(-2.0f32..2.0)).collect();
        let x: Vec<f32> = (0..m * k).map(|_| rng.random_range(-2.0f32..2.0)).collect();
        let q = QuantMatrix::quantize(&w, k, n, 32).unwrap();
        let mut dense = vec![0.0f32; m * n];
        matmul_acc(&x, &q.dequantize(), &mut dense, m, k, n);
        prop_assert_eq!(dequant_matmul(&x, m, &q).unwrap(), dense);
    }
}

#[test]
fn footprint_of_the_larger_preset() {
    let c = ModelConfig::ttl_460m();
    let bytes = footprint_formula(&c, &QuantOptions::default());
    // 20 quantized [1024, x] blocks per layer plus the head at 4.5 bits per
    // weight with 8 bytes per 128, and a 16-bit embedding table and norms.
    let quantized = 24 * (4 * 1024 * 1024 + 3 * 1024 * 4096) + 1024 * 32_000u64;
    let exempt = 32_000 * 1024 + 49 * 1024u64;
    assert_eq!(bytes, quantized / 2 + quantized / 128 * 8 + exempt * 2);
    let mb = bytes as f64 / 1e6;
    assert!((mb - 310.6).abs() < 0.1, "{mb}");
    let all = footprint_formula(&c, &QuantOptions { quantize_embeddings: true, ..Default::default() });
    assert!(all < bytes);
}

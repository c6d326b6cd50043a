#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use trifuse::branches::{AudioSequence, ImageSequence, TextSequence};
use trifuse::config::{ModelConfig, TextMode};
use trifuse::data::{EmotionLabel, MultimodalSample};
use trifuse::tensor::Tensor;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
}

pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        d_model: 8,
        n_heads: 1,
        n_layers: 1,
        d_ff: 16,
        dropout_p: 0.0,
        d_img: 5,
        d_audio: 4,
        text_mode: TextMode::Embeddings,
        d_text: 6,
        vocab_size: 0,
        max_seq_len: 16,
        ..ModelConfig::default()
    }
}

pub fn token_config(vocab: usize) -> ModelConfig {
    ModelConfig {
        text_mode: TextMode::Tokens,
        d_text: 0,
        vocab_size: vocab,
        ..tiny_config()
    }
}

/// A random sample fitting `config` with the given sequence lengths.
pub fn random_sample(
    rng: &mut ChaCha8Rng,
    config: &ModelConfig,
    id: &str,
    lens: (usize, usize, usize),
    label: usize,
) -> MultimodalSample {
    let text = match config.text_mode {
        TextMode::Embeddings => {
            TextSequence::embeddings(random_tensor(rng, &[lens.2, config.d_text], 1.0)).unwrap()
        }
        TextMode::Tokens => {
            TextSequence::tokens((0..lens.2).map(|_| rng.gen_range(1..config.vocab_size)).collect())
                .unwrap()
        }
    };
    MultimodalSample {
        id: id.to_owned(),
        dialogue_id: None,
        image: ImageSequence::new(random_tensor(rng, &[lens.0, config.d_img], 1.0)).unwrap(),
        audio: AudioSequence::new(random_tensor(rng, &[lens.1, config.d_audio], 1.0)).unwrap(),
        text,
        label: EmotionLabel::from_code(label).unwrap(),
    }
}

pub fn random_samples(rng: &mut ChaCha8Rng, config: &ModelConfig, n: usize, max_len: usize) -> Vec<MultimodalSample> {
    (0..n)
        .map(|i| {
            let lens = (
                rng.gen_range(1..=max_len),
                rng.gen_range(1..=max_len),
                rng.gen_range(1..=max_len),
            );
            let label = rng.gen_range(0..7);
            random_sample(rng, config, &format!("s{i}"), lens, label)
        })
        .collect()
}

/// Spearman rank correlation of `ys` with `0..ys.len()`, mid-ranks for ties.
pub fn spearman_with_index(ys: &[f64]) -> f64 {
    let ranks = |v: &[f64]| {
        let mut order: Vec<usize> = (0..v.len()).collect();
        order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < order.len() {
            let mut j = i;
            while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
                j += 1;
            }
            for &k in &order[i..=j] {
                r[k] = (i + j) as f64 / 2.0;
            }
            i = j + 1;
        }
        r
    };
    let x: Vec<f64> = (0..ys.len()).map(|i| i as f64).collect();
    let (rx, ry) = (ranks(&x), ranks(ys));
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (mx, my) = (mean(&rx), mean(&ry));
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    if vy == 0.0 {
        return 0.0;
    }
    cov / (vx * vy).sqrt()
}

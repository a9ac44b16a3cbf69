#![allow(dead_code)]

use mergelab_core::transformer::EncoderConfig;
use mergelab_core::{ParamSet, ParamVars, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// One-or-two block toy encoder, small enough for exhaustive finite
/// differences.
pub fn toy_cfg(blocks: usize, dim: usize, tasks: usize) -> EncoderConfig {
    EncoderConfig {
        num_blocks: blocks,
        dim,
        heads: 2,
        mlp_ratio: 2.0,
        seq_len: 5,
        vocab: 7,
        num_classes: vec![3; tasks],
    }
}

pub fn random_batch(rng: &mut ChaCha8Rng, cfg: &EncoderConfig, n: usize) -> Vec<Vec<u8>> {
    (0..n)
        .map(|_| {
            (0..cfg.seq_len - 1)
                .map(|_| rng.random_range(0..cfg.vocab as u8))
                .collect()
        })
        .collect()
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| scale * rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

/// Adds uniform noise of size `scale` to every entry.
pub fn jitter(p: &ParamSet, rng: &mut ChaCha8Rng, scale: f64) -> ParamSet {
    let mut out = p.clone();
    for (_, t) in out.iter_mut() {
        for v in t.data_mut() {
            *v += scale * rng.random_range(-1.0..1.0);
        }
    }
    out
}

/// Both sets in one, names prefixed `m:` and `i:`.
pub fn combine(model: &ParamSet, iv: &ParamSet) -> ParamSet {
    let mut out = ParamSet::new();
    for (n, t) in model.iter() {
        out.insert(format!("m:{n}"), t.clone());
    }
    for (n, t) in iv.iter() {
        out.insert(format!("i:{n}"), t.clone());
    }
    out
}

/// The variables registered under `prefix`, prefix stripped.
pub fn split_vars(vars: &ParamVars, prefix: &str) -> ParamVars {
    let mut out = ParamVars::new();
    for (n, v) in vars.iter() {
        if let Some(rest) = n.strip_prefix(prefix) {
            out.insert(rest, *v);
        }
    }
    out
}

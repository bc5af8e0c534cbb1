//! Shared test oracles. Nothing here calls into the backward pass.
#![allow(dead_code)]

use avatarfit::tensor::{Graph, Real, Tensor, Var};
use avatarfit::aux_extractors::{IdNetConfig, IdTrainConfig};
use avatarfit::imitator::{ImitatorConfig, ImitatorTrainConfig};
use avatarfit::perception::PerceptionConfig;
use avatarfit::procgen::CorpusConfig;
use avatarfit::trainer::{Stage2Config, TrainConfig};
use avatarfit::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor<T: Real>(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::from_f64(shape, &data).unwrap()
}

/// Random values bounded away from zero (for kinked primitives).
pub fn random_away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], margin: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| {
            let m: f64 = rng.gen_range(margin..1.0);
            if rng.gen_bool(0.5) { m } else { -m }
        })
        .collect();
    Tensor::from_f64(shape, &data).unwrap()
}

/// Evaluates `f` on `inputs` registered as trainable leaves.
pub fn eval<T: Real, F>(inputs: &[Tensor<T>], f: &F) -> f64
where
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone()).unwrap()).collect();
    let out = f(&mut g, &vars).unwrap();
    g.value(out).item().f64()
}

/// Max discrepancy between analytic gradients and central differences,
/// normalised by the largest gradient magnitude across all inputs.
pub fn grad_check<T: Real, F>(inputs: &[Tensor<T>], eps: f64, f: F) -> f64
where
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone()).unwrap()).collect();
    let out = f(&mut g, &vars).unwrap();
    let grads = g.backward(out).unwrap();
    let analytic: Vec<Vec<f64>> = vars.iter().map(|&v| grads.get(v).to_f64_vec()).collect();

    let mut numeric = Vec::new();
    for (i, t) in inputs.iter().enumerate() {
        let mut col = Vec::with_capacity(t.len());
        for j in 0..t.len() {
            let mut plus = inputs.to_vec();
            let mut minus = inputs.to_vec();
            plus[i].data_mut()[j] = T::of(t.data()[j].f64() + eps);
            minus[i].data_mut()[j] = T::of(t.data()[j].f64() - eps);
            col.push((eval(&plus, &f) - eval(&minus, &f)) / (2.0 * eps));
        }
        numeric.push(col);
    }
    max_rel_err(&analytic, &numeric)
}

pub fn max_rel_err(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let scale = a
        .iter()
        .chain(b)
        .flatten()
        .fold(0.0f64, |m, v| m.max(v.abs()))
        .max(1e-12);
    a.iter()
        .flatten()
        .zip(b.iter().flatten())
        .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()))
        / scale
}

/// Directional-derivative check for large inputs: compares `∇f·d` with a
/// central difference along a random unit direction `d`.
pub fn directional_check<T: Real, F>(inputs: &[Tensor<T>], eps: f64, seed: u64, f: F) -> f64
where
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var>,
{
    let mut r = rng(seed);
    let dirs: Vec<Vec<f64>> = inputs
        .iter()
        .map(|t| (0..t.len()).map(|_| r.gen_range(-1.0..1.0)).collect())
        .collect();
    let norm = dirs.iter().flatten().map(|v| v * v).sum::<f64>().sqrt();
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone()).unwrap()).collect();
    let out = f(&mut g, &vars).unwrap();
    let grads = g.backward(out).unwrap();
    let mut analytic = 0.0;
    for (v, d) in vars.iter().zip(&dirs) {
        analytic += grads.get(*v).to_f64_vec().iter().zip(d).map(|(a, b)| a * b / norm).sum::<f64>();
    }
    let shifted = |s: f64| -> Vec<Tensor<T>> {
        inputs
            .iter()
            .zip(&dirs)
            .map(|(t, d)| {
                let data: Vec<f64> = t.to_f64_vec().iter().zip(d).map(|(x, y)| x + s * y / norm).collect();
                Tensor::from_f64(t.shape(), &data).unwrap()
            })
            .collect()
    };
    let numeric = (eval(&shifted(eps), &f) - eval(&shifted(-eps), &f)) / (2.0 * eps);
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-12)
}

pub fn tiny_train_config() -> TrainConfig {
    TrainConfig {
        seed: 5,
        imitator: ImitatorConfig {
            param_dim: 32,
            image_size: 16,
            base_channels: 8,
        },
        imitator_train: ImitatorTrainConfig {
            epochs: 3,
            batch_size: 8,
            lr: 1e-3,
        },
        id_net: IdNetConfig {
            image_size: 16,
            channels: [4, 4, 8, 8],
            embed_dim: 8,
        },
        id_train: IdTrainConfig {
            max_epochs: 2,
            batch_size: 8,
            lr: 1e-3,
            target_accuracy: 0.0,
        },
        perception: PerceptionConfig {
            image_size: 16,
            param_dim: 32,
            stem_channels: 4,
            code_dim: 6,
            codebook_size: 8,
            regressor_channels: 4,
        },
        stage2: Stage2Config {
            epochs: 2,
            steps_per_epoch: 2,
            target_batch: 4,
            source_identities: 3,
            checkpoint_every: 1,
            probe_images: 6,
            ..Stage2Config::default()
        },
        ..TrainConfig::default()
    }
}

pub fn tiny_corpus(dir: &std::path::Path) {
    avatarfit::procgen::build_corpus(&tiny_corpus_config(), 3, dir).unwrap();
}

pub fn tiny_corpus_config() -> CorpusConfig {
    CorpusConfig {
        image_size: 16,
        target_train: 24,
        target_test: 8,
        trainer_identities: 6,
        trainer_views: 3,
        eval_identities: 4,
        eval_views: 2,
        extractor_identities: 4,
        extractor_views: 4,
        ..CorpusConfig::default()
    }
}

//! Verification, robustness, embedding export, reconstruction and throughput.

mod descriptor;

pub use descriptor::{apply_descriptor, fit_descriptor_pipeline, signed_sqrt, DescriptorPipeline};

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::ImageStore;
use crate::error::{Error, Result};
use crate::imitator::ImitatorNet;
use crate::objectives::{mmd_sq_values, KernelSpec};
use crate::perception::Perception;
use crate::procgen::{mask_region, render_engine, Image, MaskRegion, Manifest, ParamVector, Split};
use crate::seeds::rng_for;
use crate::tensor::Tensor;

pub const THRESHOLDS: usize = 1001;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerificationPair {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub same: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerificationResult {
    pub accuracy: f64,
    pub threshold: f64,
    pub fit_accuracy: f64,
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

pub fn threshold_grid() -> Vec<f64> {
    (0..THRESHOLDS).map(|i| -1.0 + 2.0 * i as f64 / (THRESHOLDS - 1) as f64).collect()
}

fn accuracy_at(scores: &[(f64, bool)], t: f64) -> f64 {
    let ok = scores.iter().filter(|(s, same)| (*s >= t) == *same).count();
    ok as f64 / scores.len() as f64
}

/// Picks the best of 1,001 thresholds on `fit` (ties to the lowest) and
/// reports accuracy on `test`. Pairs predict "same" when cosine ≥ threshold.
pub fn verification_accuracy(
    fit: &[VerificationPair],
    test: &[VerificationPair],
    pipeline: &DescriptorPipeline,
) -> Result<VerificationResult> {
    if fit.is_empty() || test.is_empty() {
        return Err(Error::Invalid("verification needs non-empty fit and test pair sets".into()));
    }
    let score = |pairs: &[VerificationPair]| -> Vec<(f64, bool)> {
        pairs
            .iter()
            .map(|p| (cosine(&apply_descriptor(&p.a, pipeline), &apply_descriptor(&p.b, pipeline)), p.same))
            .collect()
    };
    let (fs, ts) = (score(fit), score(test));
    let mut best = (f64::NEG_INFINITY, 0.0);
    for t in threshold_grid() {
        let acc = accuracy_at(&fs, t);
        if acc > best.0 {
            best = (acc, t);
        }
    }
    Ok(VerificationResult {
        accuracy: accuracy_at(&ts, best.1),
        threshold: best.1,
        fit_accuracy: best.0,
    })
}

/// Image-index pairs of a verification benchmark; fit and test pairs come
/// from disjoint identity halves.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Benchmark {
    pub fit: Vec<(usize, usize, bool)>,
    pub test: Vec<(usize, usize, bool)>,
}

/// One positive pair (first two views) per identity and as many seeded
/// negative pairs of distinct identities, split by identity halves.
pub fn build_benchmark(identities: &[Vec<usize>], seed: u64) -> Result<Benchmark> {
    if identities.len() < 4 || identities.iter().any(|v| v.len() < 2) {
        return Err(Error::Invalid("benchmark needs ≥ 4 identities with ≥ 2 views".into()));
    }
    let half = identities.len() / 2;
    let mut rng = rng_for(seed, "verification-pairs", 0);
    let mut build = |ids: &[Vec<usize>]| {
        let mut pairs: Vec<(usize, usize, bool)> = ids.iter().map(|v| (v[0], v[1], true)).collect();
        for _ in 0..ids.len() {
            let i = rng.gen_range(0..ids.len());
            let mut j = rng.gen_range(0..ids.len() - 1);
            if j >= i {
                j += 1;
            }
            let a = ids[i][rng.gen_range(0..ids[i].len())];
            let b = ids[j][rng.gen_range(0..ids[j].len())];
            pairs.push((a, b, false));
        }
        pairs
    };
    let fit = build(&identities[..half]);
    let test = build(&identities[half..]);
    Ok(Benchmark { fit, test })
}

fn to_pairs(idx: &[(usize, usize, bool)], desc: &[Vec<f64>]) -> Vec<VerificationPair> {
    idx.iter()
        .map(|&(a, b, same)| VerificationPair {
            a: desc[a].clone(),
            b: desc[b].clone(),
            same,
        })
        .collect()
}

/// Accuracy with the same/different labels randomly permuted, averaged over `trials`.
pub fn shuffled_chance(bench: &Benchmark, desc: &[Vec<f64>], pipeline: &DescriptorPipeline, trials: usize, seed: u64) -> Result<f64> {
    let mut total = 0.0;
    for t in 0..trials.max(1) {
        let mut rng = rng_for(seed, "shuffled-labels", t as u64);
        let mut shuffle = |pairs: &[(usize, usize, bool)]| {
            let mut labels: Vec<bool> = pairs.iter().map(|p| p.2).collect();
            labels.shuffle(&mut rng);
            pairs.iter().zip(labels).map(|(&(a, b, _), l)| (a, b, l)).collect::<Vec<_>>()
        };
        let fit = shuffle(&bench.fit);
        let test = shuffle(&bench.test);
        total += verification_accuracy(&to_pairs(&fit, desc), &to_pairs(&test, desc), pipeline)?.accuracy;
    }
    Ok(total / trials.max(1) as f64)
}

fn rows(t: &Tensor<f32>) -> Vec<Vec<f64>> {
    let d = t.shape()[1];
    t.data().chunks(d).map(|r| r.iter().map(|&v| v as f64).collect()).collect()
}

/// Regressed parameter vectors of every image in `store`.
pub fn regress_params(perception: &Perception<f32>, store: &ImageStore) -> Result<Tensor<f32>> {
    let mut parts = Vec::new();
    let idx: Vec<usize> = (0..store.len()).collect();
    for chunk in idx.chunks(64) {
        let (_, p) = perception.predict(&store.batch(chunk)?, 64)?;
        parts.extend_from_slice(p.data());
    }
    Tensor::new(&[store.len(), perception.config().param_dim], parts)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionResult {
    pub region: MaskRegion,
    pub accuracy: f64,
    pub threshold: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustnessReport {
    pub baseline: VerificationResult,
    pub per_region: Vec<RegionResult>,
    pub mean_drop: f64,
}

/// Verification on unmasked and region-masked copies of `images`.
/// Masking happens in memory only.
pub fn robustness_eval(
    perception: &Perception<f32>,
    images: &ImageStore,
    bench: &Benchmark,
    pipeline: &DescriptorPipeline,
    regions: &[MaskRegion],
) -> Result<RobustnessReport> {
    let base_desc = rows(&regress_params(perception, images)?);
    let baseline = verification_accuracy(&to_pairs(&bench.fit, &base_desc), &to_pairs(&bench.test, &base_desc), pipeline)?;
    let mut per_region = Vec::new();
    for &region in regions {
        let masked: Vec<Image> = (0..images.len()).map(|i| mask_region(&images.image(i), region)).collect();
        let desc = rows(&regress_params(perception, &ImageStore::from_images(&masked)?)?);
        let r = verification_accuracy(&to_pairs(&bench.fit, &desc), &to_pairs(&bench.test, &desc), pipeline)?;
        per_region.push(RegionResult {
            region,
            accuracy: r.accuracy,
            threshold: r.threshold,
        });
    }
    let occluding: Vec<f64> = per_region
        .iter()
        .filter(|r| r.region != MaskRegion::None)
        .map(|r| baseline.accuracy - r.accuracy)
        .collect();
    let mean_drop = if occluding.is_empty() {
        0.0
    } else {
        occluding.iter().sum::<f64>() / occluding.len() as f64
    };
    Ok(RobustnessReport {
        baseline,
        per_region,
        mean_drop,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    /// Training-split source images used to fit the descriptor pipeline.
    pub pipeline_images: usize,
    pub chance_trials: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            pipeline_images: 2000,
            chance_trials: 20,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub threshold: f64,
    pub chance: f64,
    pub per_region: Vec<RegionResult>,
    pub mean_drop: f64,
    pub pairs: usize,
    pub pipeline_fitted_on: String,
    #[serde(default)]
    pub mmd_trend: Vec<(usize, f64)>,
    #[serde(default)]
    pub throughput: Option<BenchResult>,
}

/// Source images of `split` with each identity's image indices.
pub fn identity_images(corpus: &Path, m: &Manifest, split: Split) -> Result<(ImageStore, Vec<Vec<usize>>)> {
    let mut paths = Vec::new();
    let mut ids = Vec::new();
    for views in m.identities(split).values() {
        let start = paths.len();
        paths.extend(views.iter().map(|e| e.path.as_str()));
        ids.push((start..paths.len()).collect());
    }
    Ok((ImageStore::load(corpus, &paths, m.image_size)?, ids))
}

/// Full verification + robustness protocol on the corpus' eval identities.
pub fn evaluate(perception: &Perception<f32>, corpus: &Path, cfg: &EvalConfig) -> Result<EvalReport> {
    let m = Manifest::load(corpus)?;
    let fit_paths: Vec<&str> = m.sources(Split::Train).map(|e| e.path.as_str()).take(cfg.pipeline_images).collect();
    let fit_store = ImageStore::load(corpus, &fit_paths, m.image_size)?;
    let pipeline = fit_descriptor_pipeline(&rows(&regress_params(perception, &fit_store)?), "source-train")?;
    let (images, ids) = identity_images(corpus, &m, Split::Eval)?;
    let bench = build_benchmark(&ids, cfg.seed)?;
    let rob = robustness_eval(perception, &images, &bench, &pipeline, &MaskRegion::OCCLUDING)?;
    let desc = rows(&regress_params(perception, &images)?);
    let chance = shuffled_chance(&bench, &desc, &pipeline, cfg.chance_trials, cfg.seed)?;
    Ok(EvalReport {
        accuracy: rob.baseline.accuracy,
        threshold: rob.baseline.threshold,
        chance,
        per_region: rob.per_region,
        mean_drop: rob.mean_drop,
        pairs: bench.fit.len() + bench.test.len(),
        pipeline_fitted_on: pipeline.fitted_on.clone(),
        mmd_trend: Vec::new(),
        throughput: None,
    })
}

/// CSV (`domain,p0,…`) of regressed parameters for both domains, plus their MMD².
pub fn export_embeddings(perception: &Perception<f32>, source: &ImageStore, target: &ImageStore) -> Result<(String, f64)> {
    let ps = regress_params(perception, source)?;
    let pt = regress_params(perception, target)?;
    let d = ps.shape()[1];
    let mut csv = String::from("domain");
    for j in 0..d {
        write!(csv, ",p{j}").expect("string write");
    }
    csv.push('\n');
    for (tag, t) in [("source", &ps), ("target", &pt)] {
        for row in t.data().chunks(d) {
            csv.push_str(tag);
            for v in row {
                write!(csv, ",{v:.6}").expect("string write");
            }
            csv.push('\n');
        }
    }
    let mmd = mmd_sq_values(&ps, &pt, &KernelSpec::median())?;
    Ok((csv, mmd))
}

#[derive(Clone, Debug)]
pub struct Reconstruction {
    pub params: ParamVector,
    pub engine: Image,
    pub imitated: Image,
}

/// One forward pass: image → parameters, rendered by both the engine and the imitator.
pub fn reconstruct(perception: &Perception<f32>, imitator: &ImitatorNet<f32>, image: &Image) -> Result<Reconstruction> {
    let size = perception.config().image_size;
    if image.height() != size || image.width() != size {
        return Err(Error::Invalid(format!(
            "model expects {size}×{size} images, got {}×{}",
            image.height(),
            image.width()
        )));
    }
    let (_, p) = perception.predict(&Image::batch(&[image])?, 1)?;
    let params = ParamVector::new(p.into_data())?;
    Ok(Reconstruction {
        engine: render_engine(&params, size)?,
        imitated: imitator.imitate(&params)?,
        params,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchResult {
    pub batch: usize,
    pub images: usize,
    pub images_per_sec: f64,
    pub seconds_per_image: f64,
    pub runs: Vec<f64>,
    pub hardware: String,
}

/// Median of `runs` timed passes over `images` in batches of `batch`, after one warm-up pass.
pub fn throughput_bench(perception: &Perception<f32>, images: &Tensor<f32>, batch: usize, runs: usize) -> Result<BenchResult> {
    let n = images.shape()[0];
    perception.predict(images, batch)?;
    let mut times = Vec::with_capacity(runs.max(1));
    for _ in 0..runs.max(1) {
        let t = Instant::now();
        perception.predict(images, batch)?;
        times.push(t.elapsed().as_secs_f64());
    }
    let mut sorted = times.clone();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let med = sorted[sorted.len() / 2];
    Ok(BenchResult {
        batch,
        images: n,
        images_per_sec: n as f64 / med,
        seconds_per_image: med / n as f64,
        runs: times,
        hardware: format!(
            "{} CPU thread(s), {} {}",
            std::thread::available_parallelism().map_or(1, |n| n.get()),
            std::env::consts::ARCH,
            std::env::consts::OS
        ),
    })
}

//! Stage 2: the perception stack under the full objective, imitator and
//! identity extractor frozen.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use super::stage1::{load_id_extractor, load_imitator};
use super::{write_json, Checkpoint, TrainConfig, PERCEPTION_CKPT, STAGE2_LOSS_CSV, STAGE2_REPORT};
use crate::data::ImageStore;
use crate::error::{Error, Result};
use crate::imitator::ImitatorNet;
use crate::objectives::{full_objective, mmd_sq_values, Bound, KernelSpec, LossReport};
use crate::perception::{Perception, PerceptionConfig};
use crate::procgen::{Manifest, Split};
use crate::seeds::{rng_for, sub_seed};
use crate::tensor::{Adam, AdamConfig, Graph, Tensor, Var};

/// Loss term switched off in an ablation run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Ablation {
    Domain,
    Contrastive,
    Consistency,
}

impl Ablation {
    pub const ALL: [Ablation; 3] = [Ablation::Domain, Ablation::Contrastive, Ablation::Consistency];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Domain => "domain",
            Ablation::Contrastive => "contrastive",
            Ablation::Consistency => "consistency",
        }
    }

    /// Output directory tag of a run.
    pub fn tag(ablation: Option<Ablation>) -> String {
        match ablation {
            None => "full".into(),
            Some(a) => format!("no-{}", a.name()),
        }
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "domain" => Ok(Ablation::Domain),
            "contrastive" => Ok(Ablation::Contrastive),
            "consistency" => Ok(Ablation::Consistency),
            "restored" => Err(Error::Invalid("the restored loss cannot be ablated".into())),
            other => Err(Error::Invalid(format!("unknown ablation `{other}` (domain | contrastive | consistency)"))),
        }
    }
}

/// Measurements taken at a checkpoint.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbePoint {
    pub epoch: usize,
    /// Held-out target per-pixel squared error of the restored path.
    pub restored_mse: f64,
    /// Source–target parameter-space MMD² (median-heuristic kernel).
    pub param_mmd: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage2Report {
    pub tag: String,
    pub epochs: usize,
    pub steps: usize,
    pub first_step: LossReport,
    /// Mean total loss over the steps of epoch 1.
    pub epoch1_total: f64,
    pub probes: Vec<ProbePoint>,
    pub imitator_digest: String,
    pub extractor_digest: String,
    pub perception_digest: String,
    pub final_lr: f64,
}

#[derive(Clone, Debug)]
pub struct Stage2Outcome {
    pub dir: PathBuf,
    pub checkpoint: PathBuf,
    /// `(epoch, path)` for every saved checkpoint, epoch 0 first.
    pub checkpoints: Vec<(usize, PathBuf)>,
    pub report: Stage2Report,
}

struct SourcePool {
    images: ImageStore,
    /// Image indices of each identity's views.
    identities: Vec<Vec<usize>>,
}

fn source_pool(corpus: &Path, m: &Manifest, split: Split) -> Result<SourcePool> {
    let mut paths = Vec::new();
    let mut identities = Vec::new();
    for views in m.identities(split).values() {
        if views.len() < 2 {
            continue;
        }
        let start = paths.len();
        paths.extend(views.iter().map(|e| e.path.as_str()));
        identities.push((start..paths.len()).collect());
    }
    Ok(SourcePool {
        images: ImageStore::load(corpus, &paths, m.image_size)?,
        identities,
    })
}

pub(crate) fn target_images(corpus: &Path, m: &Manifest, split: Split, limit: Option<usize>) -> Result<ImageStore> {
    let paths: Vec<&str> = m.targets(split).map(|e| e.path.as_str()).take(limit.unwrap_or(usize::MAX)).collect();
    if paths.is_empty() {
        return Err(Error::Invalid(format!("corpus has no target images in the {split:?} split")));
    }
    ImageStore::load(corpus, &paths, m.image_size)
}

pub(crate) fn source_images(corpus: &Path, m: &Manifest, split: Split, limit: Option<usize>) -> Result<ImageStore> {
    let paths: Vec<&str> = m.sources(split).map(|e| e.path.as_str()).take(limit.unwrap_or(usize::MAX)).collect();
    if paths.is_empty() {
        return Err(Error::Invalid(format!("corpus has no source images in the {split:?} split")));
    }
    ImageStore::load(corpus, &paths, m.image_size)
}

fn all(store: &ImageStore) -> Result<Tensor<f32>> {
    store.batch(&(0..store.len()).collect::<Vec<_>>())
}

fn probe(
    epoch: usize,
    perception: &Perception<f32>,
    imitator: &ImitatorNet<f32>,
    probe_target: &Tensor<f32>,
    probe_source: &Tensor<f32>,
) -> Result<ProbePoint> {
    let (_, pt) = perception.predict(probe_target, 64)?;
    let (_, ps) = perception.predict(probe_source, 64)?;
    let n = pt.shape()[0];
    let mut err = 0.0;
    let mut start = 0;
    while start < n {
        let count = 64.min(n - start);
        let rendered = imitator.render_batch(&pt.slice_outer(start, count)?)?;
        let truth = probe_target.slice_outer(start, count)?;
        err += rendered
            .data()
            .iter()
            .zip(truth.data())
            .map(|(a, b)| ((a - b) as f64).powi(2))
            .sum::<f64>();
        start += count;
    }
    Ok(ProbePoint {
        epoch,
        restored_mse: err / probe_target.len() as f64,
        param_mmd: mmd_sq_values(&ps, &pt, &KernelSpec::median())?,
    })
}

fn csv_row(s: &mut String, step: usize, epoch: usize, r: &LossReport, lr: f64) {
    writeln!(
        s,
        "{step},{epoch},{:.8},{:.8},{:.8},{:.8},{:.8},{:.8},{:.8},{:.8},{lr:.3e}",
        r.restored, r.param, r.differ, r.domain, r.contrastive, r.consistency_3d, r.consistency_id, r.total
    )
    .expect("string write");
}

fn ensure_untouched(g: &Graph<f32>, grads: &crate::tensor::Gradients<f32>, vars: &[Var], owner: &str) -> Result<()> {
    for &v in vars {
        if g.requires_grad(v) || grads.get_opt(v).is_some_and(|t| t.data().iter().any(|x| *x != 0.0)) {
            return Err(Error::Frozen(format!("{owner} received a gradient during stage 2")));
        }
    }
    Ok(())
}

fn check_digest(what: &str, expected: &str, found: String) -> Result<()> {
    if expected != found {
        return Err(Error::Digest {
            what: what.to_string(),
            expected: expected.to_string(),
            found,
        });
    }
    Ok(())
}

/// Trains the perception stack. Writes checkpoints at epoch 0, every
/// `checkpoint_every` epochs and at the end, a per-step loss CSV and a report
/// into `out/<tag>`.
pub fn run_stage2(
    cfg: &TrainConfig,
    corpus: &Path,
    out: &Path,
    imitator_ckpt: &Path,
    extractor_ckpt: &Path,
    ablation: Option<Ablation>,
) -> Result<Stage2Outcome> {
    cfg.validate()?;
    let imitator = load_imitator(imitator_ckpt)?;
    let id_net = load_id_extractor(extractor_ckpt)?;
    let manifest = Manifest::load(corpus)?;
    cfg.check_manifest(&manifest)?;
    let (imitator_digest, extractor_digest) = (imitator.digest(), id_net.digest());

    let mut objective = cfg.objective.clone();
    match ablation {
        Some(Ablation::Domain) => objective.weights.domain = 0.0,
        Some(Ablation::Contrastive) => objective.weights.contrastive = 0.0,
        Some(Ablation::Consistency) => objective.weights.consistency = 0.0,
        None => {}
    }
    let tag = Ablation::tag(ablation);
    let dir = out.join(&tag);
    fs::create_dir_all(&dir)?;

    let s2 = &cfg.stage2;
    let targets = target_images(corpus, &manifest, Split::Train, None)?;
    let sources = source_pool(corpus, &manifest, Split::Train)?;
    if sources.identities.len() < s2.source_identities {
        return Err(Error::Invalid(format!(
            "need {} source identities with two views, corpus has {}",
            s2.source_identities,
            sources.identities.len()
        )));
    }
    if targets.len() < s2.target_batch {
        return Err(Error::Invalid("target split is smaller than one batch".into()));
    }
    let probe_target = all(&target_images(corpus, &manifest, Split::Test, Some(s2.probe_images))?)?;
    let probe_source = all(&source_images(corpus, &manifest, Split::Eval, Some(s2.probe_images))?)?;

    let mut perception = Perception::<f32>::new(cfg.perception.clone(), sub_seed(cfg.seed, "perception", 0))?;
    let mut adam = Adam::new(
        AdamConfig {
            lr: s2.schedule.lr,
            ..Default::default()
        },
        perception.params(),
    );
    let config_value = serde_json::json!({ "train": cfg, "ablation": ablation });
    let save = |perception: &Perception<f32>, epoch: usize, path: &Path| -> Result<()> {
        check_digest("imitator weights", &imitator_digest, imitator.digest())?;
        check_digest("id extractor weights", &extractor_digest, id_net.digest())?;
        Checkpoint::from_store("perception", epoch, config_value.clone(), perception.params())
            .with_meta("digest", perception.params().digest())
            .with_meta("imitator_digest", &imitator_digest)
            .with_meta("extractor_digest", &extractor_digest)
            .save(path)
    };

    let mut checkpoints = Vec::new();
    let mut probes = vec![probe(0, &perception, &imitator, &probe_target, &probe_source)?];
    let p0 = dir.join("perception_e0000.ckpt");
    save(&perception, 0, &p0)?;
    checkpoints.push((0, p0));

    let mut csv = String::from("step,epoch,restored,param,differ,domain,contrastive,l3d,lid,total,lr\n");
    let seed = sub_seed(cfg.seed, "stage2", 0);
    let mut step = 0usize;
    let mut first_step = None;
    let mut epoch1_total = 0.0;
    let mut last_good = 0usize;
    let mut lr = s2.schedule.lr;
    for epoch in 1..=s2.epochs {
        lr = s2.schedule.lr_at(epoch);
        adam.set_lr(lr);
        for _ in 0..s2.steps_per_epoch {
            step += 1;
            let mut rng = rng_for(seed, "batch", step as u64);
            let t_idx = sample(&mut rng, targets.len(), s2.target_batch).into_vec();
            let ids = sample(&mut rng, sources.identities.len(), s2.source_identities).into_vec();
            let mut s_idx = Vec::with_capacity(2 * ids.len());
            for &i in &ids {
                let views = &sources.identities[i];
                let pick = sample(&mut rng, views.len(), 2);
                s_idx.push(views[pick.index(0)]);
                s_idx.push(views[pick.index(1)]);
            }

            let mut g = Graph::new();
            let pv = perception.params().bind(&mut g)?;
            let iv = imitator.params().bind(&mut g)?;
            let dv = id_net.params().bind(&mut g)?;
            let tv = g.input(targets.batch(&t_idx)?)?;
            let sv = g.input(sources.images.batch(&s_idx)?)?;
            let nets = Bound {
                perception: &perception,
                perception_vars: &pv,
                imitator: &imitator,
                imitator_vars: &iv,
                id_net: &id_net,
                id_vars: &dv,
            };
            let abort = |e: Error| {
                Error::Training(format!("stage 2 aborted at step {step} ({e}); last good checkpoint is epoch {last_good}"))
            };
            let terms = full_objective(&mut g, &nets, tv, sv, s2.source_identities, &objective).map_err(abort)?;
            let report = terms.report(&g);
            if !report.total.is_finite() {
                return Err(abort(Error::Training("non-finite loss".into())));
            }
            let grads = g.backward(terms.total).map_err(abort)?;
            ensure_untouched(&g, &grads, &iv, "imitator")?;
            ensure_untouched(&g, &grads, &dv, "id extractor")?;
            let gs: Vec<Tensor<f32>> = pv.iter().map(|&v| grads.get(v)).collect();
            adam.step(perception.params_mut(), &gs).map_err(abort)?;

            csv_row(&mut csv, step, epoch, &report, lr);
            if epoch == 1 {
                epoch1_total += report.total / s2.steps_per_epoch as f64;
            }
            if first_step.is_none() {
                first_step = Some(report);
            }
        }
        log::info!("stage 2 [{tag}] epoch {epoch} done ({step} steps, lr {lr:.2e})");
        if epoch % s2.checkpoint_every == 0 || epoch == s2.epochs {
            let p = dir.join(format!("perception_e{epoch:04}.ckpt"));
            save(&perception, epoch, &p)?;
            checkpoints.push((epoch, p));
            probes.push(probe(epoch, &perception, &imitator, &probe_target, &probe_source)?);
            last_good = epoch;
            fs::write(dir.join(STAGE2_LOSS_CSV), &csv)?;
        }
    }
    fs::write(dir.join(STAGE2_LOSS_CSV), &csv)?;
    let final_path = dir.join(PERCEPTION_CKPT);
    save(&perception, s2.epochs, &final_path)?;

    let report = Stage2Report {
        tag,
        epochs: s2.epochs,
        steps: step,
        first_step: first_step.ok_or_else(|| Error::Invalid("stage 2 ran zero steps".into()))?,
        epoch1_total,
        probes,
        imitator_digest,
        extractor_digest,
        perception_digest: perception.params().digest(),
        final_lr: lr,
    };
    write_json(&dir.join(STAGE2_REPORT), &report)?;
    Ok(Stage2Outcome {
        dir,
        checkpoint: final_path,
        checkpoints,
        report,
    })
}

/// Stage 2 with one loss term disabled; `ablation` names the term.
pub fn ablation_run(
    cfg: &TrainConfig,
    corpus: &Path,
    out: &Path,
    imitator_ckpt: &Path,
    extractor_ckpt: &Path,
    ablation: &str,
) -> Result<Stage2Outcome> {
    let a: Ablation = ablation.parse()?;
    run_stage2(cfg, corpus, out, imitator_ckpt, extractor_ckpt, Some(a))
}

/// Loads a perception checkpoint; returns the network and the config it was trained with.
pub fn load_perception(path: &Path) -> Result<(Perception<f32>, BTreeMap<String, serde_json::Value>)> {
    let ck = Checkpoint::load(path).map_err(|e| match e {
        Error::MissingArtifact(m) => Error::MissingArtifact(format!("{m}; run `avatarfit train` first")),
        other => other,
    })?;
    ck.expect_kind("perception")?;
    let config: PerceptionConfig = serde_json::from_value(ck.config["train"]["perception"].clone())
        .map_err(|e| Error::Checkpoint(format!("{}: bad perception config ({e})", path.display())))?;
    let mut net = Perception::new(config, 0)?;
    ck.load_into(net.params_mut())?;
    if let Some(d) = ck.meta_str("digest") {
        check_digest("perception weights", d, net.params().digest())?;
    }
    Ok((net, ck.meta))
}


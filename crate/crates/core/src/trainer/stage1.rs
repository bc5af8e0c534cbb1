//! Stage 1 (imitator) and the identity extractor: both are trained once and frozen.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{write_json, Checkpoint, TrainConfig, EXTRACTOR_CKPT, IMITATOR_CKPT, IMITATOR_LOSS_CSV, IMITATOR_PARTIAL};
use crate::aux_extractors::{train_id_extractor, IdEmbedNet, IdNetConfig, IdTrainReport, LabeledImages};
use crate::data::ImageStore;
use crate::error::{Error, Result};
use crate::imitator::{mean_mse, train_epoch, EpochLoss, ImitatorConfig, ImitatorNet, LabeledSet};
use crate::procgen::{Manifest, ParamVector, Split};
use crate::seeds::sub_seed;
use crate::tensor::{Adam, AdamConfig};

#[derive(Clone, Debug, Default)]
pub struct Stage1Options {
    /// Continue from `imitator.partial.ckpt` when present.
    pub resume: bool,
    /// Stop (leaving the resumable checkpoint) after this epoch.
    pub stop_after: Option<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Stage1Outcome {
    pub checkpoint: PathBuf,
    /// Empty when the run stopped early.
    pub digest: String,
    pub completed_epochs: usize,
    pub baseline_heldout: f64,
    pub log: Vec<EpochLoss>,
}

fn stage1_config(cfg: &TrainConfig) -> serde_json::Value {
    serde_json::json!({
        "seed": cfg.seed,
        "imitator": cfg.imitator,
        "imitator_train": cfg.imitator_train,
    })
}

pub(crate) fn target_set(corpus: &Path, m: &Manifest, split: Split) -> Result<LabeledSet> {
    let entries: Vec<_> = m.targets(split).collect();
    if entries.is_empty() {
        return Err(Error::Invalid(format!("corpus has no target images in the {split:?} split")));
    }
    let paths: Vec<&str> = entries.iter().map(|e| e.path.as_str()).collect();
    let params: Vec<ParamVector> = entries.iter().map(|e| e.params.clone()).collect();
    LabeledSet::new(ImageStore::load(corpus, &paths, m.image_size)?, &params)
}

fn write_loss_csv(path: &Path, log: &[EpochLoss]) -> Result<()> {
    let mut s = String::from("epoch,train_mse,heldout_mse\n");
    for r in log.iter().filter(|r| r.epoch > 0) {
        writeln!(s, "{},{:.8},{:.8}", r.epoch, r.train_mse, r.heldout_mse).expect("string write");
    }
    fs::write(path, s)?;
    Ok(())
}

/// Trains the imitator on the labelled target corpus, then freezes it and
/// writes `imitator.ckpt` with its weight digest.
pub fn run_stage1(cfg: &TrainConfig, corpus: &Path, out: &Path, opts: &Stage1Options) -> Result<Stage1Outcome> {
    cfg.validate()?;
    let manifest = Manifest::load(corpus)?;
    cfg.check_manifest(&manifest)?;
    fs::create_dir_all(out)?;
    let train = target_set(corpus, &manifest, Split::Train)?;
    let heldout = target_set(corpus, &manifest, Split::Test)?;
    let tc = &cfg.imitator_train;
    let seed = sub_seed(cfg.seed, "stage1", 0);
    let config_value = stage1_config(cfg);

    let mut net = ImitatorNet::<f32>::new(cfg.imitator.clone(), sub_seed(cfg.seed, "imitator", 0))?;
    let partial = out.join(IMITATOR_PARTIAL);
    let (mut adam, mut log) = if opts.resume && partial.exists() {
        let ck = Checkpoint::load(&partial)?;
        ck.expect_kind("imitator")?;
        if ck.config != config_value {
            return Err(Error::Invalid(format!(
                "{} was written with a different configuration; refusing to resume",
                partial.display()
            )));
        }
        ck.load_into(net.params_mut())?;
        let adam = ck
            .adam
            .as_ref()
            .ok_or_else(|| Error::Checkpoint("resumable checkpoint lacks optimizer state".into()))?
            .restore();
        let log: Vec<EpochLoss> = serde_json::from_value(ck.meta.get("log").cloned().unwrap_or_default())?;
        log::info!("resuming stage 1 after epoch {}", ck.epoch);
        (adam, log)
    } else {
        let adam = Adam::new(
            AdamConfig {
                lr: tc.lr,
                ..Default::default()
            },
            net.params(),
        );
        let base = EpochLoss {
            epoch: 0,
            train_mse: mean_mse(&net, &train, tc.batch_size)?,
            heldout_mse: mean_mse(&net, &heldout, tc.batch_size)?,
        };
        (adam, vec![base])
    };
    let start = log.last().map_or(0, |r| r.epoch);

    for epoch in start + 1..=tc.epochs {
        let last_good = epoch - 1;
        let train_mse = train_epoch(&mut net, &mut adam, &train, tc.batch_size, seed, epoch).map_err(|e| {
            Error::Training(format!("stage 1 failed in epoch {epoch} ({e}); last good checkpoint is epoch {last_good}"))
        })?;
        let row = EpochLoss {
            epoch,
            train_mse,
            heldout_mse: mean_mse(&net, &heldout, tc.batch_size)?,
        };
        log::info!("imitator epoch {epoch}: train {:.5} heldout {:.5}", row.train_mse, row.heldout_mse);
        log.push(row);
        Checkpoint::from_store("imitator", epoch, config_value.clone(), net.params())
            .with_adam(&adam)
            .with_meta("log", &log)
            .save(&partial)?;
        write_loss_csv(&out.join(IMITATOR_LOSS_CSV), &log)?;
        if opts.stop_after == Some(epoch) && epoch < tc.epochs {
            return Ok(Stage1Outcome {
                checkpoint: partial,
                digest: String::new(),
                completed_epochs: epoch,
                baseline_heldout: log[0].heldout_mse,
                log,
            });
        }
    }

    net.freeze();
    let digest = net.digest();
    let path = out.join(IMITATOR_CKPT);
    Checkpoint::from_store("imitator", tc.epochs, config_value, net.params())
        .with_meta("digest", &digest)
        .with_meta("log", &log)
        .save(&path)?;
    write_loss_csv(&out.join(IMITATOR_LOSS_CSV), &log)?;
    if partial.exists() {
        fs::remove_file(&partial)?;
    }
    let outcome = Stage1Outcome {
        checkpoint: path,
        digest,
        completed_epochs: tc.epochs,
        baseline_heldout: log[0].heldout_mse,
        log,
    };
    write_json(&out.join("imitator_report.json"), &outcome)?;
    Ok(outcome)
}

fn verify_digest(what: &str, ck: &Checkpoint, found: String) -> Result<String> {
    let expected = ck
        .meta_str("digest")
        .ok_or_else(|| Error::Checkpoint(format!("{what} checkpoint carries no weight digest")))?;
    if expected != found {
        return Err(Error::Digest {
            what: format!("{what} weights"),
            expected: expected.to_string(),
            found,
        });
    }
    Ok(found)
}

/// Loads a final, frozen imitator and checks its weight digest.
pub fn load_imitator(path: &Path) -> Result<ImitatorNet<f32>> {
    let ck = Checkpoint::load(path).map_err(|e| match e {
        Error::MissingArtifact(m) => Error::MissingArtifact(format!("{m}; run `avatarfit train-imitator` first")),
        other => other,
    })?;
    ck.expect_kind("imitator")?;
    if !ck.frozen {
        return Err(Error::Invalid(format!("{} is not a finished imitator checkpoint", path.display())));
    }
    let config: ImitatorConfig = serde_json::from_value(ck.config["imitator"].clone())
        .map_err(|e| Error::Checkpoint(format!("{}: bad imitator config ({e})", path.display())))?;
    let mut net = ImitatorNet::new(config, 0)?;
    ck.load_into(net.params_mut())?;
    net.freeze();
    verify_digest("imitator", &ck, net.digest())?;
    Ok(net)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExtractorOutcome {
    pub checkpoint: PathBuf,
    pub digest: String,
    pub report: IdTrainReport,
}

/// Labelled extractor-split images; the last quarter of each identity's views is held out.
pub(crate) fn extractor_sets(corpus: &Path, m: &Manifest) -> Result<(LabeledImages, LabeledImages)> {
    let ids = m.identities(Split::Extractor);
    if ids.len() < 2 {
        return Err(Error::Invalid("corpus has fewer than two extractor identities".into()));
    }
    let (mut tp, mut tl, mut hp, mut hl) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (label, views) in ids.values().enumerate() {
        let held = (views.len() / 4).max(1);
        for (i, e) in views.iter().enumerate() {
            if i + held >= views.len() {
                hp.push(e.path.as_str());
                hl.push(label);
            } else {
                tp.push(e.path.as_str());
                tl.push(label);
            }
        }
    }
    Ok((
        LabeledImages {
            images: ImageStore::load(corpus, &tp, m.image_size)?,
            labels: tl,
        },
        LabeledImages {
            images: ImageStore::load(corpus, &hp, m.image_size)?,
            labels: hl,
        },
    ))
}

/// Trains and freezes the identity extractor on the extractor split.
pub fn run_extractor(cfg: &TrainConfig, corpus: &Path, out: &Path) -> Result<ExtractorOutcome> {
    cfg.validate()?;
    let manifest = Manifest::load(corpus)?;
    cfg.check_manifest(&manifest)?;
    let (train, heldout) = extractor_sets(corpus, &manifest)?;
    let (net, report) = train_id_extractor(cfg.id_net.clone(), &train, &heldout, &cfg.id_train, sub_seed(cfg.seed, "id-extractor", 0))?;
    let digest = net.digest();
    let path = out.join(EXTRACTOR_CKPT);
    let config = serde_json::json!({ "seed": cfg.seed, "id_net": cfg.id_net, "id_train": cfg.id_train });
    Checkpoint::from_store("id-extractor", report.epochs, config, net.params())
        .with_meta("digest", &digest)
        .with_meta("report", &report)
        .save(&path)?;
    let outcome = ExtractorOutcome {
        checkpoint: path,
        digest,
        report,
    };
    write_json(&out.join("id_extractor_report.json"), &outcome)?;
    Ok(outcome)
}

pub fn load_id_extractor(path: &Path) -> Result<IdEmbedNet<f32>> {
    let ck = Checkpoint::load(path).map_err(|e| match e {
        Error::MissingArtifact(m) => Error::MissingArtifact(format!("{m}; run `avatarfit train-extractor` first")),
        other => other,
    })?;
    ck.expect_kind("id-extractor")?;
    let config: IdNetConfig = serde_json::from_value(ck.config["id_net"].clone())
        .map_err(|e| Error::Checkpoint(format!("{}: bad id extractor config ({e})", path.display())))?;
    let mut net = IdEmbedNet::new(config, 0)?;
    ck.load_into(net.params_mut())?;
    net.freeze();
    verify_digest("id extractor", &ck, net.digest())?;
    Ok(net)
}

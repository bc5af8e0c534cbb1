use std::fs;

use avatarfit::imitator::{ImitatorConfig, ImitatorNet};
use avatarfit::tensor::{Adam, AdamConfig};
use avatarfit::trainer::{
    ablation_run, load_imitator, load_perception, run_extractor, run_stage1, run_stage2, Ablation, Checkpoint, Schedule,
    Stage1Options, TrainConfig, IMITATOR_CKPT, IMITATOR_LOSS_CSV, IMITATOR_PARTIAL, STAGE2_LOSS_CSV,
};
use avatarfit::Error;

mod common;
use common::{tiny_corpus, tiny_train_config};

#[test]
fn schedule_halves_at_milestones() {
    let s = Schedule::default();
    assert_eq!(s.lr_at(1), 3e-4);
    assert_eq!(s.lr_at(50), 3e-4);
    assert!((s.lr_at(51) - 1.5e-4).abs() < 1e-15);
    assert!((s.lr_at(100) - 1.5e-4).abs() < 1e-15);
    assert!((s.lr_at(101) - 7.5e-5).abs() < 1e-15);
    assert!(Schedule {
        milestones: vec![100, 50],
        ..Schedule::default()
    }
    .validate()
    .is_err());
}

#[test]
fn default_config_round_trips_and_validates() {
    let cfg = TrainConfig::default();
    cfg.validate().unwrap();
    assert_eq!(cfg.imitator_train.batch_size, 128);
    assert_eq!(cfg.stage2.target_batch, 32);
    assert_eq!(cfg.stage2.source_identities, 8);
    assert_eq!(cfg.stage2.epochs, 60);
    let text = serde_json::to_string(&cfg).unwrap();
    let back: TrainConfig = serde_json::from_str(&text).unwrap();
    assert_eq!(back, cfg);
    let partial: TrainConfig = serde_json::from_str(r#"{"seed": 9}"#).unwrap();
    assert_eq!(partial.seed, 9);

    let mut bad = cfg.clone();
    bad.perception.param_dim = 16;
    assert!(matches!(bad.validate(), Err(Error::Invalid(_))));
    let d = tempfile::tempdir().unwrap();
    assert!(matches!(TrainConfig::load(&d.path().join("nope.json")), Err(Error::MissingArtifact(_))));
    fs::write(d.path().join("bad.json"), "{ not json").unwrap();
    assert!(matches!(TrainConfig::load(&d.path().join("bad.json")), Err(Error::Invalid(_))));
}

#[test]
fn checkpoint_round_trip_is_byte_identical() {
    let net = ImitatorNet::<f32>::new(ImitatorConfig::default(), 2).unwrap();
    let mut adam = Adam::new(AdamConfig::default(), net.params());
    let grads: Vec<_> = net.params().tensors().iter().map(|t| t.clone()).collect();
    let mut store = net.params().clone();
    adam.step(&mut store, &grads).unwrap();
    let ck = Checkpoint::from_store("imitator", 4, serde_json::json!({"a": 1}), &store)
        .with_adam(&adam)
        .with_meta("note", "x");
    let bytes = ck.to_bytes().unwrap();
    let back = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(back.to_bytes().unwrap(), bytes);
    assert_eq!(back.epoch, 4);
    assert_eq!(back.meta_str("note"), Some("x"));

    let d = tempfile::tempdir().unwrap();
    let p = d.path().join("a.ckpt");
    ck.save(&p).unwrap();
    let loaded = Checkpoint::load(&p).unwrap();
    let p2 = d.path().join("b.ckpt");
    loaded.save(&p2).unwrap();
    assert_eq!(fs::read(&p).unwrap(), fs::read(&p2).unwrap());

    let mut fresh = ImitatorNet::<f32>::new(ImitatorConfig::default(), 9).unwrap();
    loaded.load_into(fresh.params_mut()).unwrap();
    assert_eq!(fresh.params().tensors(), store.tensors());
    let small = ImitatorNet::<f32>::new(
        ImitatorConfig {
            base_channels: 64,
            ..ImitatorConfig::default()
        },
        1,
    )
    .unwrap();
    assert!(loaded.load_into(&mut small.params().clone()).is_err());
    assert!(loaded.expect_kind("perception").is_err());
}

#[test]
fn tampered_checkpoint_is_rejected() {
    let net = ImitatorNet::<f32>::new(ImitatorConfig::default(), 2).unwrap();
    let mut bytes = Checkpoint::from_store("imitator", 0, serde_json::Value::Null, net.params())
        .to_bytes()
        .unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x01;
    assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Digest { .. })));
    assert!(Checkpoint::from_bytes(&bytes[..10]).is_err());
    let mut wrong_magic = bytes.clone();
    wrong_magic[0] = b'X';
    assert!(Checkpoint::from_bytes(&wrong_magic).is_err());
    let d = tempfile::tempdir().unwrap();
    assert!(matches!(Checkpoint::load(&d.path().join("missing.ckpt")), Err(Error::MissingArtifact(_))));
}

#[test]
fn ablation_names() {
    assert_eq!("domain".parse::<Ablation>().unwrap(), Ablation::Domain);
    assert_eq!("contrastive".parse::<Ablation>().unwrap(), Ablation::Contrastive);
    assert_eq!("consistency".parse::<Ablation>().unwrap(), Ablation::Consistency);
    assert!(matches!("restored".parse::<Ablation>(), Err(Error::Invalid(_))));
    assert!("bogus".parse::<Ablation>().is_err());
    assert_eq!(Ablation::tag(None), "full");
    assert_eq!(Ablation::tag(Some(Ablation::Contrastive)), "no-contrastive");
}

#[test]
fn stage1_resume_replays_the_uninterrupted_run() {
    let corpus = tempfile::tempdir().unwrap();
    tiny_corpus(corpus.path());
    let cfg = tiny_train_config();

    let straight = tempfile::tempdir().unwrap();
    let a = run_stage1(&cfg, corpus.path(), straight.path(), &Stage1Options::default()).unwrap();
    assert_eq!(a.completed_epochs, 3);
    assert!(!straight.path().join(IMITATOR_PARTIAL).exists());
    let csv = fs::read_to_string(straight.path().join(IMITATOR_LOSS_CSV)).unwrap();
    assert_eq!(csv.lines().count(), 1 + 3);
    assert_eq!(csv.lines().next().unwrap(), "epoch,train_mse,heldout_mse");

    let split = tempfile::tempdir().unwrap();
    let stop = Stage1Options {
        resume: false,
        stop_after: Some(1),
    };
    let part = run_stage1(&cfg, corpus.path(), split.path(), &stop).unwrap();
    assert_eq!(part.completed_epochs, 1);
    assert!(part.digest.is_empty());
    assert!(split.path().join(IMITATOR_PARTIAL).exists());
    let resume = Stage1Options {
        resume: true,
        stop_after: None,
    };
    let b = run_stage1(&cfg, corpus.path(), split.path(), &resume).unwrap();
    assert_eq!(a.digest, b.digest);
    assert_eq!(a.log, b.log);
    assert_eq!(
        fs::read(straight.path().join(IMITATOR_CKPT)).unwrap(),
        fs::read(split.path().join(IMITATOR_CKPT)).unwrap()
    );

    // a tampered partial checkpoint refuses to resume
    let tampered = tempfile::tempdir().unwrap();
    run_stage1(&cfg, corpus.path(), tampered.path(), &stop).unwrap();
    let p = tampered.path().join(IMITATOR_PARTIAL);
    let mut bytes = fs::read(&p).unwrap();
    let n = bytes.len();
    bytes[n - 40] ^= 0xff;
    fs::write(&p, bytes).unwrap();
    assert!(matches!(run_stage1(&cfg, corpus.path(), tampered.path(), &resume), Err(Error::Digest { .. })));

    // a different configuration refuses to resume
    let other = tempfile::tempdir().unwrap();
    run_stage1(&cfg, corpus.path(), other.path(), &stop).unwrap();
    let mut changed = cfg.clone();
    changed.imitator_train.lr = 5e-4;
    assert!(matches!(run_stage1(&changed, corpus.path(), other.path(), &resume), Err(Error::Invalid(_))));

    let loaded = load_imitator(&straight.path().join(IMITATOR_CKPT)).unwrap();
    assert!(loaded.is_frozen());
    assert_eq!(loaded.digest(), a.digest);
}

#[test]
fn imitator_checkpoint_guards() {
    let d = tempfile::tempdir().unwrap();
    let err = load_imitator(&d.path().join(IMITATOR_CKPT)).unwrap_err();
    assert!(matches!(err, Error::MissingArtifact(_)));
    assert!(err.to_string().contains("train-imitator"));

    let net = ImitatorNet::<f32>::new(ImitatorConfig::default(), 1).unwrap();
    let unfrozen = d.path().join("unfrozen.ckpt");
    Checkpoint::from_store("imitator", 1, serde_json::Value::Null, net.params())
        .with_meta("digest", net.digest())
        .save(&unfrozen)
        .unwrap();
    assert!(load_imitator(&unfrozen).is_err());

    let mut frozen = net.clone();
    frozen.freeze();
    let wrong = d.path().join("wrong.ckpt");
    let config = serde_json::json!({ "imitator": ImitatorConfig::default() });
    Checkpoint::from_store("imitator", 1, config, frozen.params())
        .with_meta("digest", "00")
        .save(&wrong)
        .unwrap();
    let e = load_imitator(&wrong).unwrap_err();
    assert!(matches!(e, Error::Digest { .. }), "{e:?}");
}

#[test]
fn stage2_runs_deterministically_and_keeps_frozen_nets_intact() {
    let corpus = tempfile::tempdir().unwrap();
    tiny_corpus(corpus.path());
    let cfg = tiny_train_config();
    let work = tempfile::tempdir().unwrap();
    let s1 = run_stage1(&cfg, corpus.path(), work.path(), &Stage1Options::default()).unwrap();
    let ex = run_extractor(&cfg, corpus.path(), work.path()).unwrap();

    let out_a = tempfile::tempdir().unwrap();
    let a = run_stage2(&cfg, corpus.path(), out_a.path(), &s1.checkpoint, &ex.checkpoint, None).unwrap();
    let out_b = tempfile::tempdir().unwrap();
    let b = run_stage2(&cfg, corpus.path(), out_b.path(), &s1.checkpoint, &ex.checkpoint, None).unwrap();
    assert_eq!(a.report.epoch1_total, b.report.epoch1_total);
    assert_eq!(a.report.perception_digest, b.report.perception_digest);
    assert_eq!(a.report.imitator_digest, s1.digest);
    assert_eq!(a.report.extractor_digest, ex.digest);
    assert_eq!(load_imitator(&s1.checkpoint).unwrap().digest(), s1.digest);

    assert_eq!(a.report.steps, 4);
    assert_eq!(a.checkpoints.iter().map(|c| c.0).collect::<Vec<_>>(), vec![0, 1, 2]);
    assert_eq!(a.report.probes.len(), 3);
    let csv = fs::read_to_string(a.dir.join(STAGE2_LOSS_CSV)).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "step,epoch,restored,param,differ,domain,contrastive,l3d,lid,total,lr");
    let w = cfg.objective.weights;
    let rows: Vec<Vec<f64>> = lines.map(|l| l.split(',').map(|v| v.parse().unwrap()).collect()).collect();
    assert_eq!(rows.len(), 4);
    for r in &rows {
        assert_eq!(r.len(), 11);
        let total = w.combine(r[2], r[5], r[6], r[7] + r[8]);
        assert!((total - r[9]).abs() < 1e-6, "{total} vs {}", r[9]);
    }
    assert!((a.report.first_step.total - a.report.first_step.weighted_sum()).abs() < 1e-6);

    let (p, meta) = load_perception(&a.checkpoint).unwrap();
    assert_eq!(p.params().digest(), a.report.perception_digest);
    assert_eq!(meta["imitator_digest"], serde_json::json!(s1.digest));

    let ab = ablation_run(&cfg, corpus.path(), out_a.path(), &s1.checkpoint, &ex.checkpoint, "contrastive").unwrap();
    assert!(ab.dir.ends_with("no-contrastive"));
    assert_eq!(ab.report.first_step.weights.contrastive, 0.0);
    assert!(ablation_run(&cfg, corpus.path(), out_a.path(), &s1.checkpoint, &ex.checkpoint, "restored").is_err());

    let missing = run_stage2(&cfg, corpus.path(), out_a.path(), &work.path().join("none.ckpt"), &ex.checkpoint, None);
    match missing {
        Err(Error::MissingArtifact(m)) => assert!(m.contains("train-imitator")),
        other => panic!("expected a missing-artifact error, got {other:?}"),
    }
}

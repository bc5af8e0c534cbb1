use std::fs;
use std::path::Path;
use std::process::{Command, Output};

mod common;
use common::{tiny_corpus_config, tiny_train_config};

fn avatarfit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_avatarfit"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn avatarfit")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_configs(dir: &Path) -> (String, String) {
    let corpus = dir.join("corpus.json");
    let train = dir.join("train.json");
    fs::write(&corpus, serde_json::to_string(&tiny_corpus_config()).unwrap()).unwrap();
    fs::write(&train, serde_json::to_string(&tiny_train_config()).unwrap()).unwrap();
    (s(&corpus).to_owned(), s(&train).to_owned())
}

#[test]
fn help_and_version_exit_zero() {
    assert_eq!(code(&avatarfit(&["--help"])), 0);
    assert_eq!(code(&avatarfit(&["--version"])), 0);
    assert_eq!(code(&avatarfit(&["train", "--help"])), 0);
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&avatarfit(&[])), 1);
    assert_eq!(code(&avatarfit(&["no-such-command"])), 1);
    assert_eq!(code(&avatarfit(&["gen-data"])), 1);
    assert_eq!(code(&avatarfit(&["gen-data", "--out", "x", "--preset", "huge"])), 1);
}

#[test]
fn train_without_imitator_names_stage_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = avatarfit(&["train", "--corpus", s(&dir.path().join("c")), "--out", s(&dir.path().join("run"))]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("train-imitator"), "{}", stderr(&out));
}

#[test]
fn bad_config_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, r#"{"image_size": 0}"#).unwrap();
    let out = avatarfit(&["gen-data", "--out", s(&dir.path().join("c")), "--config", s(&cfg)]);
    assert_eq!(code(&out), 1, "{}", stderr(&out));
    let missing = avatarfit(&["gen-data", "--out", s(&dir.path().join("c")), "--config", s(&dir.path().join("nope.json"))]);
    assert_eq!(code(&missing), 1);
}

#[test]
fn io_failure_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    fs::write(&blocker, b"x").unwrap();
    let (corpus_cfg, _) = write_configs(dir.path());
    let out = avatarfit(&["gen-data", "--out", s(&blocker.join("sub")), "--config", &corpus_cfg]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
}

#[test]
fn gen_data_is_deterministic_and_recorded() {
    let dir = tempfile::tempdir().unwrap();
    let (corpus_cfg, _) = write_configs(dir.path());
    let a = avatarfit(&["gen-data", "--out", s(&dir.path().join("a")), "--config", &corpus_cfg, "--seed", "9"]);
    let b = avatarfit(&["gen-data", "--out", s(&dir.path().join("b")), "--config", &corpus_cfg, "--seed", "9"]);
    assert_eq!(code(&a), 0, "{}", stderr(&a));
    assert_eq!(code(&b), 0);
    assert_eq!(a.stdout.split(|&c| c == b' ').last(), b.stdout.split(|&c| c == b' ').last());
    let ra: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join("a/run.gen-data.json")).unwrap()).unwrap();
    let rb: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join("b/run.gen-data.json")).unwrap()).unwrap();
    assert_eq!(ra["digests"]["corpus"], rb["digests"]["corpus"]);
    assert_eq!(ra["seed"], 9);
    assert_eq!(ra["config"]["image_size"], 16);
}

#[test]
fn tiny_pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let (corpus_cfg, train_cfg) = write_configs(root);
    let corpus = root.join("corpus");
    let run = root.join("run");
    let ok = |args: &[&str]| {
        let o = avatarfit(args);
        assert_eq!(code(&o), 0, "{args:?}: {}", stderr(&o));
        o
    };
    ok(&["gen-data", "--out", s(&corpus), "--config", &corpus_cfg, "--seed", "3"]);
    let common = ["--corpus", s(&corpus), "--out", s(&run), "--config", &train_cfg];
    ok(&[&["train-imitator"][..], &common].concat());
    ok(&[&["train-extractor"][..], &common].concat());
    ok(&[&["train"][..], &common].concat());
    ok(&[&["train"][..], &common, &["--ablate", "consistency"]].concat());

    let bad = avatarfit(&[&["train"][..], &common, &["--ablate", "restored"]].concat());
    assert_eq!(code(&bad), 1);

    let full = run.join("full");
    let ckpt = full.join("perception.ckpt");
    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(full.join("run.train.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "train");
    assert_eq!(manifest["seed"], 5);
    assert!(manifest["digests"]["perception"].as_str().unwrap().len() == 64);

    let eval_dir = root.join("eval");
    ok(&["eval", "--corpus", s(&corpus), "--checkpoint", s(&ckpt), "--out", s(&eval_dir), "--probe-images", "6"]);
    let report: serde_json::Value = serde_json::from_slice(&fs::read(eval_dir.join("eval_report.json")).unwrap()).unwrap();
    let acc = report["accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));
    assert_eq!(report["per_region"].as_array().unwrap().len(), 3);
    let trend: Vec<usize> = report["mmd_trend"].as_array().unwrap().iter().map(|p| p[0].as_u64().unwrap() as usize).collect();
    assert_eq!(trend, vec![0, 1, 2]);
    assert!(report["throughput"]["images_per_sec"].as_f64().unwrap() > 0.0);

    let emb = root.join("emb");
    ok(&["export-embeddings", "--corpus", s(&corpus), "--checkpoint", s(&full), "--out", s(&emb), "--images", "5"]);
    let csv = fs::read_to_string(emb.join("embeddings_e0002.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 10);
    assert!(csv.starts_with("domain,p0,"));

    let image = fs::read_dir(corpus.join("source")).unwrap().next().unwrap().unwrap().path();
    let image = if image.is_dir() { fs::read_dir(&image).unwrap().next().unwrap().unwrap().path() } else { image };
    let rec = root.join("rec");
    ok(&[
        "reconstruct",
        "--image",
        s(&image),
        "--checkpoint",
        s(&ckpt),
        "--imitator",
        s(&run.join("imitator.ckpt")),
        "--out",
        s(&rec),
    ]);
    let params: Vec<f64> = serde_json::from_slice(&fs::read(rec.join("params.json")).unwrap()).unwrap();
    assert_eq!(params.len(), 32);
    assert!(params.iter().all(|p| p.abs() <= 2.5));
    assert!(rec.join("engine.ppm").exists() && rec.join("imitated.ppm").exists());

    let bench = root.join("bench");
    ok(&["bench", "--checkpoint", s(&ckpt), "--out", s(&bench), "--images", "8", "--batch", "4", "--runs", "1"]);
    assert!(bench.join("bench.json").exists());

    let mut bytes = fs::read(&ckpt).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 1;
    let tampered = root.join("tampered.ckpt");
    fs::write(&tampered, bytes).unwrap();
    let o = avatarfit(&["bench", "--checkpoint", s(&tampered), "--out", s(&bench)]);
    assert_eq!(code(&o), 1, "{}", stderr(&o));
}

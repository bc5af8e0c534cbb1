//! Command-line front end. `run` returns the process exit code.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::evalkit::{evaluate, export_embeddings, reconstruct, throughput_bench, BenchResult, EvalConfig};
use crate::procgen::{build_corpus, corpus_digest, read_ppm, render_engine, sample_params, write_ppm, CorpusConfig, Image, Manifest, Split};
use crate::trainer::{
    load_imitator, load_perception, run_extractor, run_stage1, run_stage2, source_images, target_images, Ablation,
    Stage1Options, TrainConfig, EXTRACTOR_CKPT, IMITATOR_CKPT, PERCEPTION_CKPT,
};

#[derive(Parser, Debug)]
#[command(name = "avatarfit", version, about = "Regress avatar renderer parameters from images")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    Desk,
    Smoke,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// JSON config; keys not given keep their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Default config when --config is absent.
    #[arg(long, value_enum, default_value = "desk")]
    pub preset: Preset,
    /// Overrides the root seed of the config.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Render the target and source corpora.
    GenData(Common),
    /// Stage 1: train and freeze the imitator.
    TrainImitator {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: PathBuf,
        /// Continue from the partial checkpoint in --out.
        #[arg(long)]
        resume: bool,
    },
    /// Train and freeze the identity extractor.
    TrainExtractor {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: PathBuf,
    },
    /// Stage 2: train the perception stack against the frozen networks.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: PathBuf,
        /// Defaults to <out>/imitator.ckpt.
        #[arg(long)]
        imitator: Option<PathBuf>,
        /// Defaults to <out>/id_extractor.ckpt.
        #[arg(long)]
        extractor: Option<PathBuf>,
        /// Disable one loss term: domain, contrastive or consistency.
        #[arg(long)]
        ablate: Option<String>,
    },
    /// Verification, masked robustness, domain-gap trend and throughput.
    Eval {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Images per domain for the MMD trend.
        #[arg(long, default_value_t = 256)]
        probe_images: usize,
    },
    /// Regress parameters for one PPM image and render them both ways.
    Reconstruct {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        imitator: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// CSV of regressed parameters for both domains, per checkpoint.
    ExportEmbeddings {
        #[arg(long)]
        corpus: PathBuf,
        /// A checkpoint file or a run directory (all perception_e*.ckpt inside).
        #[arg(long, required = true)]
        checkpoint: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 256)]
        images: usize,
    },
    /// Inference throughput.
    Bench {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Use this corpus' target test images instead of fresh renders.
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long, default_value_t = 256)]
        images: usize,
        #[arg(long, default_value_t = 64)]
        batch: usize,
        #[arg(long, default_value_t = 5)]
        runs: usize,
    },
}

/// Parses `args` (program name first), runs the command, returns 0, 1 or 2.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                1
            } else {
                2
            }
        }
    }
}

fn load_or<T: serde::de::DeserializeOwned>(path: &Option<PathBuf>, default: T) -> Result<T> {
    match path {
        None => Ok(default),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::MissingArtifact(format!("config {} ({e})", p.display())))?;
            serde_json::from_str(&text).map_err(|e| Error::Invalid(format!("config {}: {e}", p.display())))
        }
    }
}

fn train_config(c: &Common) -> Result<TrainConfig> {
    let preset = match c.preset {
        Preset::Desk => TrainConfig::default(),
        Preset::Smoke => TrainConfig::smoke(),
    };
    let mut cfg = load_or(&c.config, preset)?;
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// `run.<command>.json` next to the outputs: config, seeds and digests.
fn write_run_manifest(out: &Path, command: &str, config: &impl Serialize, seed: Option<u64>, digests: Value) -> Result<()> {
    fs::create_dir_all(out)?;
    let record = json!({
        "command": command,
        "version": env!("CARGO_PKG_VERSION"),
        "seed": seed,
        "config": config,
        "digests": digests,
    });
    fs::write(out.join(format!("run.{command}.json")), serde_json::to_string_pretty(&record)?)?;
    Ok(())
}

fn require_corpus(corpus: &Path) -> Result<Manifest> {
    let m = Manifest::load(corpus)?;
    m.validate_files(corpus)?;
    Ok(m)
}

fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData(c) => {
            let preset = match c.preset {
                Preset::Desk => CorpusConfig::default(),
                Preset::Smoke => CorpusConfig::smoke(),
            };
            let cfg: CorpusConfig = load_or(&c.config, preset)?;
            let seed = c.seed.unwrap_or(0);
            let m = build_corpus(&cfg, seed, &c.out)?;
            let digest = corpus_digest(&c.out)?;
            println!("corpus {} ({} target, {} source images), digest {digest}", c.out.display(), m.target.len(), m.source.len());
            write_run_manifest(&c.out, "gen-data", &cfg, Some(seed), json!({ "corpus": digest }))
        }
        Command::TrainImitator { common, corpus, resume } => {
            let cfg = train_config(&common)?;
            require_corpus(&corpus)?;
            let opts = Stage1Options {
                resume,
                stop_after: None,
            };
            let o = run_stage1(&cfg, &corpus, &common.out, &opts)?;
            let last = o.log.last().map_or(f64::NAN, |r| r.heldout_mse);
            println!(
                "imitator: held-out mse {last:.5} (untrained {:.5}), digest {}",
                o.baseline_heldout, o.digest
            );
            write_run_manifest(
                &common.out,
                "train-imitator",
                &cfg,
                Some(cfg.seed),
                json!({ "corpus": corpus_digest(&corpus)?, "imitator": o.digest }),
            )
        }
        Command::TrainExtractor { common, corpus } => {
            let cfg = train_config(&common)?;
            require_corpus(&corpus)?;
            fs::create_dir_all(&common.out)?;
            let o = run_extractor(&cfg, &corpus, &common.out)?;
            println!(
                "id extractor: held-out accuracy {:.4} after {} epochs, digest {}",
                o.report.heldout_accuracy, o.report.epochs, o.digest
            );
            write_run_manifest(
                &common.out,
                "train-extractor",
                &cfg,
                Some(cfg.seed),
                json!({ "corpus": corpus_digest(&corpus)?, "extractor": o.digest }),
            )
        }
        Command::Train {
            common,
            corpus,
            imitator,
            extractor,
            ablate,
        } => {
            let cfg = train_config(&common)?;
            let ablation = ablate.as_deref().map(str::parse::<Ablation>).transpose()?;
            let imitator = imitator.unwrap_or_else(|| common.out.join(IMITATOR_CKPT));
            let extractor = extractor.unwrap_or_else(|| common.out.join(EXTRACTOR_CKPT));
            if !imitator.exists() {
                return Err(Error::MissingArtifact(format!(
                    "imitator checkpoint {} not found; stage 1 must run first (`avatarfit train-imitator`)",
                    imitator.display()
                )));
            }
            if !extractor.exists() {
                return Err(Error::MissingArtifact(format!(
                    "identity extractor checkpoint {} not found; run `avatarfit train-extractor` first",
                    extractor.display()
                )));
            }
            require_corpus(&corpus)?;
            let o = run_stage2(&cfg, &corpus, &common.out, &imitator, &extractor, ablation)?;
            let (first, last) = (o.report.probes.first(), o.report.probes.last());
            if let (Some(a), Some(b)) = (first, last) {
                println!(
                    "stage 2 [{}]: restored mse {:.5} -> {:.5}, parameter mmd² {:.5} -> {:.5}",
                    o.report.tag, a.restored_mse, b.restored_mse, a.param_mmd, b.param_mmd
                );
            }
            println!("checkpoint {}", o.checkpoint.display());
            write_run_manifest(
                &o.dir,
                "train",
                &cfg,
                Some(cfg.seed),
                json!({
                    "corpus": corpus_digest(&corpus)?,
                    "imitator": o.report.imitator_digest,
                    "extractor": o.report.extractor_digest,
                    "perception": o.report.perception_digest,
                    "ablation": ablate,
                }),
            )
        }
        Command::Eval {
            corpus,
            checkpoint,
            out,
            seed,
            probe_images,
        } => {
            let m = require_corpus(&corpus)?;
            let (perception, meta) = load_perception(&checkpoint)?;
            let cfg = EvalConfig {
                seed,
                ..EvalConfig::default()
            };
            let mut report = evaluate(&perception, &corpus, &cfg)?;
            let source = source_images(&corpus, &m, Split::Eval, Some(probe_images))?;
            let target = target_images(&corpus, &m, Split::Test, Some(probe_images))?;
            for (epoch, path) in run_checkpoints(&checkpoint)? {
                let (p, _) = load_perception(&path)?;
                let (_, mmd) = export_embeddings(&p, &source, &target)?;
                report.mmd_trend.push((epoch, mmd));
            }
            let n = source.len().min(64);
            let batch = source.batch(&(0..n).collect::<Vec<_>>())?;
            report.throughput = Some(throughput_bench(&perception, &batch, 64, 5)?);
            fs::create_dir_all(&out)?;
            fs::write(out.join("eval_report.json"), serde_json::to_string_pretty(&report)?)?;
            println!(
                "verification accuracy {:.4} (chance {:.4}), mean masked drop {:.4}",
                report.accuracy, report.chance, report.mean_drop
            );
            for r in &report.per_region {
                println!("  {:<6} {:.4}", r.region.name(), r.accuracy);
            }
            write_run_manifest(
                &out,
                "eval",
                &cfg,
                Some(seed),
                json!({ "corpus": corpus_digest(&corpus)?, "perception": meta.get("digest") }),
            )
        }
        Command::Reconstruct {
            image,
            checkpoint,
            imitator,
            out,
        } => {
            let img = read_ppm(&image)?;
            let (perception, meta) = load_perception(&checkpoint)?;
            let imitator = load_imitator(&imitator)?;
            let r = reconstruct(&perception, &imitator, &img)?;
            fs::create_dir_all(&out)?;
            fs::write(out.join("params.json"), serde_json::to_string_pretty(&r.params.values())?)?;
            write_ppm(&out.join("engine.ppm"), &r.engine)?;
            write_ppm(&out.join("imitated.ppm"), &r.imitated)?;
            println!("wrote params.json, engine.ppm and imitated.ppm to {}", out.display());
            write_run_manifest(
                &out,
                "reconstruct",
                &json!({ "image": image }),
                None,
                json!({ "perception": meta.get("digest"), "imitator": imitator.digest() }),
            )
        }
        Command::ExportEmbeddings {
            corpus,
            checkpoint,
            out,
            images,
        } => {
            let m = require_corpus(&corpus)?;
            let source = source_images(&corpus, &m, Split::Eval, Some(images))?;
            let target = target_images(&corpus, &m, Split::Test, Some(images))?;
            fs::create_dir_all(&out)?;
            let mut trend = Vec::new();
            for path in &checkpoint {
                let list = if path.is_dir() {
                    run_checkpoints(&path.join(PERCEPTION_CKPT))?
                } else {
                    vec![(checkpoint_epoch(path)?, path.clone())]
                };
                for (epoch, ck) in list {
                    let (p, _) = load_perception(&ck)?;
                    let (csv, mmd) = export_embeddings(&p, &source, &target)?;
                    let name = format!("embeddings_e{epoch:04}.csv");
                    fs::write(out.join(&name), csv)?;
                    println!("{name}: parameter mmd² {mmd:.6}");
                    trend.push(json!({ "epoch": epoch, "checkpoint": ck, "mmd": mmd }));
                }
            }
            fs::write(out.join("mmd_trend.json"), serde_json::to_string_pretty(&trend)?)?;
            write_run_manifest(&out, "export-embeddings", &json!({ "images": images }), None, json!({ "corpus": corpus_digest(&corpus)? }))
        }
        Command::Bench {
            checkpoint,
            out,
            corpus,
            images,
            batch,
            runs,
        } => {
            if images == 0 || batch == 0 {
                return Err(Error::Invalid("--images and --batch must be positive".into()));
            }
            let (perception, meta) = load_perception(&checkpoint)?;
            let size = perception.config().image_size;
            let tensor = match &corpus {
                Some(c) => {
                    let m = require_corpus(c)?;
                    let store = target_images(c, &m, Split::Test, Some(images))?;
                    store.batch(&(0..store.len()).collect::<Vec<_>>())?
                }
                None => {
                    let imgs: Vec<Image> = (0..images as u64)
                        .map(|i| render_engine(&sample_params(i), size))
                        .collect::<Result<_>>()?;
                    Image::batch(&imgs.iter().collect::<Vec<_>>())?
                }
            };
            let single = throughput_bench(&perception, &tensor, 1, runs)?;
            let batched = throughput_bench(&perception, &tensor, batch, runs)?;
            print_bench(&single);
            print_bench(&batched);
            fs::create_dir_all(&out)?;
            fs::write(out.join("bench.json"), serde_json::to_string_pretty(&json!({ "single": single, "batched": batched }))?)?;
            write_run_manifest(
                &out,
                "bench",
                &json!({ "images": images, "batch": batch, "runs": runs }),
                None,
                json!({ "perception": meta.get("digest") }),
            )
        }
    }
}

fn print_bench(b: &BenchResult) {
    println!(
        "batch {:>3}: {:.1} images/s ({:.3} ms/image) on {}",
        b.batch,
        b.images_per_sec,
        1e3 * b.seconds_per_image,
        b.hardware
    );
}

fn checkpoint_epoch(path: &Path) -> Result<usize> {
    let name = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
    if let Some(e) = name.strip_prefix("perception_e") {
        return e.parse().map_err(|_| Error::Invalid(format!("cannot read an epoch from {}", path.display())));
    }
    Ok(crate::trainer::Checkpoint::load(path)?.epoch)
}

/// Epoch checkpoints written alongside `checkpoint`, in epoch order.
fn run_checkpoints(checkpoint: &Path) -> Result<Vec<(usize, PathBuf)>> {
    let dir = checkpoint.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    if dir.is_dir() {
        for entry in fs::read_dir(dir)? {
            let p = entry?.path();
            let name = p.file_name().and_then(|s| s.to_str()).unwrap_or_default();
            if name.starts_with("perception_e") && name.ends_with(".ckpt") {
                out.push((checkpoint_epoch(&p)?, p));
            }
        }
    }
    out.sort();
    Ok(out)
}

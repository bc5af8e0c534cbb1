use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{encode_ppm, render_engine, render_source_view, sample_params, DomainShift, IdentityRecord, ParamVector, PARAM_DIM};
use crate::error::{Error, Result};
use crate::seeds::sub_seed;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const GROUND_TRUTH_FILE: &str = "ground_truth.sealed.json";
const MANIFEST_VERSION: u32 = 1;

/// Corpus sizes. Defaults are the desk-scale corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    pub image_size: usize,
    pub target_train: usize,
    pub target_test: usize,
    pub trainer_identities: usize,
    pub trainer_views: usize,
    pub eval_identities: usize,
    pub eval_views: usize,
    pub extractor_identities: usize,
    pub extractor_views: usize,
    pub shift: DomainShift,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            target_train: 18_000,
            target_test: 2_000,
            trainer_identities: 2_000,
            trainer_views: 4,
            eval_identities: 400,
            eval_views: 2,
            extractor_identities: 256,
            extractor_views: 8,
            shift: DomainShift::default(),
        }
    }
}

impl CorpusConfig {
    /// Reduced corpus for quick end-to-end runs on a single core.
    pub fn smoke() -> Self {
        Self {
            target_train: 4_000,
            target_test: 256,
            trainer_identities: 600,
            eval_identities: 400,
            extractor_identities: 128,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.image_size.is_power_of_two() || self.image_size < 16 {
            return Err(Error::Invalid(format!("image_size {} must be a power of two ≥ 16", self.image_size)));
        }
        if self.target_train == 0 || self.target_test == 0 {
            return Err(Error::Invalid("target splits must be non-empty".into()));
        }
        if self.trainer_views < 2 || self.eval_views < 2 || self.extractor_views < 2 {
            return Err(Error::Invalid("every identity split needs at least two views".into()));
        }
        if self.trainer_identities < 2 || self.eval_identities < 4 || self.extractor_identities < 2 {
            return Err(Error::Invalid("identity splits are too small".into()));
        }
        Ok(())
    }

    fn id_ranges(&self) -> [(Split, u64, u64, usize); 3] {
        let a = self.trainer_identities as u64;
        let b = a + self.eval_identities as u64;
        let c = b + self.extractor_identities as u64;
        [
            (Split::Train, 0, a, self.trainer_views),
            (Split::Eval, a, b, self.eval_views),
            (Split::Extractor, b, c, self.extractor_views),
        ]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
    Eval,
    Extractor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetEntry {
    pub path: String,
    pub params: ParamVector,
    pub split: Split,
}

/// Source photos carry identity bookkeeping only, never their parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SourceEntry {
    pub path: String,
    pub identity: u64,
    pub view: usize,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub seed: u64,
    pub image_size: usize,
    pub param_dim: usize,
    pub target: Vec<TargetEntry>,
    pub source: Vec<SourceEntry>,
    pub splits: BTreeMap<String, usize>,
    pub config: CorpusConfig,
}

impl Manifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| {
            Error::MissingArtifact(format!(
                "corpus manifest {} ({e}); run `avatarfit gen-data` first",
                path.display()
            ))
        })?;
        let m: Manifest = serde_json::from_str(&text)?;
        if m.version != MANIFEST_VERSION {
            return Err(Error::Invalid(format!("unsupported manifest version {}", m.version)));
        }
        Ok(m)
    }

    pub fn targets(&self, split: Split) -> impl Iterator<Item = &TargetEntry> {
        self.target.iter().filter(move |e| e.split == split)
    }

    pub fn sources(&self, split: Split) -> impl Iterator<Item = &SourceEntry> {
        self.source.iter().filter(move |e| e.split == split)
    }

    /// Source entries of `split` grouped by identity, views in order.
    pub fn identities(&self, split: Split) -> BTreeMap<u64, Vec<&SourceEntry>> {
        let mut out: BTreeMap<u64, Vec<&SourceEntry>> = BTreeMap::new();
        for e in self.sources(split) {
            out.entry(e.identity).or_default().push(e);
        }
        for v in out.values_mut() {
            v.sort_by_key(|e| e.view);
        }
        out
    }

    /// Checks that every referenced image exists with the declared size.
    pub fn validate_files(&self, dir: &Path) -> Result<()> {
        let header = format!("P6\n{0} {0}\n255\n", self.image_size);
        let expected = header.len() + 3 * self.image_size * self.image_size;
        let paths = self.target.iter().map(|e| &e.path).chain(self.source.iter().map(|e| &e.path));
        for p in paths {
            let full = dir.join(p);
            let meta = fs::metadata(&full)
                .map_err(|e| Error::MissingArtifact(format!("corpus image {} ({e})", full.display())))?;
            if meta.len() as usize != expected {
                return Err(Error::Format(format!("{} has {} bytes, expected {expected}", full.display(), meta.len())));
            }
        }
        Ok(())
    }
}

/// Sealed per-identity ground truth, kept apart from the trainer manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub version: u32,
    pub identities: BTreeMap<u64, Vec<f32>>,
}

pub fn load_ground_truth(dir: &Path) -> Result<GroundTruth> {
    let text = fs::read_to_string(dir.join(GROUND_TRUTH_FILE))?;
    Ok(serde_json::from_str(&text)?)
}

enum Job {
    Target(usize),
    Source(IdentityRecord, usize),
}

/// Renders the full two-domain corpus into `dir`.
///
/// Each file depends only on `(config, seed, entry)`, so rendering order does
/// not matter. The manifest is written last; if any image fails, no manifest
/// is produced.
pub fn build_corpus(cfg: &CorpusConfig, seed: u64, dir: &Path) -> Result<Manifest> {
    cfg.validate()?;
    fs::create_dir_all(dir.join("target"))?;
    fs::create_dir_all(dir.join("source"))?;
    // stale manifest from an earlier run must not survive a failed rebuild
    let manifest_path = dir.join(MANIFEST_FILE);
    if manifest_path.exists() {
        fs::remove_file(&manifest_path)?;
    }

    let n_target = cfg.target_train + cfg.target_test;
    let target: Vec<TargetEntry> = (0..n_target)
        .map(|i| TargetEntry {
            path: format!("target/{i:06}.ppm"),
            params: sample_params(sub_seed(seed, "target", i as u64)),
            split: if i < cfg.target_train { Split::Train } else { Split::Test },
        })
        .collect();

    let mut identities = Vec::new();
    let mut source = Vec::new();
    let mut truth = BTreeMap::new();
    for (split, lo, hi, views) in cfg.id_ranges() {
        for id in lo..hi {
            let rec = IdentityRecord::sample(seed, id, views);
            for v in 0..views {
                source.push(SourceEntry {
                    path: format!("source/{id:06}_v{v}.ppm"),
                    identity: id,
                    view: v,
                    split,
                });
            }
            truth.insert(id, rec.identity_params.clone());
            identities.push(rec);
        }
    }

    let mut jobs: Vec<Job> = (0..n_target).map(Job::Target).collect();
    for rec in identities {
        for v in 0..rec.views.len() {
            jobs.push(Job::Source(rec.clone(), v));
        }
    }

    let size = cfg.image_size;
    jobs.par_iter()
        .map(|job| -> Result<()> {
            let (path, img) = match job {
                Job::Target(i) => (&target[*i].path, render_engine(&target[*i].params, size)?),
                Job::Source(rec, v) => (
                    &format!("source/{:06}_v{v}.ppm", rec.id),
                    render_source_view(rec, &rec.views[*v], size, &cfg.shift)?,
                ),
            };
            write_atomic(&dir.join(path), &encode_ppm(&img))
        })
        .collect::<Result<Vec<()>>>()?;

    let mut splits = BTreeMap::new();
    splits.insert("target_train".to_string(), cfg.target_train);
    splits.insert("target_test".to_string(), cfg.target_test);
    for (split, lo, hi, views) in cfg.id_ranges() {
        let key = match split {
            Split::Train => "source_train",
            Split::Eval => "source_eval",
            _ => "source_extractor",
        };
        splits.insert(key.to_string(), (hi - lo) as usize * views);
    }

    let manifest = Manifest {
        version: MANIFEST_VERSION,
        seed,
        image_size: size,
        param_dim: PARAM_DIM,
        target,
        source,
        splits,
        config: cfg.clone(),
    };
    let gt = GroundTruth {
        version: MANIFEST_VERSION,
        identities: truth,
    };
    write_atomic(&dir.join(GROUND_TRUTH_FILE), serde_json::to_string_pretty(&gt)?.as_bytes())?;
    write_atomic(&manifest_path, serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    Ok(manifest)
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp: PathBuf = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// SHA-256 over the manifest, the sealed file and every image in manifest order.
pub fn corpus_digest(dir: &Path) -> Result<String> {
    let manifest = Manifest::load(dir)?;
    let mut h = Sha256::new();
    h.update(fs::read(dir.join(MANIFEST_FILE))?);
    h.update(fs::read(dir.join(GROUND_TRUTH_FILE))?);
    for p in manifest.target.iter().map(|e| &e.path).chain(manifest.source.iter().map(|e| &e.path)) {
        h.update(fs::read(dir.join(p))?);
    }
    Ok(hex::encode(h.finalize()))
}

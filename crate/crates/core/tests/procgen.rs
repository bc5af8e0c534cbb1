use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use avatarfit::procgen::{
    build_corpus, corpus_digest, decode_ppm, encode_ppm, load_ground_truth, mask_region, read_ppm, render_engine,
    sample_params, CorpusConfig, Image, Manifest, MaskRegion, ParamVector, Split, GROUND_TRUTH_FILE, MANIFEST_FILE,
};
use proptest::prelude::*;
use sha2::{Digest, Sha256};

const PINNED_SEED: u64 = 42;
const PINNED_SHA256: &str = "11099404bda75ead1555093c956695a26acb3308900574c2401e8e7fb2b3dcf0";

fn sha(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn tiny_config() -> CorpusConfig {
    CorpusConfig {
        image_size: 32,
        target_train: 12,
        target_test: 4,
        trainer_identities: 5,
        trainer_views: 3,
        eval_identities: 4,
        eval_views: 2,
        extractor_identities: 3,
        extractor_views: 4,
        ..CorpusConfig::default()
    }
}

#[test]
fn canonical_face_matches_committed_reference() {
    let img = render_engine(&ParamVector::zeros(), 64).unwrap();
    let reference = read_ppm(&Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data/canonical_p0.ppm")).unwrap();
    assert_eq!(encode_ppm(&img), encode_ppm(&reference));
}

#[test]
fn seeded_render_has_pinned_hash() {
    let img = render_engine(&sample_params(PINNED_SEED), 64).unwrap();
    assert_eq!(sha(&encode_ppm(&img)), PINNED_SHA256);
}

#[test]
fn sampled_params_are_bounded_and_centred() {
    let n = 10_000;
    let mut sum = vec![0.0f64; 32];
    for s in 0..n {
        let p = sample_params(s);
        for (j, v) in p.values().iter().enumerate() {
            assert!((-2.5..=2.5).contains(v));
            sum[j] += *v as f64;
        }
        for v in p.nuisance_part() {
            assert!((-1.0..=1.0).contains(v));
        }
    }
    for s in sum {
        assert!((s / n as f64).abs() < 0.1);
    }
    assert_eq!(sample_params(3), sample_params(3));
    assert_ne!(sample_params(3), sample_params(4));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn engine_is_pure_and_bounded(seed in any::<u64>()) {
        let p = sample_params(seed);
        let a = render_engine(&p, 32).unwrap();
        let b = render_engine(&p, 32).unwrap();
        prop_assert_eq!(encode_ppm(&a), encode_ppm(&b));
        prop_assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn masking_is_idempotent(seed in any::<u64>()) {
        let img = render_engine(&sample_params(seed), 64).unwrap();
        for r in MaskRegion::OCCLUDING {
            let once = mask_region(&img, r);
            prop_assert_eq!(mask_region(&once, r), once);
        }
    }

    #[test]
    fn ppm_round_trip(seed in any::<u64>()) {
        let img = render_engine(&sample_params(seed), 16).unwrap();
        let bytes = encode_ppm(&img);
        prop_assert_eq!(encode_ppm(&decode_ppm(&bytes).unwrap()), bytes);
    }
}

#[test]
fn out_of_range_params_rejected() {
    let mut v = vec![0.0; 32];
    v[0] = 2.6;
    assert!(ParamVector::new(v).is_err());
}

#[test]
fn default_corpus_counts() {
    let c = CorpusConfig::default();
    assert_eq!(c.target_train + c.target_test, 20_000);
    assert_eq!((c.target_train, c.target_test), (18_000, 2_000));
    assert_eq!((c.trainer_identities, c.trainer_views), (2_000, 4));
    assert_eq!((c.eval_identities, c.eval_views), (400, 2));
    assert_eq!((c.extractor_identities, c.extractor_views), (256, 8));
}

fn manifest_counts(m: &Manifest) {
    assert_eq!(m.targets(Split::Train).count(), 12);
    assert_eq!(m.targets(Split::Test).count(), 4);
    assert_eq!(m.sources(Split::Train).count(), 15);
    assert_eq!(m.sources(Split::Eval).count(), 8);
    assert_eq!(m.sources(Split::Extractor).count(), 12);
}

#[test]
fn corpus_is_deterministic_disjoint_and_sealed() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let cfg = tiny_config();
    let ma = build_corpus(&cfg, 7, a.path()).unwrap();
    let mb = build_corpus(&cfg, 7, b.path()).unwrap();
    assert_eq!(ma, mb);
    manifest_counts(&ma);
    ma.validate_files(a.path()).unwrap();
    assert_eq!(corpus_digest(a.path()).unwrap(), corpus_digest(b.path()).unwrap());

    let c = tempfile::tempdir().unwrap();
    build_corpus(&cfg, 8, c.path()).unwrap();
    assert_ne!(corpus_digest(a.path()).unwrap(), corpus_digest(c.path()).unwrap());

    let ids = |s: Split| -> BTreeSet<u64> { ma.sources(s).map(|e| e.identity).collect() };
    let (tr, ev, ex) = (ids(Split::Train), ids(Split::Eval), ids(Split::Extractor));
    assert!(tr.is_disjoint(&ev) && tr.is_disjoint(&ex) && ev.is_disjoint(&ex));

    // the sealed identity parameters never reach the trainer-visible manifest
    let truth = load_ground_truth(a.path()).unwrap();
    assert_eq!(truth.identities.len(), 12);
    let text = fs::read_to_string(a.path().join(MANIFEST_FILE)).unwrap();
    let sealed = fs::read_to_string(a.path().join(GROUND_TRUTH_FILE)).unwrap();
    assert!(!text.contains("identity_params"));
    for values in truth.identities.values() {
        let needle = serde_json::to_string(values).unwrap();
        assert!(!text.contains(&needle[1..needle.len() - 1]));
    }
    assert!(!sealed.is_empty());

    // domains really differ
    let mean = |paths: Vec<&str>| -> f64 {
        let imgs: Vec<Image> = paths.iter().map(|p| read_ppm(&a.path().join(p)).unwrap()).collect();
        imgs.iter().map(|i| i.data().iter().map(|&v| v as f64).sum::<f64>() / i.data().len() as f64).sum::<f64>()
            / imgs.len() as f64
    };
    let mt = mean(ma.target.iter().map(|e| e.path.as_str()).collect());
    let ms = mean(ma.source.iter().map(|e| e.path.as_str()).collect());
    assert!((mt - ms).abs() > 0.0);
}

#[test]
fn invalid_config_writes_no_manifest() {
    let d = tempfile::tempdir().unwrap();
    let cfg = CorpusConfig {
        eval_identities: 1,
        ..tiny_config()
    };
    assert!(build_corpus(&cfg, 1, d.path()).is_err());
    assert!(!d.path().join(MANIFEST_FILE).exists());
}

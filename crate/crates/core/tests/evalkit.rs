mod common;

use avatarfit::data::ImageStore;
use avatarfit::evalkit::{
    apply_descriptor, build_benchmark, cosine, export_embeddings, fit_descriptor_pipeline, reconstruct,
    robustness_eval, shuffled_chance, signed_sqrt, threshold_grid, verification_accuracy, DescriptorPipeline,
    VerificationPair, THRESHOLDS,
};
use avatarfit::imitator::{ImitatorConfig, ImitatorNet};
use avatarfit::perception::{Perception, PerceptionConfig};
use avatarfit::procgen::{render_engine, sample_params, Image, MaskRegion};
use avatarfit::Error;
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

fn gaussian_rows(seed: u64, n: usize, scales: &[f64]) -> Vec<Vec<f64>> {
    let mut r = common::rng(seed);
    (0..n)
        .map(|_| scales.iter().map(|s| { let z: f64 = StandardNormal.sample(&mut r); s * z + 0.3 }).collect())
        .collect()
}

fn identity_pipeline(d: usize) -> DescriptorPipeline {
    let mut rotation = vec![0.0; d * d];
    for i in 0..d {
        rotation[i * d + i] = 1.0;
    }
    DescriptorPipeline {
        mean: vec![0.0; d],
        rotation,
        eigenvalues: vec![1.0; d],
        signed_sqrt: true,
        fitted_on: "test".into(),
    }
}

#[test]
fn one_dimensional_rotation_is_unit() {
    let rows = vec![vec![-1.0], vec![2.0], vec![5.0]];
    let p = fit_descriptor_pipeline(&rows, "train").unwrap();
    assert_eq!(p.rotation, vec![1.0]);
    assert!((p.mean[0] - 2.0).abs() < 1e-12);
    assert!((p.eigenvalues[0] - 9.0).abs() < 1e-9);
}

#[test]
fn pipeline_rejects_too_few_rows() {
    assert!(matches!(fit_descriptor_pipeline(&[vec![1.0, 2.0]], "x"), Err(Error::Invalid(_))));
    assert!(fit_descriptor_pipeline(&[vec![1.0], vec![1.0, 2.0]], "x").is_err());
}

#[test]
fn basis_is_orthonormal_and_invertible() {
    let rows = gaussian_rows(1, 200, &[3.0, 1.0, 0.5, 2.0, 0.1, 1.5]);
    let p = fit_descriptor_pipeline(&rows, "train").unwrap();
    let d = p.dim();
    // Gram matrix of the columns, computed independently
    let r = DMatrix::from_row_slice(d, d, &p.rotation);
    let gram = r.transpose() * &r;
    for i in 0..d {
        for j in 0..d {
            let want = if i == j { 1.0 } else { 0.0 };
            assert!((gram[(i, j)] - want).abs() < 1e-5);
        }
    }
    for w in p.eigenvalues.windows(2) {
        assert!(w[0] >= w[1]);
    }
    for j in 0..d {
        let c = p.column(j);
        let big = c.iter().cloned().fold(0.0f64, |m, v| if v.abs() > m.abs() { v } else { m });
        assert!(big > 0.0);
    }
    for x in &rows {
        let z = p.rotate(x);
        let back = r.clone() * nalgebra::DVector::from_vec(z);
        for i in 0..d {
            assert!((back[i] - (x[i] - p.mean[i])).abs() < 1e-5);
        }
    }
}

#[test]
fn rank_deficient_covariance_is_floored() {
    let rows: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64, 2.0 * i as f64, 1.0]).collect();
    let p = fit_descriptor_pipeline(&rows, "train").unwrap();
    assert!(p.eigenvalues.iter().all(|&e| e >= 1e-10));
    assert!(p.eigenvalues.iter().all(|e| e.is_finite()));
}

#[test]
fn signed_root_and_apply() {
    assert_eq!(signed_sqrt(-4.0), -2.0);
    assert_eq!(signed_sqrt(9.0), 3.0);
    assert_eq!(signed_sqrt(0.0), 0.0);
    let p = identity_pipeline(3);
    assert_eq!(apply_descriptor(&[0.0, 0.0, 0.0], &p), vec![0.0, 0.0, 0.0]);
    assert_eq!(apply_descriptor(&[-4.0, 16.0, 0.0], &p), vec![-2.0, 4.0, 0.0]);
    let once = apply_descriptor(&[-4.0, 16.0, 0.25], &p);
    let twice = apply_descriptor(&once, &p);
    assert_ne!(once, twice);
}

fn pair(a: Vec<f64>, b: Vec<f64>, same: bool) -> VerificationPair {
    VerificationPair { a, b, same }
}

#[test]
fn separable_pairs_score_perfectly() {
    let p = identity_pipeline(2);
    let pairs = vec![
        pair(vec![1.0, 0.0], vec![1.0, 0.0], true),
        pair(vec![0.0, 2.0], vec![0.0, 2.0], true),
        pair(vec![1.0, 0.0], vec![0.0, 1.0], false),
        pair(vec![0.0, 3.0], vec![4.0, 0.0], false),
    ];
    let r = verification_accuracy(&pairs, &pairs, &p).unwrap();
    assert_eq!(r.accuracy, 1.0);
    assert_eq!(r.fit_accuracy, 1.0);
    // lowest threshold above 0 that separates 0 from 1
    assert!(r.threshold > 0.0 && r.threshold <= 0.002 + 1e-12);
    assert!(verification_accuracy(&[], &pairs, &p).is_err());
    assert!(verification_accuracy(&pairs, &[], &p).is_err());
}

#[test]
fn threshold_grid_shape() {
    let g = threshold_grid();
    assert_eq!(g.len(), THRESHOLDS);
    assert_eq!(g[0], -1.0);
    assert_eq!(g[1000], 1.0);
    assert!((g[500]).abs() < 1e-15);
}

fn brute_force(fit: &[VerificationPair], test: &[VerificationPair], p: &DescriptorPipeline) -> (f64, f64) {
    let cos = |x: &VerificationPair| {
        let a = apply_descriptor(&x.a, p);
        let b = apply_descriptor(&x.b, p);
        let dot: f64 = a.iter().zip(&b).map(|(u, v)| u * v).sum();
        let na: f64 = a.iter().map(|u| u * u).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|u| u * u).sum::<f64>().sqrt();
        if na == 0.0 || nb == 0.0 {
            0.0
        } else {
            dot / (na * nb)
        }
    };
    let acc = |set: &[VerificationPair], t: f64| {
        set.iter().filter(|x| (cos(x) >= t) == x.same).count() as f64 / set.len() as f64
    };
    let mut best_t = -1.0;
    let mut best = -1.0;
    for i in 0..=1000 {
        let t = -1.0 + i as f64 * 2.0 / 1000.0;
        let a = acc(fit, t);
        if a > best {
            best = a;
            best_t = t;
        }
    }
    (acc(test, best_t), best_t)
}

fn random_pairs(seed: u64, n: usize, d: usize, signal: f64) -> Vec<VerificationPair> {
    let mut r = common::rng(seed);
    (0..n)
        .map(|i| {
            let a: Vec<f64> = (0..d).map(|_| r.gen_range(-1.0..1.0)).collect();
            let same = i % 2 == 0;
            let b = if same {
                a.iter().map(|v| v + r.gen_range(-1.0..1.0) * (1.0 - signal)).collect()
            } else {
                (0..d).map(|_| r.gen_range(-1.0..1.0)).collect()
            };
            pair(a, b, same)
        })
        .collect()
}

#[test]
fn matches_brute_force_threshold_sweep() {
    for seed in 0..5 {
        let fit = random_pairs(seed, 80, 5, 0.5);
        let test = random_pairs(seed + 100, 80, 5, 0.5);
        let train: Vec<Vec<f64>> = fit.iter().flat_map(|p| [p.a.clone(), p.b.clone()]).collect();
        let p = fit_descriptor_pipeline(&train, "train").unwrap();
        let r = verification_accuracy(&fit, &test, &p).unwrap();
        let (acc, t) = brute_force(&fit, &test, &p);
        assert_eq!(r.accuracy, acc);
        assert!((r.threshold - t).abs() < 1e-12);
    }
}

#[test]
fn shuffled_labels_sit_at_chance() {
    let ids: Vec<Vec<usize>> = (0..400).map(|i| vec![2 * i, 2 * i + 1]).collect();
    let mut r = common::rng(7);
    let desc: Vec<Vec<f64>> = (0..400)
        .flat_map(|_| {
            let a: Vec<f64> = (0..6).map(|_| r.gen_range(-1.0..1.0)).collect();
            let b: Vec<f64> = a.iter().map(|v| v + r.gen_range(-0.2..0.2)).collect();
            [a, b]
        })
        .collect();
    let bench = build_benchmark(&ids, 3).unwrap();
    let p = fit_descriptor_pipeline(&desc, "train").unwrap();
    let pairs = |set: &[(usize, usize, bool)]| -> Vec<VerificationPair> {
        set.iter().map(|&(a, b, s)| pair(desc[a].clone(), desc[b].clone(), s)).collect()
    };
    let real = verification_accuracy(&pairs(&bench.fit), &pairs(&bench.test), &p).unwrap();
    assert!(real.accuracy > 0.9);
    for seed in 0..3 {
        let c = shuffled_chance(&bench, &desc, &p, 10, seed).unwrap();
        assert!((c - 0.5).abs() <= 0.05, "chance {c}");
    }
}

#[test]
fn benchmark_structure() {
    let ids: Vec<Vec<usize>> = (0..40).map(|i| vec![2 * i, 2 * i + 1]).collect();
    let b = build_benchmark(&ids, 1).unwrap();
    assert_eq!(b.fit.len(), 40);
    assert_eq!(b.test.len(), 40);
    assert_eq!(b.fit.iter().filter(|p| p.2).count(), 20);
    let fit_imgs: std::collections::BTreeSet<usize> = b.fit.iter().flat_map(|p| [p.0, p.1]).collect();
    let test_imgs: std::collections::BTreeSet<usize> = b.test.iter().flat_map(|p| [p.0, p.1]).collect();
    assert!(fit_imgs.is_disjoint(&test_imgs));
    assert!(fit_imgs.iter().all(|&i| i < 40) && test_imgs.iter().all(|&i| i >= 40));
    for &(a, c, same) in b.fit.iter().chain(&b.test) {
        assert_eq!(a / 2 == c / 2, same);
    }
    assert_eq!(b, build_benchmark(&ids, 1).unwrap());
    assert!(build_benchmark(&ids[..3], 1).is_err());
}

fn random_orthogonal(seed: u64, d: usize) -> DMatrix<f64> {
    let mut r = common::rng(seed);
    let m = DMatrix::from_fn(d, d, |_, _| -> f64 { StandardNormal.sample(&mut r) });
    m.qr().q()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn accuracy_invariant_under_common_rotation(seed in 0u64..10_000, d in 2usize..6) {
        let fit = random_pairs(seed, 40, d, 0.4);
        let test = random_pairs(seed + 1, 40, d, 0.4);
        let train = gaussian_rows(seed + 2, 60, &vec![1.0; d].iter().enumerate().map(|(i, _)| 1.0 + i as f64).collect::<Vec<_>>());
        let q = random_orthogonal(seed + 3, d);
        let rot = |v: &[f64]| -> Vec<f64> { (&q * nalgebra::DVector::from_column_slice(v)).iter().copied().collect() };
        let rot_pairs = |set: &[VerificationPair]| -> Vec<VerificationPair> {
            set.iter().map(|p| pair(rot(&p.a), rot(&p.b), p.same)).collect()
        };
        let p0 = fit_descriptor_pipeline(&train, "train").unwrap();
        let train_r: Vec<Vec<f64>> = train.iter().map(|v| rot(v)).collect();
        let p1 = fit_descriptor_pipeline(&train_r, "train").unwrap();
        let a = verification_accuracy(&fit, &test, &p0).unwrap();
        let b = verification_accuracy(&rot_pairs(&fit), &rot_pairs(&test), &p1).unwrap();
        prop_assert_eq!(a.accuracy, b.accuracy);
        prop_assert_eq!(a.threshold, b.threshold);
    }

    #[test]
    fn cosine_bounded(a in prop::collection::vec(-5.0f64..5.0, 4), b in prop::collection::vec(-5.0f64..5.0, 4)) {
        let c = cosine(&a, &b);
        prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&c));
    }
}

fn small_model() -> Perception<f32> {
    Perception::new(PerceptionConfig::default(), 4).unwrap()
}

fn eval_store(identities: usize) -> (ImageStore, Vec<Vec<usize>>) {
    let mut images = Vec::new();
    let mut ids = Vec::new();
    for i in 0..identities {
        let p = sample_params(100 + i as u64);
        let mut q = p.values().to_vec();
        q[0] = (q[0] + 0.1).min(2.5);
        let img_a = render_engine(&p, 64).unwrap();
        let img_b = render_engine(&avatarfit::procgen::ParamVector::new(q).unwrap(), 64).unwrap();
        ids.push(vec![images.len(), images.len() + 1]);
        images.push(img_a);
        images.push(img_b);
    }
    (ImageStore::from_images(&images).unwrap(), ids)
}

#[test]
fn no_op_mask_reproduces_baseline_exactly() {
    let model = small_model();
    let (store, ids) = eval_store(12);
    let bench = build_benchmark(&ids, 0).unwrap();
    let desc = avatarfit::evalkit::regress_params(&model, &store).unwrap();
    let rows: Vec<Vec<f64>> = desc.data().chunks(32).map(|r| r.iter().map(|&v| v as f64).collect()).collect();
    let pipeline = fit_descriptor_pipeline(&rows, "source-train").unwrap();
    let regions = [MaskRegion::None, MaskRegion::Upper, MaskRegion::Middle, MaskRegion::Lower];
    let rep = robustness_eval(&model, &store, &bench, &pipeline, &regions).unwrap();
    assert_eq!(rep.per_region.len(), 4);
    assert_eq!(rep.per_region[0].accuracy, rep.baseline.accuracy);
    assert_eq!(rep.per_region[0].threshold, rep.baseline.threshold);
    let drops: f64 = rep.per_region[1..].iter().map(|r| rep.baseline.accuracy - r.accuracy).sum();
    assert!((rep.mean_drop - drops / 3.0).abs() < 1e-12);
    // stored images untouched
    let again = avatarfit::evalkit::regress_params(&model, &store).unwrap();
    assert_eq!(desc, again);
}

#[test]
fn export_rows_and_repeatability() {
    let model = small_model();
    let (src, _) = eval_store(3);
    let tgt = ImageStore::from_images(&[render_engine(&sample_params(9), 64).unwrap()]).unwrap();
    let (csv, mmd) = export_embeddings(&model, &src, &tgt).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 1 + 6 + 1);
    assert!(lines[0].starts_with("domain,p0,p1,"));
    assert!(lines[0].ends_with(",p31"));
    assert_eq!(lines.iter().filter(|l| l.starts_with("source,")).count(), 6);
    assert_eq!(lines.iter().filter(|l| l.starts_with("target,")).count(), 1);
    assert!(mmd >= 0.0);
    let (csv2, mmd2) = export_embeddings(&model, &src, &tgt).unwrap();
    assert_eq!(csv.as_bytes(), csv2.as_bytes());
    assert_eq!(mmd, mmd2);
}

#[test]
fn reconstruct_is_one_pass_and_repeatable() {
    let model = small_model();
    let imitator = ImitatorNet::<f32>::new(ImitatorConfig::default(), 1).unwrap();
    let img = render_engine(&sample_params(5), 64).unwrap();
    let a = reconstruct(&model, &imitator, &img).unwrap();
    let b = reconstruct(&model, &imitator, &img).unwrap();
    assert_eq!(a.params, b.params);
    assert_eq!(a.engine, b.engine);
    assert_eq!(a.imitated, b.imitated);
    assert!(a.params.values().iter().all(|v| v.abs() <= 2.5));
    let wrong = Image::filled(32, 0.5).unwrap();
    assert!(matches!(reconstruct(&model, &imitator, &wrong), Err(Error::Invalid(_))));
}

//! Generator and label invariants over many seeds.

mod common;

use common::rng;
use proptest::prelude::*;
use rand::Rng;
use sparsematch::synth::{generate_scene, synthesize_descriptors, PairSample, SceneConfig};
use sparsematch::training::{make_labels, GroundTruthLabels};
use sparsematch::Tensor;

fn scene(seed: u64) -> SceneConfig {
    SceneConfig {
        seed,
        ..SceneConfig::default()
    }
}

fn row_dot(a: &Tensor<f64>, i: usize, b: &Tensor<f64>, j: usize) -> f64 {
    a.row(i).iter().zip(b.row(j)).map(|(x, y)| x * y).sum()
}

#[test]
fn seventy_percent_unmatched_is_recovered() {
    for seed in 0..100 {
        let cfg = SceneConfig {
            num_shared_points: 30,
            num_unmatched_per_image: 70,
            ..scene(seed)
        };
        let p: PairSample<f64> = generate_scene(&cfg).unwrap();
        let frac_a = p.labels.non_repeatable_a.len() as f64 / p.kps_a.len() as f64;
        let frac_b = p.labels.non_repeatable_b.len() as f64 / p.kps_b.len() as f64;
        assert!((frac_a - 0.7).abs() <= 0.05, "seed {seed}: {frac_a}");
        assert!((frac_b - 0.7).abs() <= 0.05, "seed {seed}: {frac_b}");
        assert!(p.labels.is_consistent(p.kps_a.len(), p.kps_b.len()));
    }
}

#[test]
fn exact_geometry_without_distractors() {
    for seed in 0..20 {
        let cfg = SceneConfig {
            num_unmatched_per_image: 0,
            jitter_px: 0.0,
            ..scene(seed)
        };
        let p: PairSample<f64> = generate_scene(&cfg).unwrap();
        assert!(p.labels.non_repeatable_a.is_empty() && p.labels.non_repeatable_b.is_empty());
        assert_eq!(p.labels.matches.len(), cfg.num_shared_points);
        // every ground-truth pair reprojects with zero error
        for &(i, j) in &p.labels.matches {
            let q = p.proj_ab[i].unwrap();
            let d = (q[0] - p.kps_b.positions[j][0]).hypot(q[1] - p.kps_b.positions[j][1]);
            assert!(d < 1e-6, "seed {seed}: {d}");
        }
    }
}

#[test]
fn unmatched_keypoints_are_all_non_repeatable() {
    for seed in 0..20 {
        let p: PairSample<f64> = generate_scene(&scene(seed)).unwrap();
        let matched_a: Vec<usize> = p.labels.matches.iter().map(|m| m.0).collect();
        let total = p.kps_a.len();
        assert_eq!(matched_a.len() + p.labels.non_repeatable_a.len(), total);
        assert_eq!(
            p.labels.non_repeatable_a.len(),
            SceneConfig::default().num_unmatched_per_image
        );
        // relabelling from the stored projections reproduces the labels
        let again = make_labels(&p.proj_ab, &p.proj_ba, &p.kps_a.positions, &p.kps_b.positions);
        assert_eq!(again, p.labels);
    }
}

#[test]
fn same_seed_same_pair() {
    let a: PairSample<f32> = generate_scene(&scene(42)).unwrap();
    let b: PairSample<f32> = generate_scene(&scene(42)).unwrap();
    assert_eq!(a, b);
    let c: PairSample<f32> = generate_scene(&scene(43)).unwrap();
    assert_ne!(a, c);
}

#[test]
fn noiseless_true_pairs_have_unit_similarity() {
    let p: PairSample<f64> = generate_scene(&SceneConfig {
        descriptor_noise: 0.0,
        ..scene(3)
    })
    .unwrap();
    for &(i, j) in &p.labels.matches {
        assert!((row_dot(&p.kps_a.descriptors, i, &p.kps_b.descriptors, j) - 1.0).abs() < 1e-12);
    }
    for t in [&p.kps_a.descriptors, &p.kps_b.descriptors] {
        for i in 0..t.rows() {
            assert!((row_dot(t, i, t, i).sqrt() - 1.0).abs() <= 1e-6);
        }
    }
}

#[test]
fn heavy_noise_hides_true_pairs() {
    // Monte-Carlo over 1000 true and 1000 random pairs; per-entry noise of
    // standard deviation 4 leaves an expected true-pair similarity near
    // 1/(1 + D·σ²) ≈ 0.002, far below the sampling error of the means.
    let labels = GroundTruthLabels {
        matches: (0..1000).map(|i| (i, i)).collect(),
        ..Default::default()
    };
    let (a, b) = synthesize_descriptors::<f64, _>(&labels, 1000, 1000, 32, 4.0, &mut rng(7)).unwrap();
    let mut r = rng(8);
    let true_sims: Vec<f64> = (0..1000).map(|i| row_dot(&a, i, &b, i)).collect();
    let rand_sims: Vec<f64> = (0..1000)
        .map(|_| {
            let (i, j) = (r.gen_range(0..1000), r.gen_range(0..1000));
            row_dot(&a, i, &b, j)
        })
        .collect();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let var = |v: &[f64]| {
        let m = mean(v);
        v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64
    };
    let se = ((var(&true_sims) + var(&rand_sims)) / 1000.0).sqrt();
    let z = (mean(&true_sims) - mean(&rand_sims)) / se;
    assert!(z.abs() < 3.0, "z = {z}");

    // the desk noise level is clearly separable
    let (a, b) = synthesize_descriptors::<f64, _>(&labels, 1000, 1000, 32, 0.1, &mut rng(7)).unwrap();
    let low: Vec<f64> = (0..1000).map(|i| row_dot(&a, i, &b, i)).collect();
    assert!(mean(&low) > 0.5);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn swapping_images_swaps_labels(seed in 0u64..100_000, m in 1usize..25, n in 1usize..25) {
        let mut r = rng(seed);
        let mut pts = |len: usize| (0..len).map(|_| [r.gen_range(0.0..60.0), r.gen_range(0.0..60.0)]).collect::<Vec<_>>();
        let (ka, kb) = (pts(m), pts(n));
        let mut proj = |len: usize| (0..len)
            .map(|_| if r.gen_bool(0.1) { None } else { Some([r.gen_range(0.0..60.0), r.gen_range(0.0..60.0)]) })
            .collect::<Vec<_>>();
        let (pab, pba) = (proj(m), proj(n));
        let l = make_labels(&pab, &pba, &ka, &kb);
        prop_assert!(l.is_consistent(m, n));
        prop_assert_eq!(make_labels(&pba, &pab, &kb, &ka), l.swapped());
    }

    #[test]
    fn generated_labels_are_consistent(seed in 0u64..100_000) {
        let p: PairSample<f32> = generate_scene(&SceneConfig { num_shared_points: 20, num_unmatched_per_image: 15, ..scene(seed) }).unwrap();
        prop_assert!(p.labels.is_consistent(p.kps_a.len(), p.kps_b.len()));
        prop_assert_eq!(p.labels.matches.len(), 20);
    }
}

//! Acceptance criteria. Runs without the libtest harness so that every
//! criterion prints its `criterion N: PASS|FAIL ...` line even under a plain
//! `cargo test`; exits non-zero if any criterion fails. Non-flag arguments
//! select criteria by name substring.
//!
//! Criteria 5 and 6 train desk-scale models for 5000 iterations each and
//! dominate the runtime; criterion 6 reuses criterion 5's model.

mod common;

use std::collections::{BTreeMap, HashSet};
use std::panic::catch_unwind;
use std::process::ExitCode;
use std::sync::{Arc, Mutex};
use std::time::Instant;

use common::{brute_force_greedy, end_to_end_gradcheck, reference_attention, rng, to_mat};
use rand::Rng;
use sparsematch::attention::{weighted_attention, AttentionParams, WeightVector};
use sparsematch::bcas::{nms_radius, sample_matchable, NMS_SIGMA};
use sparsematch::bench::{count_score_evals, dense_layer_evals, sparse_layer_evals, BenchConfig, Variant};
use sparsematch::eval::{evaluate, EvalReport};
use sparsematch::io::{weights_from_bytes, weights_to_bytes};
use sparsematch::matching::sinkhorn;
use sparsematch::synth::{generate_dataset, PairSample, SceneConfig};
use sparsematch::training::{train, TrainConfig};
use sparsematch::{Ablation, ForwardOptions, Graph, Model32, ParamStore, Tensor};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

type Criterion = fn() -> Outcome;

const CRITERIA: [(usize, &str, Criterion); 8] = [
    (1, "criterion_1_end_to_end_gradient", criterion_1_end_to_end_gradient),
    (2, "criterion_2_sinkhorn_marginals", criterion_2_sinkhorn_marginals),
    (
        3,
        "criterion_3_all_one_weights_equal_plain_attention",
        criterion_3_all_one_weights_equal_plain_attention,
    ),
    (4, "criterion_4_complexity_counters", criterion_4_complexity_counters),
    (5, "criterion_5_desk_overfit", criterion_5_desk_overfit),
    (6, "criterion_6_ablation_ordering", criterion_6_ablation_ordering),
    (
        7,
        "criterion_7_determinism_and_round_trip",
        criterion_7_determinism_and_round_trip,
    ),
    (8, "criterion_8_sampling_contract", criterion_8_sampling_contract),
];

/// Name filters from the command line, skipping libtest-style options and
/// their values.
fn filters() -> Vec<String> {
    let mut out = Vec::new();
    let mut args = std::env::args().skip(1);
    while let Some(a) = args.next() {
        if matches!(a.as_str(), "--test-threads" | "--skip" | "--format" | "--color" | "-Z") {
            args.next();
        } else if !a.starts_with('-') {
            out.push(a);
        }
    }
    out
}

fn panic_message(e: &(dyn std::any::Any + Send)) -> String {
    e.downcast_ref::<String>()
        .cloned()
        .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
        .unwrap_or_else(|| "unknown panic".into())
}

fn main() -> ExitCode {
    if std::env::args().any(|a| a == "--list") {
        for (_, name, _) in CRITERIA {
            println!("{name}: test");
        }
        return ExitCode::SUCCESS;
    }
    let filters = filters();
    let (mut passed, mut failed) = (0, 0);
    for (n, name, run) in CRITERIA {
        if !filters.is_empty() && !filters.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let o = catch_unwind(run).unwrap_or_else(|e| outcome(false, format!("panicked: {}", panic_message(&*e))));
        println!("criterion {n}: {} {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        if o.pass {
            passed += 1;
        } else {
            failed += 1;
        }
    }
    println!("acceptance: {passed} passed, {failed} failed");
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

fn criterion_1_end_to_end_gradient() -> Outcome {
    let t = Instant::now();
    let r = end_to_end_gradcheck(1, 20);
    outcome(
        r.checked == 20 && r.max_rel_err <= 1e-4,
        format!(
            "max rel err {:.2e} over {} parameters ({:.1?})",
            r.max_rel_err,
            r.checked,
            t.elapsed()
        ),
    )
}

fn criterion_2_sinkhorn_marginals() -> Outcome {
    let t = Instant::now();
    let s = Tensor::uniform(65, 65, 1.0, &mut rng(2));
    let mut g = Graph::new();
    let v = g.leaf(s);
    let out = sinkhorn(&mut g, v, 100).unwrap();
    let p = g.value(out).clone();
    let mut worst: f64 = 0.0;
    for i in 0..65 {
        let target = if i == 64 { 64.0 } else { 1.0 };
        worst = worst.max((p.row(i).iter().sum::<f64>() - target).abs());
    }
    for j in 0..65 {
        let target = if j == 64 { 64.0 } else { 1.0 };
        worst = worst.max(((0..65).map(|i| p.get(i, j)).sum::<f64>() - target).abs());
    }
    outcome(
        worst <= 1e-5,
        format!("max marginal residual {worst:.2e} ({:.1?})", t.elapsed()),
    )
}

fn criterion_3_all_one_weights_equal_plain_attention() -> Outcome {
    let t = Instant::now();
    let mut r = rng(3);
    let mut worst: f64 = 0.0;
    for case in 0..50 {
        let heads = [1, 2, 4][case % 3];
        let dim = heads * r.gen_range(1..9);
        let (m, n) = (r.gen_range(1..17), r.gen_range(1..17));
        let mut store = ParamStore::new();
        let p = AttentionParams::new(&mut store, "att", dim, heads, &mut r).unwrap();
        let x = Tensor::uniform(m, dim, 1.0, &mut r);
        let y = Tensor::uniform(n, dim, 1.0, &mut r);
        let mut g = Graph::new();
        let (xv, yv) = (g.leaf(x.clone()), g.leaf(y.clone()));
        let w = WeightVector::Scores(g.leaf(Tensor::ones(n, 1)));
        let out = weighted_attention(&mut g, &store, &p, xv, yv, w).unwrap();
        let reference = Tensor::from_rows(&reference_attention(&store, &p, &to_mat(&x), &to_mat(&y))).unwrap();
        worst = worst.max(g.value(out).max_abs_diff(&reference));
    }
    outcome(
        worst <= 1e-6,
        format!("max deviation {worst:.2e} over 50 configurations ({:.1?})", t.elapsed()),
    )
}

fn criterion_4_complexity_counters() -> Outcome {
    let t = Instant::now();
    let narrow = |k| BenchConfig {
        dim: 4,
        heads: 1,
        k,
        ..BenchConfig::default()
    };
    let mut r = rng(4);
    let mut exact = true;
    for _ in 0..10 {
        let (m, n, k) = (r.gen_range(1..400), r.gen_range(1..400), r.gen_range(1..200));
        let c = narrow(k);
        exact &= count_score_evals(&c, Variant::DenseIca, m, n).unwrap() == dense_layer_evals(m, n);
        exact &=
            count_score_evals(&c, Variant::SparseMkaca, m, n).unwrap() == sparse_layer_evals(m, n, k.min(m), k.min(n));
    }
    let c = narrow(128);
    let count = |v, n| count_score_evals(&c, v, n, n).unwrap() as f64;
    let sparse = count(Variant::SparseMkaca, 8192) / count(Variant::SparseMkaca, 1024);
    let dense = count(Variant::DenseIca, 8192) / count(Variant::DenseIca, 1024);
    let pass = exact && (7.0..=9.0).contains(&sparse) && (60.0..=68.0).contains(&dense);
    outcome(
        pass,
        format!(
            "formulas exact: {exact}, sparse ratio {sparse:.3}, dense ratio {dense:.3} ({:.1?})",
            t.elapsed()
        ),
    )
}

// ---- desk training protocol shared by criteria 5 and 6 ----

const DESK_PAIRS: usize = 50;
const DESK_ITERATIONS: usize = 5000;

fn desk_data(seed: u64) -> Vec<PairSample<f32>> {
    let scene = SceneConfig {
        num_shared_points: 64,
        num_unmatched_per_image: 64,
        descriptor_noise: 0.1,
        descriptor_dim: 32,
        seed,
        ..SceneConfig::default()
    };
    generate_dataset(&scene, DESK_PAIRS).unwrap()
}

/// Trains (once per seed and ablation) and evaluates on the training pairs.
fn desk_run(seed: u64, ablation: Ablation) -> Arc<EvalReport> {
    static RUNS: Mutex<BTreeMap<(u64, u8), Arc<EvalReport>>> = Mutex::new(BTreeMap::new());
    let mut runs = RUNS.lock().unwrap_or_else(|e| e.into_inner());
    runs.entry((seed, ablation.bits()))
        .or_insert_with(|| {
            let t = Instant::now();
            let data = desk_data(seed);
            let config = TrainConfig {
                iterations: DESK_ITERATIONS,
                seed,
                ..TrainConfig::desk()
            }
            .with_ablation(ablation);
            let model = train(&config, &data).unwrap().model;
            let rep = evaluate(
                &model,
                &data,
                &ForwardOptions::training(&model.config),
                config.threshold,
            )
            .unwrap();
            println!("  seed {seed} ablation {ablation:?}: {rep:?} ({:.1?})", t.elapsed());
            Arc::new(rep)
        })
        .clone()
}

fn criterion_5_desk_overfit() -> Outcome {
    let t = Instant::now();
    let rep = desk_run(0, Ablation::default());
    let precision = rep.precision.unwrap_or(0.0);
    let pred_p = rep.predictor_precision.unwrap_or(0.0);
    let pred_r = rep.predictor_recall.unwrap_or(0.0);
    let pass = precision >= 0.9 && rep.matching_score >= 0.3 && pred_p >= 0.9 && pred_r >= 0.9;
    outcome(pass,
        format!(
            "precision {precision:.4}, matching score {:.4}, predictor precision {pred_p:.4} recall {pred_r:.4} ({:.1?})",
            rep.matching_score,
            t.elapsed()
        ),
    )
}

fn criterion_6_ablation_ordering() -> Outcome {
    let t = Instant::now();
    let variants = [
        (
            "random-sampling",
            Ablation {
                random_sampling: true,
                ..Ablation::default()
            },
        ),
        (
            "vanilla-attention",
            Ablation {
                vanilla_attention: true,
                ..Ablation::default()
            },
        ),
        (
            "no-bilateral-context",
            Ablation {
                no_bilateral_context: true,
                ..Ablation::default()
            },
        ),
    ];
    let precision = |seed, a| desk_run(seed, a).precision.unwrap_or(0.0);
    let mut holds = 0;
    let mut lines = Vec::new();
    for seed in 0..3 {
        let full = precision(seed, Ablation::default());
        let p: Vec<f64> = variants.iter().map(|&(_, a)| precision(seed, a)).collect();
        let full_best = p.iter().all(|&v| full >= v);
        let random_worst = p[1..].iter().all(|&v| p[0] < v) && p[0] < full;
        holds += usize::from(full_best && random_worst);
        lines.push(format!(
            "seed {seed}: full {full:.4} {}",
            variants
                .iter()
                .zip(&p)
                .map(|((name, _), v)| format!("{name} {v:.4}"))
                .collect::<Vec<_>>()
                .join(" ")
        ));
    }
    outcome(
        holds >= 2,
        format!(
            "ordering holds on {holds}/3 seeds [{}] ({:.1?})",
            lines.join("; "),
            t.elapsed()
        ),
    )
}

fn criterion_7_determinism_and_round_trip() -> Outcome {
    let t = Instant::now();
    let data: Vec<PairSample<f32>> = desk_data(7).into_iter().take(8).collect();
    let config = TrainConfig {
        iterations: 100,
        seed: 7,
        ..TrainConfig::desk()
    };
    let first = train(&config, &data).unwrap();
    let second = train(&config, &data).unwrap();
    let bits = |o: &sparsematch::training::TrainOutcome<f32>| {
        o.metrics.iter().map(|r| (r.total as f32).to_bits()).collect::<Vec<_>>()
    };
    let same_curve = first.metrics.len() == 100 && bits(&first) == bits(&second);

    let restored: Model32 = weights_from_bytes(&weights_to_bytes(&first.model)).unwrap();
    let opts = ForwardOptions::training(&first.model.config);
    let mut same_output = true;
    for pair in &data {
        let p = first.model.predict(&pair.kps_a, &pair.kps_b, &opts, 0.2).unwrap();
        let q = restored.predict(&pair.kps_a, &pair.kps_b, &opts, 0.2).unwrap();
        let raw = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        same_output &= raw(&p.assignment.augmented) == raw(&q.assignment.augmented);
    }
    outcome(
        same_curve && same_output,
        format!(
            "identical loss curves: {same_curve}, bitwise round trip: {same_output} ({:.1?})",
            t.elapsed()
        ),
    )
}

fn criterion_8_sampling_contract() -> Outcome {
    let t = Instant::now();
    let mut r = rng(8);
    let mut failures = 0;
    for case in 0..1000 {
        let m = r.gen_range(1..80);
        let k = r.gen_range(1..48);
        // every fourth case uses coarse grids so ties occur
        let coarse = case % 4 == 0;
        let scores: Vec<f64> = (0..m)
            .map(|_| {
                if coarse {
                    r.gen_range(0..5) as f64 / 5.0
                } else {
                    r.gen()
                }
            })
            .collect();
        let positions: Vec<[f64; 2]> = (0..m)
            .map(|_| {
                if coarse {
                    [r.gen_range(0..8) as f64, r.gen_range(0..8) as f64]
                } else {
                    [r.gen_range(0.0..640.0), r.gen_range(0.0..480.0)]
                }
            })
            .collect();
        let radius = nms_radius(&positions, NMS_SIGMA) * r.gen_range(0.5..20.0);
        let picked = sample_matchable(&scores, &positions, k, radius);
        let distinct = picked.iter().collect::<HashSet<_>>().len() == picked.len();
        let separated = picked.iter().enumerate().all(|(x, &i)| {
            picked[x + 1..].iter().all(|&j| {
                let (dx, dy) = (positions[i][0] - positions[j][0], positions[i][1] - positions[j][1]);
                (dx * dx + dy * dy).sqrt() >= radius
            })
        });
        let ok =
            picked.len() <= k && distinct && separated && picked == brute_force_greedy(&scores, &positions, k, radius);
        failures += usize::from(!ok);
    }
    outcome(
        failures == 0,
        format!("{failures} of 1000 sets violate the contract ({:.1?})", t.elapsed()),
    )
}

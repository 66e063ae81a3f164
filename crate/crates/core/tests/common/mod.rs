//! Reference implementations and fixtures shared by the integration tests.
//! The references are plain loops and never touch the graph engine.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sparsematch::attention::{AttentionParams, Linear};
use sparsematch::encoder::KeypointSet;
use sparsematch::training::GroundTruthLabels;
use sparsematch::{Ablation, ModelConfig, ParamStore, Tensor};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub type Mat = Vec<Vec<f64>>;

pub fn to_mat(t: &Tensor<f64>) -> Mat {
    t.to_rows()
}

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    let (n, p) = (b.len(), b[0].len());
    a.iter()
        .map(|row| (0..p).map(|j| (0..n).map(|k| row[k] * b[k][j]).sum()).collect())
        .collect()
}

fn linear(store: &ParamStore<f64>, l: &Linear, x: &Mat) -> Mat {
    let w = to_mat(store.value(l.weight));
    let b = store.value(l.bias).data().to_vec();
    matmul(x, &w)
        .into_iter()
        .map(|r| r.iter().zip(&b).map(|(v, b)| v + b).collect())
        .collect()
}

/// Plain multi-head scaled dot-product attention with no value weighting,
/// merged by the output projection.
pub fn reference_attention(store: &ParamStore<f64>, p: &AttentionParams, x: &Mat, y: &Mat) -> Mat {
    let dh = p.head_dim() as f64;
    let mut cat: Mat = vec![Vec::new(); x.len()];
    for h in 0..p.heads {
        let q = linear(store, &p.query[h], x);
        let k = linear(store, &p.key[h], y);
        let v = linear(store, &p.value[h], y);
        for (i, qi) in q.iter().enumerate() {
            let scores: Vec<f64> = k
                .iter()
                .map(|kj| qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() / dh.sqrt())
                .collect();
            let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
            let z: f64 = e.iter().sum();
            let mut out = vec![0.0; v[0].len()];
            for (ej, vj) in e.iter().zip(&v) {
                for (o, val) in out.iter_mut().zip(vj) {
                    *o += ej / z * val;
                }
            }
            cat[i].extend(out);
        }
    }
    linear(store, &p.merge, &cat)
}

/// Probability-domain Sinkhorn with the dustbin marginals, in f64.
pub fn brute_force_sinkhorn(s_hat: &Mat, iterations: usize) -> Mat {
    let (m1, n1) = (s_hat.len(), s_hat[0].len());
    let (m, n) = ((m1 - 1) as f64, (n1 - 1) as f64);
    let mu: Vec<f64> = (0..m1).map(|i| if i + 1 == m1 { n } else { 1.0 }).collect();
    let nu: Vec<f64> = (0..n1).map(|j| if j + 1 == n1 { m } else { 1.0 }).collect();
    let shift = s_hat.iter().flatten().cloned().fold(f64::NEG_INFINITY, f64::max);
    let k: Mat = s_hat
        .iter()
        .map(|r| r.iter().map(|s| (s - shift).exp()).collect())
        .collect();
    let mut a = vec![1.0; m1];
    let mut b = vec![1.0; n1];
    for _ in 0..iterations {
        for i in 0..m1 {
            a[i] = mu[i] / (0..n1).map(|j| k[i][j] * b[j]).sum::<f64>();
        }
        for j in 0..n1 {
            b[j] = nu[j] / (0..m1).map(|i| k[i][j] * a[i]).sum::<f64>();
        }
    }
    (0..m1)
        .map(|i| (0..n1).map(|j| a[i] * k[i][j] * b[j]).collect())
        .collect()
}

/// Greedy suppression written from scratch: repeatedly take the best
/// remaining score (lowest index on ties), keep it if it is at least `r`
/// from everything kept so far.
pub fn brute_force_greedy(scores: &[f64], positions: &[[f64; 2]], k: usize, r: f64) -> Vec<usize> {
    let mut remaining: Vec<usize> = (0..scores.len()).collect();
    let mut kept: Vec<usize> = Vec::new();
    while kept.len() < k && !remaining.is_empty() {
        let mut best = 0;
        for (slot, &i) in remaining.iter().enumerate() {
            let b = remaining[best];
            if scores[i] > scores[b] || (scores[i] == scores[b] && i < b) {
                best = slot;
            }
        }
        let i = remaining.remove(best);
        let far = kept.iter().all(|&j| {
            let dx = positions[i][0] - positions[j][0];
            let dy = positions[i][1] - positions[j][1];
            (dx * dx + dy * dy).sqrt() >= r
        });
        if far {
            kept.push(i);
        }
    }
    kept
}

/// Smallest configuration that exercises every module.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        dim: 8,
        heads: 2,
        ica_layers: 1,
        units: 2,
        k: 3,
        sinkhorn_iters: 20,
        ablation: Ablation::default(),
    }
}

pub fn random_set<R: Rng>(rng: &mut R, m: usize, dim: usize) -> KeypointSet<f64> {
    let positions = (0..m)
        .map(|_| [rng.gen_range(0.0..64.0), rng.gen_range(0.0..48.0)])
        .collect();
    KeypointSet::new(positions, Tensor::uniform(m, dim, 1.0, rng), 64.0, 48.0).unwrap()
}

/// Hand-made consistent labels for six keypoints per side.
pub fn tiny_labels() -> GroundTruthLabels {
    GroundTruthLabels {
        matches: vec![(0, 2), (1, 0), (3, 4)],
        non_repeatable_a: vec![2, 5],
        non_repeatable_b: vec![1, 5],
    }
}

pub fn permute_rows(t: &Tensor<f64>, perm: &[usize]) -> Tensor<f64> {
    t.gather_rows(perm).unwrap()
}

pub fn max_abs(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.max_abs_diff(b)
}

/// End-to-end finite-difference check of the hybrid loss on the tiny
/// configuration with M = N = 6, over `samples` random parameter entries.
pub fn end_to_end_gradcheck(seed: u64, samples: usize) -> sparsematch::gradcheck::GradReport {
    use sparsematch::gradcheck::check_params;
    use sparsematch::synth::PairSample;
    use sparsematch::training::pair_loss;
    use sparsematch::{ForwardOptions, Model64};

    let mut r = rng(seed);
    let model = Model64::new(tiny_config(), seed).unwrap();
    let pair = PairSample {
        kps_a: random_set(&mut r, 6, 8),
        kps_b: random_set(&mut r, 6, 8),
        proj_ab: Vec::new(),
        proj_ba: Vec::new(),
        labels: tiny_labels(),
    };
    let opts = ForwardOptions::training(&model.config);
    let ids: Vec<_> = model.store.ids().collect();
    let entries: Vec<_> = (0..samples)
        .map(|_| {
            let id = ids[r.gen_range(0..ids.len())];
            (id, r.gen_range(0..model.store.value(id).len()))
        })
        .collect();
    check_params(&model.store, &entries, 1e-5, |g, store| {
        let mut m = model.clone();
        m.store = store.clone();
        Ok(pair_loss(g, &m, &pair, &opts, 5.0, false)?.total)
    })
    .unwrap()
}

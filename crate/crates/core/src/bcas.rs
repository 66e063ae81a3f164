//! Bilateral context-aware sampling: matchability prediction from per-keypoint
//! features plus matchability-weighted global context of both images, then
//! greedy top-k selection with a non-maximum-suppression radius.

use std::cmp::Ordering;

use rand::seq::index;
use rand::Rng;

use crate::attention::{Linear, RowNorm};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{ParamId, ParamStore, Tensor, Var};
use crate::Graph;

/// Radius factor applied to the mean pairwise keypoint distance.
pub const NMS_SIGMA: f64 = 5e-2;

/// Keypoints sampled per 2000 at test time.
pub const TEST_K_PER_2000: usize = 128;

/// Lower clamp on the test-time sample size.
pub const TEST_K_MIN: usize = 16;

/// Per-keypoint matchability scores in `[0,1]`, an M×1 column on the graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MatchabilityVector {
    pub scores: Var,
    pub layer: usize,
}

impl MatchabilityVector {
    /// The all-ones vector that seeds the first sampling unit.
    pub fn ones<T: Scalar>(g: &mut Graph<T>, len: usize, layer: usize) -> Self {
        Self {
            scores: g.leaf(Tensor::ones(len, 1)),
            layer,
        }
    }

    pub fn values<T: Scalar>(&self, g: &Graph<T>) -> Vec<f64> {
        g.value(self.scores).data().iter().map(|v| v.as_f64()).collect()
    }
}

/// Sampled bottleneck indices per image (descending score order) and the
/// matching gathered scores.
#[derive(Clone, Debug, PartialEq)]
pub struct BottleneckSelection {
    pub indices_a: Vec<usize>,
    pub indices_b: Vec<usize>,
    pub gamma_a: Var,
    pub gamma_b: Var,
}

/// `Σ_i softmax(γ)_i · F_i`, a 1×D summary of one image.
pub fn weighted_global_pool<T: Scalar>(g: &mut Graph<T>, features: Var, gamma: MatchabilityVector) -> Result<Var> {
    let (m, _) = g.shape(features);
    let sg = g.shape(gamma.scores);
    if sg != (m, 1) {
        return Err(Error::dim("weighted_global_pool", (m, 1), sg));
    }
    let row = g.transpose(gamma.scores);
    let w = g.softmax_rows(row);
    g.matmul(w, features)
}

/// Linear layer, context normalization with learnable affine, ReLU.
#[derive(Clone, Debug)]
pub struct CnBlock {
    pub linear: Linear,
    pub norm: RowNorm,
}

impl CnBlock {
    fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            linear: Linear::new(store, &format!("{name}.linear"), fan_in, fan_out, rng),
            norm: RowNorm::new(store, &format!("{name}.cn"), fan_out),
        }
    }

    fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let h = self.linear.forward(g, store, x)?;
        let n = g.context_normalize(h)?;
        let gain = g.param(store, self.norm.gain);
        let bias = g.param(store, self.norm.bias);
        let n = g.mul_row(n, gain)?;
        let n = g.add_row(n, bias)?;
        Ok(g.relu(n))
    }
}

/// Matchability predictor: three CN blocks and a scoring layer on the trunk,
/// plus a linear shortcut from the input, summed and squashed by a sigmoid.
///
/// With bilateral context the input is `F_i ∥ f_self ∥ f_other` (3D wide) and
/// the five layers are 3D→3D, 3D→D, D→D, D→1 and the 3D→1 shortcut. Without
/// it the input is `F_i` alone and every 3D becomes D.
#[derive(Clone, Debug)]
pub struct PredictorParams {
    pub bilateral: bool,
    pub blocks: Vec<CnBlock>,
    pub head: Linear,
    pub shortcut: Linear,
}

impl PredictorParams {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        bilateral: bool,
        rng: &mut R,
    ) -> Self {
        let wide = if bilateral { 3 * dim } else { dim };
        let blocks = vec![
            CnBlock::new(store, &format!("{name}.block0"), wide, wide, rng),
            CnBlock::new(store, &format!("{name}.block1"), wide, dim, rng),
            CnBlock::new(store, &format!("{name}.block2"), dim, dim, rng),
        ];
        let head = Linear::new(store, &format!("{name}.head"), dim, 1, rng);
        let shortcut = Linear::new(store, &format!("{name}.shortcut"), wide, 1, rng);
        Self {
            bilateral,
            blocks,
            head,
            shortcut,
        }
    }

    /// `(fan_in, fan_out)` of the five linear layers in order.
    pub fn channel_signatures(&self) -> Vec<(usize, usize)> {
        self.blocks
            .iter()
            .map(|b| &b.linear)
            .chain([&self.head, &self.shortcut])
            .map(|l| (l.fan_in, l.fan_out))
            .collect()
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for b in &self.blocks {
            ids.extend([b.linear.weight, b.linear.bias, b.norm.gain, b.norm.bias]);
        }
        ids.extend([
            self.head.weight,
            self.head.bias,
            self.shortcut.weight,
            self.shortcut.bias,
        ]);
        ids
    }
}

/// New matchability scores for one image from its features and the pooled
/// context vectors of both images.
pub fn predict_matchability<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    params: &PredictorParams,
    features: Var,
    pooled_self: Var,
    pooled_other: Var,
    layer: usize,
) -> Result<MatchabilityVector> {
    let m = g.shape(features).0;
    let input = if params.bilateral {
        let s = g.repeat_rows(pooled_self, m)?;
        let o = g.repeat_rows(pooled_other, m)?;
        g.concat_cols(&[features, s, o])?
    } else {
        features
    };
    let mut h = input;
    for block in &params.blocks {
        h = block.forward(g, store, h)?;
    }
    let trunk = params.head.forward(g, store, h)?;
    let skip = params.shortcut.forward(g, store, input)?;
    let logit = g.add(trunk, skip)?;
    Ok(MatchabilityVector {
        scores: g.sigmoid(logit),
        layer,
    })
}

/// `σ` times the mean Euclidean distance over ordered pairs of distinct
/// keypoints. Fewer than two keypoints give radius 0.
pub fn nms_radius(positions: &[[f64; 2]], sigma: f64) -> f64 {
    let m = positions.len();
    if m < 2 {
        log::warn!("nms radius requested for {m} keypoint(s); suppression disabled");
        return 0.0;
    }
    let mut total = 0.0;
    for i in 0..m {
        for j in i + 1..m {
            total += distance(positions[i], positions[j]);
        }
    }
    sigma * total / ((m * (m - 1) / 2) as f64)
}

#[inline]
pub(crate) fn distance(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Indices sorted by descending score, ties by ascending index.
pub fn rank_by_score(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| match scores[j].partial_cmp(&scores[i]) {
        Some(Ordering::Equal) | None => i.cmp(&j),
        Some(o) => o,
    });
    order
}

/// Greedy top-k with suppression: scan by descending score and accept a
/// keypoint when it is at least `radius` from every accepted one, until `k`
/// are accepted or candidates run out.
pub fn sample_matchable(scores: &[f64], positions: &[[f64; 2]], k: usize, radius: f64) -> Vec<usize> {
    let mut accepted: Vec<usize> = Vec::with_capacity(k.min(scores.len()));
    for i in rank_by_score(scores) {
        if accepted.len() >= k {
            break;
        }
        if accepted.iter().all(|&a| distance(positions[a], positions[i]) >= radius) {
            accepted.push(i);
        }
    }
    accepted
}

/// `k` distinct indices drawn uniformly (the random-sampling ablation).
pub fn sample_random<R: Rng + ?Sized>(len: usize, k: usize, rng: &mut R) -> Vec<usize> {
    index::sample(rng, len, k.min(len)).into_vec()
}

/// Test-time sample size `floor(128·n/2000)` clamped to `[16, n]`.
pub fn test_time_k(num_keypoints: usize) -> usize {
    (TEST_K_PER_2000 * num_keypoints / 2000)
        .max(TEST_K_MIN)
        .min(num_keypoints)
}

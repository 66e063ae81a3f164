//! Weighted multi-head attentional aggregation, the message-passing primitive
//! shared by the dense initialization layers and the bottleneck layers.
//!
//! `weighted_attention(X, Y, w)` computes, per head, `softmax(Q Kᵀ / √d) Diag(w) V`
//! with `Q` projected from `X` and `K`, `V` from `Y`. The weights rescale values
//! after the softmax, so a zero weight silences an element's value without
//! removing it from the normalization. `aggregate` wraps this in a residual
//! feed-forward update: `X + FFN(X ∥ attention)`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{ParamId, ParamStore, Tensor, Var};
use crate::Graph;

/// Query rows processed together by the fused inference kernel.
const FUSED_CHUNK_ROWS: usize = 256;

/// Affine map `x · W + b` with `W` stored in×out.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let weight = store.add(format!("{name}.weight"), Tensor::uniform(fan_in, fan_out, bound, rng));
        let bias = store.add(format!("{name}.bias"), Tensor::uniform(1, fan_out, bound, rng));
        Self {
            weight,
            bias,
            fan_in,
            fan_out,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let y = g.matmul(x, w)?;
        g.add_row(y, b)
    }

    /// Sets weight and bias to zero, making the layer output identically zero.
    pub fn zero<T: Scalar>(&self, store: &mut ParamStore<T>) {
        for id in [self.weight, self.bias] {
            store
                .get_mut(id)
                .value
                .data_mut()
                .iter_mut()
                .for_each(|v| *v = T::zero());
        }
    }
}

/// Per-row normalization over channels with a learnable gain and bias.
/// It does not mix keypoints, unlike context normalization.
#[derive(Clone, Debug)]
pub struct RowNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl RowNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, width: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), Tensor::ones(1, width)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(1, width)),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let t = g.transpose(x);
        let n = g.context_normalize(t)?;
        let n = g.transpose(n);
        let gain = g.param(store, self.gain);
        let bias = g.param(store, self.bias);
        let y = g.mul_row(n, gain)?;
        g.add_row(y, bias)
    }
}

/// Learnable weights of one attentional aggregation.
#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub dim: usize,
    pub heads: usize,
    pub query: Vec<Linear>,
    pub key: Vec<Linear>,
    pub value: Vec<Linear>,
    pub merge: Linear,
    pub ffn_in: Linear,
    pub ffn_norm: RowNorm,
    pub ffn_out: Linear,
}

impl AttentionParams {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "feature width {dim} is not divisible by {heads} heads"
            )));
        }
        let head_dim = dim / heads;
        let mut query = Vec::with_capacity(heads);
        let mut key = Vec::with_capacity(heads);
        let mut value = Vec::with_capacity(heads);
        for h in 0..heads {
            query.push(Linear::new(store, &format!("{name}.head{h}.query"), dim, head_dim, rng));
            key.push(Linear::new(store, &format!("{name}.head{h}.key"), dim, head_dim, rng));
            value.push(Linear::new(store, &format!("{name}.head{h}.value"), dim, head_dim, rng));
        }
        let merge = Linear::new(store, &format!("{name}.merge"), dim, dim, rng);
        let ffn_in = Linear::new(store, &format!("{name}.ffn.0"), 2 * dim, 2 * dim, rng);
        let ffn_norm = RowNorm::new(store, &format!("{name}.ffn.norm"), 2 * dim);
        let ffn_out = Linear::new(store, &format!("{name}.ffn.1"), 2 * dim, dim, rng);
        Ok(Self {
            dim,
            heads,
            query,
            key,
            value,
            merge,
            ffn_in,
            ffn_norm,
            ffn_out,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}

/// Value weights of an aggregation: all ones, or an N×1 column of
/// nonnegative scores living on the graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WeightVector {
    Ones,
    Scores(Var),
}

fn check_inputs<T: Scalar>(g: &Graph<T>, params: &AttentionParams, x: Var, y: Var, w: WeightVector) -> Result<()> {
    let (sx, sy) = (g.shape(x), g.shape(y));
    if sx.1 != params.dim {
        return Err(Error::dim("attention query input", sx, (sx.0, params.dim)));
    }
    if sy.1 != params.dim {
        return Err(Error::dim("attention key input", sy, (sy.0, params.dim)));
    }
    if sy.0 == 0 {
        return Err(Error::Contract("attention over an empty set".into()));
    }
    if let WeightVector::Scores(wv) = w {
        let sw = g.shape(wv);
        if sw != (sy.0, 1) {
            return Err(Error::dim("attention weights", sw, (sy.0, 1)));
        }
    }
    Ok(())
}

/// Per-head outputs `softmax(Q_h K_hᵀ/√d) Diag(w) V_h`, each M×(D/h), before merging.
pub fn weighted_attention_heads<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    params: &AttentionParams,
    x: Var,
    y: Var,
    w: WeightVector,
) -> Result<Vec<Var>> {
    check_inputs(g, params, x, y, w)?;
    let (m, n) = (g.shape(x).0, g.shape(y).0);
    g.count_score_evals((m * n) as u64);
    let scale = T::one() / T::of(params.head_dim() as f64).sqrt();
    let mut heads = Vec::with_capacity(params.heads);
    for h in 0..params.heads {
        let q = params.query[h].forward(g, store, x)?;
        let k = params.key[h].forward(g, store, y)?;
        let mut v = params.value[h].forward(g, store, y)?;
        if let WeightVector::Scores(wv) = w {
            v = g.mul_col(v, wv)?;
        }
        let out = if g.grad_enabled() {
            let s = g.matmul_t(q, k)?;
            let s = g.scale(s, scale);
            let p = g.softmax_rows(s);
            g.matmul(p, v)?
        } else {
            fused_attention(g, q, k, v, scale)
        };
        heads.push(out);
    }
    Ok(heads)
}

/// Row-chunked `softmax(q kᵀ · scale) v` that never holds the full score matrix.
fn fused_attention<T: Scalar>(g: &mut Graph<T>, q: Var, k: Var, v: Var, scale: T) -> Var {
    let (qv, kv, vv) = (g.value(q), g.value(k), g.value(v));
    let (m, n, d) = (qv.rows(), kv.rows(), vv.cols());
    let mut out = Tensor::zeros(m, d);
    let chunk = FUSED_CHUNK_ROWS.min(m.max(1));
    let mut scores = vec![T::zero(); chunk * n];
    for start in (0..m).step_by(chunk) {
        let rows = chunk.min(m - start);
        for r in 0..rows {
            let qrow = qv.row(start + r);
            let srow = &mut scores[r * n..(r + 1) * n];
            for (j, s) in srow.iter_mut().enumerate() {
                *s = crate::tensor::dot(qrow, kv.row(j)) * scale;
            }
            crate::tensor::softmax_in_place(srow);
            let orow = out.row_mut(start + r);
            for (j, &p) in srow.iter().enumerate() {
                for (o, &val) in orow.iter_mut().zip(vv.row(j)) {
                    *o += p * val;
                }
            }
        }
    }
    g.note_transient(chunk * n * std::mem::size_of::<T>());
    g.leaf(out)
}

/// Multi-head weighted attention, heads concatenated then merge-projected. M×D.
pub fn weighted_attention<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    params: &AttentionParams,
    x: Var,
    y: Var,
    w: WeightVector,
) -> Result<Var> {
    let heads = weighted_attention_heads(g, store, params, x, y, w)?;
    let cat = if heads.len() == 1 {
        heads[0]
    } else {
        g.concat_cols(&heads)?
    };
    params.merge.forward(g, store, cat)
}

/// Residual attentional aggregation `X + FFN(X ∥ weighted_attention(X, Y, w))`.
pub fn aggregate<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    params: &AttentionParams,
    x: Var,
    y: Var,
    w: WeightVector,
) -> Result<Var> {
    let message = weighted_attention(g, store, params, x, y, w)?;
    let cat = g.concat_cols(&[x, message])?;
    let h = params.ffn_in.forward(g, store, cat)?;
    let h = params.ffn_norm.forward(g, store, h)?;
    let h = g.relu(h);
    let delta = params.ffn_out.forward(g, store, h)?;
    g.add(x, delta)
}

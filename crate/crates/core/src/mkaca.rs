//! Bottleneck message passing: all keypoints of an image are infused into a
//! few sampled bottlenecks, the bottlenecks refine among themselves, and the
//! result is broadcast back to every keypoint from both images' bottlenecks.

use rand::Rng;

use crate::attention::{aggregate, AttentionParams, WeightVector};
use crate::bcas::{BottleneckSelection, MatchabilityVector};
use crate::encoder::LayerState;
use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::{ParamStore, Var};
use crate::Graph;

/// Attention weights of one sparse layer, shared by both images.
#[derive(Clone, Debug)]
pub struct MkacaLayerParams {
    pub infuse: AttentionParams,
    pub refine: AttentionParams,
    pub broadcast_self: AttentionParams,
    pub broadcast_cross: AttentionParams,
}

impl MkacaLayerParams {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            infuse: AttentionParams::new(store, &format!("{name}.infuse"), dim, heads, rng)?,
            refine: AttentionParams::new(store, &format!("{name}.refine"), dim, heads, rng)?,
            broadcast_self: AttentionParams::new(store, &format!("{name}.broadcast_self"), dim, heads, rng)?,
            broadcast_cross: AttentionParams::new(store, &format!("{name}.broadcast_cross"), dim, heads, rng)?,
        })
    }
}

fn weights(gamma: Var, vanilla: bool) -> WeightVector {
    if vanilla {
        WeightVector::Ones
    } else {
        WeightVector::Scores(gamma)
    }
}

pub fn gather_bottlenecks<T: Scalar>(g: &mut Graph<T>, features: Var, indices: &[usize]) -> Result<Var> {
    g.gather_rows(features, indices)
}

/// Bottlenecks attend over every keypoint of their own image, values weighted by γ.
pub fn infuse<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    params: &MkacaLayerParams,
    bottlenecks: Var,
    all: Var,
    gamma: WeightVector,
) -> Result<Var> {
    aggregate(g, store, &params.infuse, bottlenecks, all, gamma)
}

/// Self-attention among the bottlenecks of one image.
pub fn refine<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    params: &MkacaLayerParams,
    bottlenecks: Var,
) -> Result<Var> {
    aggregate(g, store, &params.refine, bottlenecks, bottlenecks, WeightVector::Ones)
}

/// Every keypoint attends to its own image's bottlenecks, then to the other image's.
#[allow(clippy::too_many_arguments)]
pub fn broadcast_back<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    params: &MkacaLayerParams,
    all: Var,
    bottlenecks_self: Var,
    bottlenecks_other: Var,
    gamma_self: WeightVector,
    gamma_other: WeightVector,
) -> Result<Var> {
    let h = aggregate(g, store, &params.broadcast_self, all, bottlenecks_self, gamma_self)?;
    aggregate(g, store, &params.broadcast_cross, h, bottlenecks_other, gamma_other)
}

/// One full sparse layer on both images.
///
/// `gamma_a`/`gamma_b` are the full-length scores the selection was drawn
/// from; their gathered entries in `selection` weight the back-broadcast.
#[allow(clippy::too_many_arguments)]
pub fn mkaca_layer<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    params: &MkacaLayerParams,
    state: LayerState,
    selection: &BottleneckSelection,
    gamma_a: MatchabilityVector,
    gamma_b: MatchabilityVector,
    vanilla_attention: bool,
) -> Result<LayerState> {
    let (fa, fb) = (state.features_a, state.features_b);
    let ma = gather_bottlenecks(g, fa, &selection.indices_a)?;
    let mb = gather_bottlenecks(g, fb, &selection.indices_b)?;

    let ma = infuse(g, store, params, ma, fa, weights(gamma_a.scores, vanilla_attention))?;
    let mb = infuse(g, store, params, mb, fb, weights(gamma_b.scores, vanilla_attention))?;
    let ma = refine(g, store, params, ma)?;
    let mb = refine(g, store, params, mb)?;

    let wa = weights(selection.gamma_a, vanilla_attention);
    let wb = weights(selection.gamma_b, vanilla_attention);
    let out_a = broadcast_back(g, store, params, fa, ma, mb, wa, wb)?;
    let out_b = broadcast_back(g, store, params, fb, mb, ma, wb, wa)?;
    Ok(LayerState {
        features_a: out_a,
        features_b: out_b,
        layer: state.layer + 1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(dim: usize) -> (ParamStore<f64>, MkacaLayerParams, ChaCha8Rng) {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new();
        let p = MkacaLayerParams::new(&mut store, "unit0", dim, 2, &mut rng).unwrap();
        (store, p, rng)
    }

    #[test]
    fn gather_reorders_and_checks_bounds() {
        let mut g = Graph::<f64>::new();
        let f = g.leaf(Tensor::from_f64_rows(&[[0.0], [1.0], [2.0]]).unwrap());
        let s = gather_bottlenecks(&mut g, f, &[2, 0]).unwrap();
        assert_eq!(g.value(s).data(), &[2.0, 0.0]);
        assert!(gather_bottlenecks(&mut g, f, &[3]).is_err());
    }

    #[test]
    fn broadcast_with_zero_weights_and_zero_ffn_is_identity() {
        let (mut store, p, mut rng) = setup(8);
        p.broadcast_self.ffn_out.zero(&mut store);
        p.broadcast_cross.ffn_out.zero(&mut store);
        let mut g = Graph::new();
        let all = g.leaf(Tensor::uniform(7, 8, 1.0, &mut rng));
        let s = g.leaf(Tensor::uniform(3, 8, 1.0, &mut rng));
        let o = g.leaf(Tensor::uniform(3, 8, 1.0, &mut rng));
        let z = g.leaf(Tensor::zeros(3, 1));
        let out = broadcast_back(
            &mut g,
            &store,
            &p,
            all,
            s,
            o,
            WeightVector::Scores(z),
            WeightVector::Scores(z),
        )
        .unwrap();
        assert_eq!(g.value(out), g.value(all));
    }

    #[test]
    fn broadcast_counts_m_times_k_per_pass() {
        let (store, p, mut rng) = setup(8);
        let mut g = Graph::inference();
        let all = g.leaf(Tensor::uniform(50, 8, 1.0, &mut rng));
        let s = g.leaf(Tensor::uniform(4, 8, 1.0, &mut rng));
        let o = g.leaf(Tensor::uniform(6, 8, 1.0, &mut rng));
        broadcast_back(&mut g, &store, &p, all, s, o, WeightVector::Ones, WeightVector::Ones).unwrap();
        assert_eq!(g.score_evals(), 50 * 4 + 50 * 6);
    }

    #[test]
    fn singleton_refine_keeps_shape() {
        let (store, p, mut rng) = setup(8);
        let mut g = Graph::new();
        let m = g.leaf(Tensor::uniform(1, 8, 1.0, &mut rng));
        let r = refine(&mut g, &store, &p, m).unwrap();
        assert_eq!(g.shape(r), (1, 8));
    }

    #[test]
    fn identical_sides_give_identical_outputs() {
        let (store, p, mut rng) = setup(8);
        let x = Tensor::uniform(9, 8, 1.0, &mut rng);
        let gamma = Tensor::uniform(9, 1, 0.5, &mut rng).map(|v| v + 0.5);
        let mut g = Graph::new();
        let fa = g.leaf(x.clone());
        let fb = g.leaf(x);
        let ga = MatchabilityVector {
            scores: g.leaf(gamma.clone()),
            layer: 1,
        };
        let gb = MatchabilityVector {
            scores: g.leaf(gamma),
            layer: 1,
        };
        let idx = vec![4, 1, 7];
        let sel = BottleneckSelection {
            gamma_a: g.gather_rows(ga.scores, &idx).unwrap(),
            gamma_b: g.gather_rows(gb.scores, &idx).unwrap(),
            indices_a: idx.clone(),
            indices_b: idx,
        };
        let state = LayerState {
            features_a: fa,
            features_b: fb,
            layer: 1,
        };
        let out = mkaca_layer(&mut g, &store, &p, state, &sel, ga, gb, false).unwrap();
        assert_eq!(g.value(out.features_a), g.value(out.features_b));
        assert_eq!(g.shape(out.features_a), (9, 8));
        assert_eq!(g.score_evals(), 2 * (9 * 3 + 3 * 3 + 9 * 3 + 9 * 3));
    }
}

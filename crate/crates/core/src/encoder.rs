//! Keypoint sets, position encoding, and the dense initialization layers.

use rand::Rng;

use crate::attention::{aggregate, AttentionParams, Linear, WeightVector};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{ParamStore, Tensor, Var};
use crate::Graph;

/// Hidden widths of the position encoder MLP (2 → 32 → 64 → D).
pub const ENCODER_HIDDEN: [usize; 2] = [32, 64];

/// One image's keypoints: pixel positions, descriptors, and image size.
#[derive(Clone, Debug, PartialEq)]
pub struct KeypointSet<T> {
    pub positions: Vec<[f64; 2]>,
    pub descriptors: Tensor<T>,
    pub width: f64,
    pub height: f64,
}

impl<T: Scalar> KeypointSet<T> {
    pub fn new(positions: Vec<[f64; 2]>, descriptors: Tensor<T>, width: f64, height: f64) -> Result<Self> {
        let set = Self {
            positions,
            descriptors,
            width,
            height,
        };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<()> {
        if self.positions.is_empty() {
            return Err(Error::Contract("keypoint set is empty".into()));
        }
        if self.descriptors.rows() != self.positions.len() {
            return Err(Error::dim(
                "keypoint set",
                (self.positions.len(), 2),
                self.descriptors.shape(),
            ));
        }
        if !(self.width > 0.0 && self.height > 0.0) {
            return Err(Error::Contract(format!(
                "image size must be positive, got {}x{}",
                self.width, self.height
            )));
        }
        for (i, p) in self.positions.iter().enumerate() {
            let inside = (0.0..=self.width).contains(&p[0]) && (0.0..=self.height).contains(&p[1]);
            if !inside {
                return Err(Error::Contract(format!(
                    "keypoint {i} at ({}, {}) lies outside the {}x{} image",
                    p[0], p[1], self.width, self.height
                )));
            }
        }
        if !self.descriptors.is_finite() {
            return Err(Error::Contract("descriptors contain non-finite values".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.descriptors.cols()
    }

    pub fn cast<U: Scalar>(&self) -> KeypointSet<U> {
        KeypointSet {
            positions: self.positions.clone(),
            descriptors: self.descriptors.cast(),
            width: self.width,
            height: self.height,
        }
    }
}

/// Per-image feature matrices at some layer; both have width D.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerState {
    pub features_a: Var,
    pub features_b: Var,
    pub layer: usize,
}

impl LayerState {
    pub fn swapped(self) -> Self {
        Self {
            features_a: self.features_b,
            features_b: self.features_a,
            layer: self.layer,
        }
    }
}

#[derive(Clone, Debug)]
pub struct PositionEncoder {
    pub layers: Vec<Linear>,
}

impl PositionEncoder {
    pub fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, dim: usize, rng: &mut R) -> Self {
        let widths = [2, ENCODER_HIDDEN[0], ENCODER_HIDDEN[1], dim];
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("encoder.{i}"), w[0], w[1], rng))
            .collect();
        Self { layers }
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.fan_out)
    }
}

/// Maps pixel coordinates to `[-1, 1]` per axis.
pub fn normalize_positions<T: Scalar>(positions: &[[f64; 2]], width: f64, height: f64) -> Tensor<T> {
    let data = positions
        .iter()
        .flat_map(|p| [T::of(2.0 * p[0] / width - 1.0), T::of(2.0 * p[1] / height - 1.0)])
        .collect();
    Tensor::from_vec(positions.len(), 2, data).expect("two columns per position")
}

/// MLP embedding of normalized keypoint coordinates, M×D.
pub fn encode_positions<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    encoder: &PositionEncoder,
    positions: &[[f64; 2]],
    image_size: (f64, f64),
) -> Result<Var> {
    let mut h = g.leaf(normalize_positions(positions, image_size.0, image_size.1));
    let last = encoder.layers.len() - 1;
    for (i, layer) in encoder.layers.iter().enumerate() {
        h = layer.forward(g, store, h)?;
        if i < last {
            h = g.relu(h);
        }
    }
    Ok(h)
}

/// Initial features `descriptors + encode(positions)` from a descriptor node
/// already on the graph.
pub fn init_features_from<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    encoder: &PositionEncoder,
    descriptors: Var,
    positions: &[[f64; 2]],
    image_size: (f64, f64),
) -> Result<Var> {
    let (rows, cols) = g.shape(descriptors);
    if cols != encoder.out_dim() || rows != positions.len() {
        return Err(Error::dim(
            "init_features",
            (rows, cols),
            (positions.len(), encoder.out_dim()),
        ));
    }
    let enc = encode_positions(g, store, encoder, positions, image_size)?;
    g.add(descriptors, enc)
}

pub fn init_features<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    encoder: &PositionEncoder,
    kps: &KeypointSet<T>,
) -> Result<Var> {
    let d = g.leaf(kps.descriptors.clone());
    init_features_from(g, store, encoder, d, &kps.positions, (kps.width, kps.height))
}

/// Dense self- then cross-aggregation weights of one initialization layer.
#[derive(Clone, Debug)]
pub struct IcaLayerParams {
    pub self_attn: AttentionParams,
    pub cross_attn: AttentionParams,
}

impl IcaLayerParams {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            self_attn: AttentionParams::new(store, &format!("{name}.self"), dim, heads, rng)?,
            cross_attn: AttentionParams::new(store, &format!("{name}.cross"), dim, heads, rng)?,
        })
    }
}

/// One dense layer: intra-image then inter-image aggregation, all-one weights,
/// same weights for both images.
pub fn ica_layer<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    params: &IcaLayerParams,
    state: LayerState,
) -> Result<LayerState> {
    let (a, b) = (state.features_a, state.features_b);
    let a1 = aggregate(g, store, &params.self_attn, a, a, WeightVector::Ones)?;
    let b1 = aggregate(g, store, &params.self_attn, b, b, WeightVector::Ones)?;
    let a2 = aggregate(g, store, &params.cross_attn, a1, b1, WeightVector::Ones)?;
    let b2 = aggregate(g, store, &params.cross_attn, b1, a1, WeightVector::Ones)?;
    Ok(LayerState {
        features_a: a2,
        features_b: b2,
        layer: state.layer + 1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn zero_encoder(store: &mut ParamStore<f64>, enc: &PositionEncoder) {
        for l in &enc.layers {
            l.zero(store);
        }
    }

    #[test]
    fn zero_encoder_weights_give_zero_embedding_and_pass_descriptors() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f64>::new();
        let enc = PositionEncoder::new(&mut store, 32, &mut rng);
        zero_encoder(&mut store, &enc);
        let desc = Tensor::uniform(3, 32, 1.0, &mut rng);
        let kps = KeypointSet::new(vec![[1.0, 2.0], [10.0, 5.0], [0.0, 0.0]], desc.clone(), 20.0, 10.0).unwrap();
        let mut g = Graph::new();
        let e = encode_positions(&mut g, &store, &enc, &kps.positions, (20.0, 10.0)).unwrap();
        assert!(g.value(e).data().iter().all(|&v| v == 0.0));
        assert_eq!(g.value(e).cols(), 32);
        let f = init_features(&mut g, &store, &enc, &kps).unwrap();
        assert_eq!(g.value(f), &desc);
    }

    #[test]
    fn zero_descriptors_give_pure_encoding() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::<f64>::new();
        let enc = PositionEncoder::new(&mut store, 8, &mut rng);
        let positions = vec![[1.0, 2.0], [1.0, 2.0], [7.0, 3.0]];
        let kps = KeypointSet::new(positions.clone(), Tensor::zeros(3, 8), 8.0, 8.0).unwrap();
        let mut g = Graph::new();
        let f = init_features(&mut g, &store, &enc, &kps).unwrap();
        let e = encode_positions(&mut g, &store, &enc, &positions, (8.0, 8.0)).unwrap();
        assert_eq!(g.value(f), g.value(e));
        assert_eq!(g.value(e).row(0), g.value(e).row(1));
    }

    #[test]
    fn descriptor_width_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::<f32>::new();
        let enc = PositionEncoder::new(&mut store, 8, &mut rng);
        let kps = KeypointSet::new(vec![[1.0, 1.0]], Tensor::zeros(1, 4), 8.0, 8.0).unwrap();
        let mut g = Graph::new();
        assert!(matches!(
            init_features(&mut g, &store, &enc, &kps),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn keypoint_set_validation() {
        assert!(KeypointSet::<f32>::new(vec![], Tensor::zeros(0, 4), 8.0, 8.0).is_err());
        assert!(KeypointSet::<f32>::new(vec![[9.0, 1.0]], Tensor::zeros(1, 4), 8.0, 8.0).is_err());
        assert!(KeypointSet::<f32>::new(vec![[1.0, 1.0]], Tensor::zeros(2, 4), 8.0, 8.0).is_err());
        let nan = Tensor::from_vec(1, 1, vec![f32::NAN]).unwrap();
        assert!(KeypointSet::<f32>::new(vec![[1.0, 1.0]], nan, 8.0, 8.0).is_err());
    }

    #[test]
    fn ica_layer_is_symmetric_for_identical_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::<f64>::new();
        let layer = IcaLayerParams::new(&mut store, "ica0", 8, 2, &mut rng).unwrap();
        let x = Tensor::uniform(5, 8, 1.0, &mut rng);
        let mut g = Graph::new();
        let a = g.leaf(x.clone());
        let b = g.leaf(x);
        let out = ica_layer(
            &mut g,
            &store,
            &layer,
            LayerState {
                features_a: a,
                features_b: b,
                layer: 0,
            },
        )
        .unwrap();
        assert_eq!(g.value(out.features_a), g.value(out.features_b));
        assert_eq!(g.shape(out.features_a), (5, 8));
        assert_eq!(out.layer, 1);
    }
}

//! The full matcher: position encoding, dense layers, sampling units with
//! bottleneck attention, and the optimal-transport head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bcas::{
    nms_radius, predict_matchability, sample_matchable, sample_random, test_time_k, weighted_global_pool,
    BottleneckSelection, MatchabilityVector, PredictorParams, NMS_SIGMA,
};
use crate::encoder::{ica_layer, init_features, IcaLayerParams, KeypointSet, LayerState, PositionEncoder};
use crate::error::{Error, Result};
use crate::matching::{assignment_from_log, log_assignment, similarity, AssignmentResult, DUSTBIN_INIT};
use crate::mkaca::{mkaca_layer, MkacaLayerParams};
use crate::scalar::Scalar;
use crate::tensor::{ParamId, ParamStore, Tensor, Var};
use crate::Graph;

/// Switches that remove one ingredient of the architecture.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Ablation {
    /// Matchability predictor sees only per-keypoint features.
    pub no_bilateral_context: bool,
    /// Bottleneck attention ignores matchability weights.
    pub vanilla_attention: bool,
    /// Bottlenecks drawn uniformly at random instead of top-k with suppression.
    pub random_sampling: bool,
}

impl Ablation {
    pub fn bits(self) -> u8 {
        u8::from(self.no_bilateral_context)
            | u8::from(self.vanilla_attention) << 1
            | u8::from(self.random_sampling) << 2
    }

    pub fn from_bits(bits: u8) -> Self {
        Self {
            no_bilateral_context: bits & 1 != 0,
            vanilla_attention: bits & 2 != 0,
            random_sampling: bits & 4 != 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub dim: usize,
    pub heads: usize,
    /// Dense initialization layers.
    pub ica_layers: usize,
    /// Sampling + bottleneck-attention units.
    pub units: usize,
    /// Bottlenecks per image during training.
    pub k: usize,
    pub sinkhorn_iters: usize,
    #[serde(default)]
    pub ablation: Ablation,
}

impl ModelConfig {
    /// Small configuration that trains in minutes on one core.
    pub fn desk() -> Self {
        Self {
            dim: 32,
            heads: 4,
            ica_layers: 1,
            units: 2,
            k: 16,
            sinkhorn_iters: 100,
            ablation: Ablation::default(),
        }
    }

    /// Full-size configuration (nine layers, 128 channels).
    pub fn full() -> Self {
        Self {
            dim: 128,
            heads: 4,
            ica_layers: 3,
            units: 6,
            k: 128,
            sinkhorn_iters: 100,
            ablation: Ablation::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "dim {} must be a positive multiple of heads {}",
                self.dim, self.heads
            )));
        }
        if self.ica_layers == 0 || self.units == 0 {
            return Err(Error::Config(
                "need at least one dense layer and one sampling unit".into(),
            ));
        }
        if self.k == 0 || self.sinkhorn_iters == 0 {
            return Err(Error::Config("k and sinkhorn_iters must be positive".into()));
        }
        Ok(())
    }
}

/// How many bottlenecks each side gets.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SampleSize {
    /// `min(k, keypoints)`.
    Fixed(usize),
    /// Proportional to the keypoint count.
    TestTime,
}

impl SampleSize {
    pub fn resolve(self, num_keypoints: usize) -> usize {
        match self {
            SampleSize::Fixed(k) => k.min(num_keypoints),
            SampleSize::TestTime => test_time_k(num_keypoints),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ForwardOptions {
    pub sample_size: SampleSize,
    pub sinkhorn_iters: usize,
    /// Seeds the random-sampling ablation; unused otherwise.
    pub sample_seed: u64,
}

impl ForwardOptions {
    pub fn training(config: &ModelConfig) -> Self {
        Self {
            sample_size: SampleSize::Fixed(config.k),
            sinkhorn_iters: config.sinkhorn_iters,
            sample_seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct UnitParams {
    pub predictor: PredictorParams,
    pub mkaca: MkacaLayerParams,
}

/// Nodes produced by one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// (M+1)×(N+1) log assignment.
    pub log_assignment: Var,
    /// Predicted matchability per unit, `(image A, image B)`.
    pub gammas: Vec<(MatchabilityVector, MatchabilityVector)>,
    pub selections: Vec<BottleneckSelection>,
    pub features: LayerState,
}

/// Inference result with values pulled off the graph.
#[derive(Clone, Debug)]
pub struct Prediction<T> {
    pub assignment: AssignmentResult<T>,
    /// Matchability of the last unit, `(image A, image B)`.
    pub matchability: (Vec<f64>, Vec<f64>),
    pub selections: Vec<(Vec<usize>, Vec<usize>)>,
    pub score_evals: u64,
    pub peak_bytes: usize,
}

#[derive(Clone, Debug)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    pub encoder: PositionEncoder,
    pub ica: Vec<IcaLayerParams>,
    pub units: Vec<UnitParams>,
    pub dustbin: ParamId,
}

impl<T: Scalar> Model<T> {
    /// Fresh parameters drawn from a seeded generator; the same seed gives the
    /// same model.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = PositionEncoder::new(&mut store, config.dim, &mut rng);
        let ica = (0..config.ica_layers)
            .map(|i| IcaLayerParams::new(&mut store, &format!("ica.{i}"), config.dim, config.heads, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let bilateral = !config.ablation.no_bilateral_context;
        let units = (0..config.units)
            .map(|i| {
                let name = format!("unit.{i}");
                Ok(UnitParams {
                    predictor: PredictorParams::new(
                        &mut store,
                        &format!("{name}.predictor"),
                        config.dim,
                        bilateral,
                        &mut rng,
                    ),
                    mkaca: MkacaLayerParams::new(&mut store, &name, config.dim, config.heads, &mut rng)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let dustbin = store.add("dustbin", Tensor::scalar(T::of(DUSTBIN_INIT)));
        Ok(Self {
            config,
            store,
            encoder,
            ica,
            units,
            dustbin,
        })
    }

    /// Same architecture and values in another precision.
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config,
            store: self.store.cast(),
            encoder: self.encoder.clone(),
            ica: self.ica.clone(),
            units: self.units.clone(),
            dustbin: self.dustbin,
        }
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_scalars()
    }

    /// Builds the full forward pass for one pair on `g`.
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        a: &KeypointSet<T>,
        b: &KeypointSet<T>,
        opts: &ForwardOptions,
    ) -> Result<ForwardOutput> {
        let store = &self.store;
        let ablation = self.config.ablation;
        let fa = init_features(g, store, &self.encoder, a)?;
        let fb = init_features(g, store, &self.encoder, b)?;
        let mut state = LayerState {
            features_a: fa,
            features_b: fb,
            layer: 0,
        };
        for layer in &self.ica {
            state = ica_layer(g, store, layer, state)?;
        }

        let (ka, kb) = (opts.sample_size.resolve(a.len()), opts.sample_size.resolve(b.len()));
        let (ra, rb) = if ablation.random_sampling {
            (0.0, 0.0)
        } else {
            (nms_radius(&a.positions, NMS_SIGMA), nms_radius(&b.positions, NMS_SIGMA))
        };
        let mut rng = ChaCha8Rng::seed_from_u64(opts.sample_seed);
        let mut prev_a = MatchabilityVector::ones(g, a.len(), state.layer);
        let mut prev_b = MatchabilityVector::ones(g, b.len(), state.layer);
        let mut gammas = Vec::with_capacity(self.units.len());
        let mut selections = Vec::with_capacity(self.units.len());
        for unit in &self.units {
            let (fa, fb) = (state.features_a, state.features_b);
            let (pool_a, pool_b) = if ablation.no_bilateral_context {
                (fa, fb)
            } else {
                (
                    weighted_global_pool(g, fa, prev_a)?,
                    weighted_global_pool(g, fb, prev_b)?,
                )
            };
            let layer = state.layer + 1;
            let gamma_a = predict_matchability(g, store, &unit.predictor, fa, pool_a, pool_b, layer)?;
            let gamma_b = predict_matchability(g, store, &unit.predictor, fb, pool_b, pool_a, layer)?;

            let (indices_a, indices_b) = if ablation.random_sampling {
                (
                    sample_random(a.len(), ka, &mut rng),
                    sample_random(b.len(), kb, &mut rng),
                )
            } else {
                (
                    sample_matchable(&gamma_a.values(g), &a.positions, ka, ra),
                    sample_matchable(&gamma_b.values(g), &b.positions, kb, rb),
                )
            };
            let selection = BottleneckSelection {
                gamma_a: g.gather_rows(gamma_a.scores, &indices_a)?,
                gamma_b: g.gather_rows(gamma_b.scores, &indices_b)?,
                indices_a,
                indices_b,
            };
            state = mkaca_layer(
                g,
                store,
                &unit.mkaca,
                state,
                &selection,
                gamma_a,
                gamma_b,
                ablation.vanilla_attention,
            )?;
            gammas.push((gamma_a, gamma_b));
            selections.push(selection);
            prev_a = gamma_a;
            prev_b = gamma_b;
        }

        let s = similarity(g, state.features_a, state.features_b)?;
        let z = g.param(store, self.dustbin);
        let log_p = log_assignment(g, s, z, opts.sinkhorn_iters)?;
        Ok(ForwardOutput {
            log_assignment: log_p,
            gammas,
            selections,
            features: state,
        })
    }

    /// Forward pass without a tape, followed by match extraction.
    pub fn predict(
        &self,
        a: &KeypointSet<T>,
        b: &KeypointSet<T>,
        opts: &ForwardOptions,
        threshold: f64,
    ) -> Result<Prediction<T>> {
        let mut g = Graph::inference();
        let out = self.forward(&mut g, a, b, opts)?;
        g.check_finite()?;
        let assignment = assignment_from_log(g.value(out.log_assignment), threshold)?;
        let matchability = out
            .gammas
            .last()
            .map(|(ga, gb)| (ga.values(&g), gb.values(&g)))
            .unwrap_or_default();
        Ok(Prediction {
            assignment,
            matchability,
            selections: out
                .selections
                .iter()
                .map(|s| (s.indices_a.clone(), s.indices_b.clone()))
                .collect(),
            score_evals: g.score_evals(),
            peak_bytes: g.peak_bytes(),
        })
    }
}

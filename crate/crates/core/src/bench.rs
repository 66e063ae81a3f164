//! Wall-time, score-evaluation and peak-memory scaling of dense layers,
//! bottleneck layers, and the whole matcher.

use std::fmt::Write as _;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bcas::{rank_by_score, BottleneckSelection, MatchabilityVector};
use crate::encoder::{ica_layer, IcaLayerParams, KeypointSet, LayerState};
use crate::error::{Error, Result};
use crate::mkaca::{mkaca_layer, MkacaLayerParams};
use crate::model::{Ablation, ForwardOptions, Model, ModelConfig, SampleSize};
use crate::tensor::{ParamStore, Tensor};
use crate::Graph;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    DenseIca,
    SparseMkaca,
    FullPipeline,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::DenseIca, Variant::SparseMkaca, Variant::FullPipeline];

    pub fn name(self) -> &'static str {
        match self {
            Variant::DenseIca => "dense-ica",
            Variant::SparseMkaca => "sparse-mkaca",
            Variant::FullPipeline => "full-pipeline",
        }
    }
}

/// Score evaluations of one dense layer: self on each image, then cross both ways.
pub fn dense_layer_evals(m: usize, n: usize) -> u64 {
    let (m, n) = (m as u64, n as u64);
    m * m + n * n + 2 * m * n
}

/// Score evaluations of one bottleneck layer with `ka`/`kb` bottlenecks:
/// infusion, refinement, then back-broadcast to own and other bottlenecks.
pub fn sparse_layer_evals(m: usize, n: usize, ka: usize, kb: usize) -> u64 {
    let (m, n, ka, kb) = (m as u64, n as u64, ka as u64, kb as u64);
    m * ka + n * kb + ka * ka + kb * kb + (m + n) * (ka + kb)
}

/// Score evaluations of a full forward pass.
pub fn pipeline_evals(config: &ModelConfig, m: usize, n: usize, ka: usize, kb: usize) -> u64 {
    config.ica_layers as u64 * dense_layer_evals(m, n) + config.units as u64 * sparse_layer_evals(m, n, ka, kb)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub n: usize,
    pub k: usize,
    pub variant: Variant,
    /// Median wall time; `None` when the row was skipped as unmeasurable.
    pub wall_ms: Option<f64>,
    pub score_evals: Option<u64>,
    pub peak_bytes: Option<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    pub const CSV_HEADER: &'static str = "n,k,variant,wall_ms,score_evals,peak_bytes";

    pub fn to_csv(&self) -> String {
        let mut s = format!("{}\n", Self::CSV_HEADER);
        for r in &self.rows {
            let opt = |v: Option<String>| v.unwrap_or_else(|| "NA".into());
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                r.n,
                r.k,
                r.variant.name(),
                opt(r.wall_ms.map(|t| format!("{t:.3}"))),
                opt(r.score_evals.map(|c| c.to_string())),
                opt(r.peak_bytes.map(|b| b.to_string())),
            );
        }
        s
    }

    /// Whitespace-separated table, one block per variant separated by two
    /// blank lines so each can be addressed with gnuplot's `index`.
    pub fn to_gnuplot(&self) -> String {
        let mut s = String::new();
        for (i, v) in Variant::ALL.iter().enumerate() {
            let rows: Vec<_> = self.rows.iter().filter(|r| r.variant == *v).collect();
            if rows.is_empty() {
                continue;
            }
            if i > 0 && !s.is_empty() {
                s.push_str("\n\n");
            }
            let _ = writeln!(s, "# {} (index {i}): n wall_ms score_evals peak_bytes", v.name());
            for r in rows {
                let _ = writeln!(
                    s,
                    "{} {} {} {}",
                    r.n,
                    r.wall_ms.map_or("NaN".into(), |t| format!("{t:.3}")),
                    r.score_evals.map_or("NaN".into(), |c| c.to_string()),
                    r.peak_bytes.map_or("NaN".into(), |b| b.to_string()),
                );
            }
        }
        s
    }

    pub fn row(&self, n: usize, variant: Variant) -> Option<&BenchRow> {
        self.rows.iter().find(|r| r.n == n && r.variant == variant)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub dim: usize,
    pub heads: usize,
    pub k: usize,
    pub repetitions: usize,
    pub seed: u64,
    pub variants: Vec<Variant>,
    /// Rows whose estimated working set exceeds this are skipped.
    pub memory_budget_bytes: usize,
    /// Sinkhorn iterations in the full-pipeline rows.
    pub sinkhorn_iters: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            dim: 128,
            heads: 4,
            k: 128,
            repetitions: 3,
            seed: 0,
            variants: Variant::ALL.to_vec(),
            memory_budget_bytes: 2 << 30,
            sinkhorn_iters: 100,
        }
    }
}

impl BenchConfig {
    fn pipeline(&self) -> ModelConfig {
        ModelConfig {
            dim: self.dim,
            heads: self.heads,
            ica_layers: 3,
            units: 6,
            k: self.k,
            sinkhorn_iters: self.sinkhorn_iters,
            ablation: Ablation::default(),
        }
    }

    /// Rough upper bound on bytes held by one measurement.
    fn estimate_bytes(&self, variant: Variant, n: usize) -> usize {
        let features = 64 * n * self.dim * 4;
        match variant {
            Variant::DenseIca | Variant::SparseMkaca => features,
            // similarity, augmented scores, the f64 Sinkhorn buffers and the output
            Variant::FullPipeline => features * 3 + (n + 1) * (n + 1) * (4 * 3 + 8 * 3),
        }
    }
}

/// Forward-only scaling run with `dim = 128, heads = 4`, M = N per row.
pub fn run_scaling_benchmark(n_values: &[usize], k: usize, repetitions: usize, seed: u64) -> Result<BenchReport> {
    run_benchmark(
        &BenchConfig {
            k,
            repetitions,
            seed,
            ..BenchConfig::default()
        },
        n_values,
    )
}

pub fn run_benchmark(config: &BenchConfig, n_values: &[usize]) -> Result<BenchReport> {
    if n_values.is_empty() || n_values.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Contract(
            "n_values must be non-empty and strictly ascending".into(),
        ));
    }
    if config.repetitions < 3 {
        return Err(Error::Contract("need at least 3 repetitions".into()));
    }
    let mut rows = Vec::new();
    for &n in n_values {
        for &variant in &config.variants {
            let k = config.k.min(n);
            if config.estimate_bytes(variant, n) > config.memory_budget_bytes {
                log::warn!(
                    "{} at n = {n} exceeds the memory budget; marked unmeasurable",
                    variant.name()
                );
                rows.push(BenchRow {
                    n,
                    k,
                    variant,
                    wall_ms: None,
                    score_evals: None,
                    peak_bytes: None,
                });
                continue;
            }
            let mut fixture = Fixture::new(config, variant, n)?;
            fixture.run()?; // warmup
            let mut times = Vec::with_capacity(config.repetitions);
            let mut last = (0, 0);
            for _ in 0..config.repetitions {
                let start = Instant::now();
                last = fixture.run()?;
                times.push(start.elapsed().as_secs_f64() * 1e3);
            }
            times.sort_by(f64::total_cmp);
            log::info!("{} n = {n}: {:.2} ms", variant.name(), times[times.len() / 2]);
            rows.push(BenchRow {
                n,
                k,
                variant,
                wall_ms: Some(times[times.len() / 2]),
                score_evals: Some(last.0),
                peak_bytes: Some(last.1),
            });
        }
    }
    Ok(BenchReport { rows })
}

/// Instrumented score-evaluation count of one forward run, without timing.
/// Counts do not depend on width, so a narrow `config.dim` keeps this cheap.
pub fn count_score_evals(config: &BenchConfig, variant: Variant, m: usize, n: usize) -> Result<u64> {
    let mut f = Fixture::with_sizes(config, variant, m, n)?;
    Ok(f.run()?.0)
}

/// Fixed random parameters and inputs for one benchmark row.
struct Fixture {
    variant: Variant,
    k: usize,
    store: ParamStore<f32>,
    ica: Option<IcaLayerParams>,
    mkaca: Option<MkacaLayerParams>,
    model: Option<Model<f32>>,
    sets: (KeypointSet<f32>, KeypointSet<f32>),
    gammas: (Tensor<f32>, Tensor<f32>),
    sinkhorn_iters: usize,
}

impl Fixture {
    fn new(config: &BenchConfig, variant: Variant, n: usize) -> Result<Self> {
        Self::with_sizes(config, variant, n, n)
    }

    fn with_sizes(config: &BenchConfig, variant: Variant, m: usize, n: usize) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let (mut ica, mut mkaca, mut model) = (None, None, None);
        match variant {
            Variant::DenseIca => {
                ica = Some(IcaLayerParams::new(
                    &mut store,
                    "ica",
                    config.dim,
                    config.heads,
                    &mut rng,
                )?);
            }
            Variant::SparseMkaca => {
                mkaca = Some(MkacaLayerParams::new(
                    &mut store,
                    "unit",
                    config.dim,
                    config.heads,
                    &mut rng,
                )?);
            }
            Variant::FullPipeline => model = Some(Model::new(config.pipeline(), config.seed)?),
        }
        let mut set = |len: usize| {
            let (w, h) = (640.0, 480.0);
            let positions = (0..len)
                .map(|_| [rng.gen_range(0.0..w), rng.gen_range(0.0..h)])
                .collect();
            KeypointSet::new(positions, Tensor::randn(len, config.dim, 1.0, &mut rng), w, h)
        };
        let sets = (set(m)?, set(n)?);
        let gammas = (
            Tensor::<f32>::uniform(m, 1, 1.0, &mut rng).map(|v| v.abs()),
            Tensor::<f32>::uniform(n, 1, 1.0, &mut rng).map(|v| v.abs()),
        );
        Ok(Self {
            variant,
            k: config.k,
            store,
            ica,
            mkaca,
            model,
            sets,
            gammas,
            sinkhorn_iters: config.sinkhorn_iters,
        })
    }

    /// One forward run; returns (score evaluations, peak bytes).
    fn run(&mut self) -> Result<(u64, usize)> {
        let mut g = Graph::<f32>::inference();
        let (a, b) = &self.sets;
        match self.variant {
            Variant::FullPipeline => {
                let model = self.model.as_ref().expect("built for this variant");
                let opts = ForwardOptions {
                    sample_size: SampleSize::Fixed(self.k),
                    sinkhorn_iters: self.sinkhorn_iters,
                    sample_seed: 0,
                };
                model.forward(&mut g, a, b, &opts)?;
            }
            Variant::DenseIca => {
                let state = LayerState {
                    features_a: g.leaf(a.descriptors.clone()),
                    features_b: g.leaf(b.descriptors.clone()),
                    layer: 0,
                };
                ica_layer(&mut g, &self.store, self.ica.as_ref().expect("built"), state)?;
            }
            Variant::SparseMkaca => {
                let state = LayerState {
                    features_a: g.leaf(a.descriptors.clone()),
                    features_b: g.leaf(b.descriptors.clone()),
                    layer: 0,
                };
                let top = |t: &Tensor<f32>| {
                    let s: Vec<f64> = t.data().iter().map(|&v| v as f64).collect();
                    let mut idx = rank_by_score(&s);
                    idx.truncate(self.k.min(s.len()));
                    idx
                };
                let (indices_a, indices_b) = (top(&self.gammas.0), top(&self.gammas.1));
                let gamma_a = MatchabilityVector {
                    scores: g.leaf(self.gammas.0.clone()),
                    layer: 1,
                };
                let gamma_b = MatchabilityVector {
                    scores: g.leaf(self.gammas.1.clone()),
                    layer: 1,
                };
                let selection = BottleneckSelection {
                    gamma_a: g.gather_rows(gamma_a.scores, &indices_a)?,
                    gamma_b: g.gather_rows(gamma_b.scores, &indices_b)?,
                    indices_a,
                    indices_b,
                };
                let params = self.mkaca.as_ref().expect("built");
                mkaca_layer(&mut g, &self.store, params, state, &selection, gamma_a, gamma_b, false)?;
            }
        }
        Ok((g.score_evals(), g.peak_bytes()))
    }
}

//! Labels, losses, optimizer and the training loop.

pub mod adam;
pub mod config;
pub mod labels;
pub mod loss;

use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::score_matches;
use crate::matching::assignment_from_log;
use crate::model::{ForwardOptions, Model, SampleSize};
use crate::scalar::Scalar;
use crate::synth::PairSample;
use crate::Graph;

pub use adam::{Adam, AdamConfig};
pub use config::TrainConfig;
pub use labels::{make_labels, GroundTruthLabels};
pub use loss::{classification_loss, matching_loss, total_loss};

/// One row of the training log. Losses and match metrics are averaged over
/// the pairs of the iteration's batch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub iteration: usize,
    pub match_loss: f64,
    pub cls_loss: f64,
    pub total: f64,
    pub precision: Option<f64>,
    pub matching_score: f64,
}

pub const METRICS_HEADER: &str = "iteration,match_loss,cls_loss,total,precision,matching_score";

impl MetricsRow {
    pub fn csv_line(&self) -> String {
        let precision = self.precision.map(|p| format!("{p:.6}")).unwrap_or_default();
        format!(
            "{},{:.8},{:.8},{:.8},{},{:.6}",
            self.iteration, self.match_loss, self.cls_loss, self.total, precision, self.matching_score
        )
    }
}

pub fn write_metrics_csv<W: Write>(out: &mut W, rows: &[MetricsRow]) -> std::io::Result<()> {
    writeln!(out, "{METRICS_HEADER}")?;
    for r in rows {
        writeln!(out, "{}", r.csv_line())?;
    }
    Ok(())
}

/// Losses of one pair, all on the same graph.
#[derive(Clone, Copy, Debug)]
pub struct PairLoss {
    pub total: crate::Var,
    pub match_loss: crate::Var,
    /// Sum of the per-unit classification losses, before λ.
    pub cls_sum: f64,
    pub log_assignment: crate::Var,
}

/// Builds the forward pass and hybrid loss of one labelled pair.
pub fn pair_loss<T: Scalar>(
    g: &mut Graph<T>,
    model: &Model<T>,
    pair: &PairSample<T>,
    opts: &ForwardOptions,
    lambda: f64,
    class_balanced: bool,
) -> Result<PairLoss> {
    let out = model.forward(g, &pair.kps_a, &pair.kps_b, opts)?;
    let match_loss = matching_loss(g, out.log_assignment, &pair.labels)?;
    let targets = [
        pair.labels.targets_a(pair.kps_a.len()),
        pair.labels.targets_b(pair.kps_b.len()),
    ];
    let mut unit_losses = Vec::with_capacity(out.gammas.len());
    let mut cls_sum = 0.0;
    for (ga, gb) in &out.gammas {
        let l = classification_loss(g, &[ga.scores, gb.scores], &targets, class_balanced)?;
        cls_sum += g.value(l).get(0, 0).as_f64();
        unit_losses.push(l);
    }
    let total = total_loss(g, match_loss, &unit_losses, lambda, model.config.units)?;
    Ok(PairLoss {
        total,
        match_loss,
        cls_sum,
        log_assignment: out.log_assignment,
    })
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T> {
    pub model: Model<T>,
    pub metrics: Vec<MetricsRow>,
}

/// Trains a fresh model seeded from `config.seed`.
pub fn train<T: Scalar>(config: &TrainConfig, data: &[PairSample<T>]) -> Result<TrainOutcome<T>> {
    let model = Model::new(config.model_config(), config.seed)?;
    train_model(config, model, data, |_| {})
}

/// Runs `config.iterations` optimizer steps on `model`, calling `observe`
/// after each one. Fully deterministic given the config seed.
pub fn train_model<T: Scalar>(
    config: &TrainConfig,
    mut model: Model<T>,
    data: &[PairSample<T>],
    mut observe: impl FnMut(&MetricsRow),
) -> Result<TrainOutcome<T>> {
    config.validate()?;
    let usable: Vec<usize> = (0..data.len())
        .filter(|&i| {
            let ok = data[i].labels.matches.len() >= config.min_matches;
            if !ok {
                log::warn!(
                    "skipping pair {i}: {} ground-truth matches, need {}",
                    data[i].labels.matches.len(),
                    config.min_matches
                );
            }
            ok
        })
        .collect();
    if usable.is_empty() {
        return Err(Error::Contract(format!(
            "no training pair has at least {} ground-truth matches",
            config.min_matches
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x7261_696e);
    let mut adam = Adam::new(
        AdamConfig {
            decay: config.lr_decay,
            ..AdamConfig::new(config.learning_rate)
        },
        &model.store,
    );
    let mut order: Vec<usize> = Vec::new();
    let mut metrics = Vec::with_capacity(config.iterations);
    let inv_batch = 1.0 / config.batch_size as f64;

    for iteration in 0..config.iterations {
        let mut row = MetricsRow {
            iteration,
            match_loss: 0.0,
            cls_loss: 0.0,
            total: 0.0,
            precision: None,
            matching_score: 0.0,
        };
        let mut precision_sum = 0.0;
        let mut precision_pairs = 0;
        for _ in 0..config.batch_size {
            if order.is_empty() {
                order = usable.clone();
                order.shuffle(&mut rng);
                order.reverse();
            }
            let pair = &data[order.pop().expect("refilled above")];
            let opts = ForwardOptions {
                sample_size: SampleSize::Fixed(config.k),
                sinkhorn_iters: config.sinkhorn_iters,
                sample_seed: rng.gen(),
            };
            let mut g = Graph::new();
            let losses = pair_loss(&mut g, &model, pair, &opts, config.lambda, config.class_balanced)?;
            let total = g.value(losses.total).get(0, 0).as_f64();
            if !total.is_finite() {
                g.check_finite()?;
                return Err(Error::NonFinite {
                    op: "loss",
                    node: losses.total.index(),
                });
            }
            let scaled = g.scale(losses.total, T::of(inv_batch));
            g.backward_into(scaled, &mut model.store)?;

            row.match_loss += g.value(losses.match_loss).get(0, 0).as_f64() * inv_batch;
            row.cls_loss += losses.cls_sum * inv_batch;
            row.total += total * inv_batch;
            let assignment = assignment_from_log(g.value(losses.log_assignment), config.threshold)?;
            let counts = score_matches(&assignment.matches, &pair.labels, pair.kps_a.len(), pair.kps_b.len());
            if let Some(p) = counts.precision() {
                precision_sum += p;
                precision_pairs += 1;
            }
            row.matching_score += counts.matching_score() * inv_batch;
        }
        row.precision = (precision_pairs > 0).then(|| precision_sum / precision_pairs as f64);
        adam.step(&mut model.store);
        observe(&row);
        metrics.push(row);
    }
    Ok(TrainOutcome { model, metrics })
}

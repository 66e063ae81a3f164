//! Match quality and matchability-prediction metrics against ground truth.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::matching::Match;
use crate::model::{ForwardOptions, Model};
use crate::scalar::Scalar;
use crate::synth::PairSample;
use crate::training::labels::GroundTruthLabels;

/// Scores above this count as predicted matchable.
pub const MATCHABILITY_THRESHOLD: f64 = 0.5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchCounts {
    pub predicted: usize,
    pub correct: usize,
    pub ground_truth: usize,
    pub keypoints_a: usize,
    pub keypoints_b: usize,
}

impl MatchCounts {
    /// Correct over predicted; `None` when nothing was predicted.
    pub fn precision(&self) -> Option<f64> {
        (self.predicted > 0).then(|| self.correct as f64 / self.predicted as f64)
    }

    /// Correct matches over the mean keypoint count of the two images.
    pub fn matching_score(&self) -> f64 {
        let mean = 0.5 * (self.keypoints_a + self.keypoints_b) as f64;
        if mean == 0.0 {
            0.0
        } else {
            self.correct as f64 / mean
        }
    }
}

pub fn score_matches(matches: &[Match], labels: &GroundTruthLabels, m: usize, n: usize) -> MatchCounts {
    let truth: HashSet<(usize, usize)> = labels.matches.iter().copied().collect();
    let correct = matches
        .iter()
        .filter(|mt| truth.contains(&(mt.index_a, mt.index_b)))
        .count();
    MatchCounts {
        predicted: matches.len(),
        correct,
        ground_truth: labels.matches.len(),
        keypoints_a: m,
        keypoints_b: n,
    }
}

/// Confusion counts of a binary matchability predictor.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub true_pos: usize,
    pub false_pos: usize,
    pub false_neg: usize,
    pub true_neg: usize,
}

impl ClassCounts {
    pub fn add(&mut self, scores: &[f64], targets: &[f64], threshold: f64) {
        for (&s, &t) in scores.iter().zip(targets) {
            match (s > threshold, t > 0.5) {
                (true, true) => self.true_pos += 1,
                (true, false) => self.false_pos += 1,
                (false, true) => self.false_neg += 1,
                (false, false) => self.true_neg += 1,
            }
        }
    }

    pub fn precision(&self) -> Option<f64> {
        let p = self.true_pos + self.false_pos;
        (p > 0).then(|| self.true_pos as f64 / p as f64)
    }

    pub fn recall(&self) -> Option<f64> {
        let p = self.true_pos + self.false_neg;
        (p > 0).then(|| self.true_pos as f64 / p as f64)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub pairs: usize,
    /// Mean over pairs with at least one predicted match.
    pub precision: Option<f64>,
    pub matching_score: f64,
    pub predictor_precision: Option<f64>,
    pub predictor_recall: Option<f64>,
    pub predicted_matches: usize,
    pub correct_matches: usize,
}

/// Accumulates per-pair results into an [`EvalReport`].
#[derive(Clone, Debug, Default)]
pub struct Evaluator {
    pairs: usize,
    precision_sum: f64,
    precision_pairs: usize,
    score_sum: f64,
    predicted: usize,
    correct: usize,
    classes: ClassCounts,
}

impl Evaluator {
    pub fn add_pair(&mut self, counts: MatchCounts) {
        self.pairs += 1;
        if let Some(p) = counts.precision() {
            self.precision_sum += p;
            self.precision_pairs += 1;
        }
        self.score_sum += counts.matching_score();
        self.predicted += counts.predicted;
        self.correct += counts.correct;
    }

    pub fn add_matchability(&mut self, scores: &[f64], targets: &[f64]) {
        self.classes.add(scores, targets, MATCHABILITY_THRESHOLD);
    }

    pub fn report(&self) -> EvalReport {
        EvalReport {
            pairs: self.pairs,
            precision: (self.precision_pairs > 0).then(|| self.precision_sum / self.precision_pairs as f64),
            matching_score: if self.pairs > 0 {
                self.score_sum / self.pairs as f64
            } else {
                0.0
            },
            predictor_precision: self.classes.precision(),
            predictor_recall: self.classes.recall(),
            predicted_matches: self.predicted,
            correct_matches: self.correct,
        }
    }
}

/// Runs inference on every pair and scores it against its labels. The
/// matchability metrics use the last sampling unit's scores.
pub fn evaluate<T: Scalar>(
    model: &Model<T>,
    pairs: &[PairSample<T>],
    opts: &ForwardOptions,
    threshold: f64,
) -> Result<EvalReport> {
    let mut ev = Evaluator::default();
    for pair in pairs {
        let pred = model.predict(&pair.kps_a, &pair.kps_b, opts, threshold)?;
        let (m, n) = (pair.kps_a.len(), pair.kps_b.len());
        ev.add_pair(score_matches(&pred.assignment.matches, &pair.labels, m, n));
        ev.add_matchability(&pred.matchability.0, &pair.labels.targets_a(m));
        ev.add_matchability(&pred.matchability.1, &pair.labels.targets_b(n));
    }
    Ok(ev.report())
}

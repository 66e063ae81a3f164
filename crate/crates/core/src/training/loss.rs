//! Assignment and matchability losses.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Tensor, Var};
use crate::Graph;

use super::labels::GroundTruthLabels;

/// Matchability scores are clamped to `[ε, 1-ε]` before the logarithm.
pub const BCE_EPS: f64 = 1e-7;

/// `-mean log P̂` over ground-truth matches, minus half the mean log dustbin
/// mass of the non-repeatable keypoints of each image. Empty non-repeatable
/// sets drop their term.
pub fn matching_loss<T: Scalar>(g: &mut Graph<T>, log_p: Var, labels: &GroundTruthLabels) -> Result<Var> {
    if labels.matches.is_empty() {
        return Err(Error::Contract(
            "matching loss needs at least one ground-truth match".into(),
        ));
    }
    let (m1, n1) = g.shape(log_p);
    let (m, n) = (m1 - 1, n1 - 1);
    let matched = g.gather_elems(log_p, &labels.matches)?;
    let mut loss = g.mean(matched)?;
    loss = g.scale(loss, -T::one());
    let half = T::of(0.5);
    if !labels.non_repeatable_a.is_empty() {
        let cells: Vec<_> = labels.non_repeatable_a.iter().map(|&i| (i, n)).collect();
        let picked = g.gather_elems(log_p, &cells)?;
        let mean = g.mean(picked)?;
        let term = g.scale(mean, half);
        loss = g.sub(loss, term)?;
    }
    if !labels.non_repeatable_b.is_empty() {
        let cells: Vec<_> = labels.non_repeatable_b.iter().map(|&j| (m, j)).collect();
        let picked = g.gather_elems(log_p, &cells)?;
        let mean = g.mean(picked)?;
        let term = g.scale(mean, half);
        loss = g.sub(loss, term)?;
    }
    Ok(loss)
}

/// Per-element weights that give both classes equal total weight.
fn balanced_weights(targets: &[f64]) -> Vec<f64> {
    let pos = targets.iter().filter(|&&t| t > 0.5).count();
    let neg = targets.len() - pos;
    let total = targets.len() as f64;
    targets
        .iter()
        .map(|&t| {
            let count = if t > 0.5 { pos } else { neg };
            total / (2.0 * count as f64)
        })
        .collect()
}

/// Mean binary cross entropy pooled over several score columns.
///
/// Each entry of `scores` is an n×1 column and `targets` holds the matching
/// 0/1 labels. With `class_balanced` each class contributes half the weight.
pub fn classification_loss<T: Scalar>(
    g: &mut Graph<T>,
    scores: &[Var],
    targets: &[Vec<f64>],
    class_balanced: bool,
) -> Result<Var> {
    if scores.len() != targets.len() {
        return Err(Error::Contract(format!(
            "{} score columns but {} target lists",
            scores.len(),
            targets.len()
        )));
    }
    let all: Vec<f64> = targets.iter().flatten().copied().collect();
    if all.is_empty() {
        return Err(Error::Contract("classification loss over no keypoints".into()));
    }
    let weights = if class_balanced {
        balanced_weights(&all)
    } else {
        vec![1.0; all.len()]
    };

    let eps = T::of(BCE_EPS);
    let mut total: Option<Var> = None;
    let mut offset = 0;
    for (&s, t) in scores.iter().zip(targets) {
        let shape = g.shape(s);
        if shape != (t.len(), 1) {
            return Err(Error::dim("classification_loss", shape, (t.len(), 1)));
        }
        let w = &weights[offset..offset + t.len()];
        offset += t.len();
        let pos_w: Vec<T> = t.iter().zip(w).map(|(&y, &w)| T::of(y * w)).collect();
        let neg_w: Vec<T> = t.iter().zip(w).map(|(&y, &w)| T::of((1.0 - y) * w)).collect();
        let pos_w = g.leaf(Tensor::column(pos_w));
        let neg_w = g.leaf(Tensor::column(neg_w));

        let c = g.clamp(s, eps, T::one() - eps);
        let log_c = g.log(c);
        let neg_c = g.scale(c, -T::one());
        let one_minus = g.add_scalar(neg_c, T::one());
        let log_1mc = g.log(one_minus);
        let a = g.mul(log_c, pos_w)?;
        let b = g.mul(log_1mc, neg_w)?;
        let ll = g.add(a, b)?;
        let part = g.sum(ll);
        total = Some(match total {
            None => part,
            Some(acc) => g.add(acc, part)?,
        });
    }
    let total = total.expect("at least one column");
    Ok(g.scale(total, -T::one() / T::of(all.len() as f64)))
}

/// `match + λ Σ cls`, one classification term per sampling unit.
pub fn total_loss<T: Scalar>(
    g: &mut Graph<T>,
    match_loss: Var,
    unit_losses: &[Var],
    lambda: f64,
    expected_units: usize,
) -> Result<Var> {
    if unit_losses.len() != expected_units {
        return Err(Error::Contract(format!(
            "expected {expected_units} classification losses, got {}",
            unit_losses.len()
        )));
    }
    let mut total = match_loss;
    for &l in unit_losses {
        let w = g.scale(l, T::of(lambda));
        total = g.add(total, w)?;
    }
    Ok(total)
}

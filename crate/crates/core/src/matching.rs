//! Feature similarity, dustbin augmentation, Sinkhorn normalization and
//! mutual-nearest-neighbour match extraction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Tensor, Var};
use crate::Graph;

pub const DEFAULT_MATCH_THRESHOLD: f64 = 0.2;
pub const DEFAULT_SINKHORN_ITERS: usize = 100;
/// Iteration count of the lighter localization setting.
pub const FAST_SINKHORN_ITERS: usize = 50;
pub const DUSTBIN_INIT: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Match {
    pub index_a: usize,
    pub index_b: usize,
    pub confidence: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AssignmentResult<T> {
    /// (M+1)×(N+1) soft assignment including dustbins.
    pub augmented: Tensor<T>,
    /// Interior M×N block.
    pub cropped: Tensor<T>,
    pub matches: Vec<Match>,
}

/// `S = F_A F_Bᵀ`.
pub fn similarity<T: Scalar>(g: &mut Graph<T>, fa: Var, fb: Var) -> Result<Var> {
    g.matmul_t(fa, fb)
}

/// Log of the dustbin-augmented Sinkhorn assignment for a similarity matrix.
pub fn log_assignment<T: Scalar>(g: &mut Graph<T>, s: Var, z: Var, iterations: usize) -> Result<Var> {
    let s_hat = g.augment_dustbin(s, z)?;
    g.sinkhorn_log(s_hat, iterations)
}

/// Sinkhorn in the probability domain.
pub fn sinkhorn<T: Scalar>(g: &mut Graph<T>, s_hat: Var, iterations: usize) -> Result<Var> {
    let log_p = g.sinkhorn_log(s_hat, iterations)?;
    Ok(g.exp(log_p))
}

/// Interior block of an augmented matrix.
pub fn crop<T: Scalar>(augmented: &Tensor<T>) -> Tensor<T> {
    let (m, n) = (augmented.rows() - 1, augmented.cols() - 1);
    let mut out = Tensor::zeros(m, n);
    for i in 0..m {
        out.row_mut(i).copy_from_slice(&augmented.row(i)[..n]);
    }
    out
}

fn argmax(values: impl Iterator<Item = f64>) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, v) in values.enumerate() {
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((i, v));
        }
    }
    best.map(|(i, _)| i)
}

/// Mutual argmax pairs of `p` with value strictly above `threshold`.
/// Ties resolve to the lowest index. Sorted by `index_a`.
pub fn extract_matches<T: Scalar>(p: &Tensor<T>, threshold: f64) -> Result<Vec<Match>> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::Contract(format!("match threshold {threshold} outside [0, 1]")));
    }
    let (m, n) = p.shape();
    if m == 0 || n == 0 {
        return Ok(Vec::new());
    }
    let col_best: Vec<usize> = (0..n)
        .map(|j| argmax((0..m).map(|i| p.get(i, j).as_f64())).unwrap_or(0))
        .collect();
    let mut matches = Vec::new();
    for i in 0..m {
        let j = argmax(p.row(i).iter().map(|v| v.as_f64())).unwrap_or(0);
        let conf = p.get(i, j).as_f64();
        if col_best[j] == i && conf > threshold {
            matches.push(Match {
                index_a: i,
                index_b: j,
                confidence: conf,
            });
        }
    }
    Ok(matches)
}

/// Turns a log-assignment value into probabilities, cropped block and matches.
pub fn assignment_from_log<T: Scalar>(log_p: &Tensor<T>, threshold: f64) -> Result<AssignmentResult<T>> {
    let augmented = log_p.map(|v| v.exp());
    let cropped = crop(&augmented);
    let matches = extract_matches(&cropped, threshold)?;
    Ok(AssignmentResult {
        augmented,
        cropped,
        matches,
    })
}

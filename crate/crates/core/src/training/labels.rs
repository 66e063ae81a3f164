//! Ground-truth correspondences from cross-image reprojections.

use serde::{Deserialize, Serialize};

use crate::bcas::distance;

/// A reprojection closer than this to its mutual nearest neighbour is a match.
pub const MATCH_RADIUS_PX: f64 = 3.0;
/// A keypoint whose reprojection is farther than this from every keypoint of
/// the other image has no counterpart.
pub const NON_REPEATABLE_PX: f64 = 10.0;

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundTruthLabels {
    pub matches: Vec<(usize, usize)>,
    pub non_repeatable_a: Vec<usize>,
    pub non_repeatable_b: Vec<usize>,
}

impl GroundTruthLabels {
    /// Binary matchability targets for image A: 0 for non-repeatable, else 1.
    pub fn targets_a(&self, m: usize) -> Vec<f64> {
        targets(m, &self.non_repeatable_a)
    }

    pub fn targets_b(&self, n: usize) -> Vec<f64> {
        targets(n, &self.non_repeatable_b)
    }

    /// Labels of the pair with images exchanged.
    pub fn swapped(&self) -> Self {
        let mut matches: Vec<(usize, usize)> = self.matches.iter().map(|&(i, j)| (j, i)).collect();
        matches.sort_unstable();
        Self {
            matches,
            non_repeatable_a: self.non_repeatable_b.clone(),
            non_repeatable_b: self.non_repeatable_a.clone(),
        }
    }

    /// Checks the structural invariants against image sizes `m` and `n`.
    pub fn is_consistent(&self, m: usize, n: usize) -> bool {
        let mut used_a = vec![false; m];
        let mut used_b = vec![false; n];
        for &(i, j) in &self.matches {
            if i >= m || j >= n || used_a[i] || used_b[j] {
                return false;
            }
            used_a[i] = true;
            used_b[j] = true;
        }
        self.non_repeatable_a.iter().all(|&i| i < m && !used_a[i])
            && self.non_repeatable_b.iter().all(|&j| j < n && !used_b[j])
    }
}

fn targets(len: usize, negatives: &[usize]) -> Vec<f64> {
    let mut t = vec![1.0; len];
    for &i in negatives {
        t[i] = 0.0;
    }
    t
}

/// Distance and index of the nearest keypoint to `p`, if any.
fn nearest(p: Option<[f64; 2]>, keypoints: &[[f64; 2]]) -> Option<(f64, usize)> {
    let p = p?;
    keypoints
        .iter()
        .enumerate()
        .map(|(j, &q)| (distance(p, q), j))
        .min_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)))
}

/// Labels from reprojections of each keypoint into the other image.
///
/// `proj_ab[i]` is where keypoint `i` of A lands in B (`None` when it has no
/// valid reprojection, which counts as infinitely far). `(i, j)` is a match
/// when each is the other's nearest reprojected neighbour and both distances
/// are below [`MATCH_RADIUS_PX`].
pub fn make_labels(
    proj_ab: &[Option<[f64; 2]>],
    proj_ba: &[Option<[f64; 2]>],
    kps_a: &[[f64; 2]],
    kps_b: &[[f64; 2]],
) -> GroundTruthLabels {
    let near_ab: Vec<_> = proj_ab.iter().map(|&p| nearest(p, kps_b)).collect();
    let near_ba: Vec<_> = proj_ba.iter().map(|&p| nearest(p, kps_a)).collect();
    let far = |n: &Option<(f64, usize)>| n.is_none_or(|(d, _)| d > NON_REPEATABLE_PX);

    let mut labels = GroundTruthLabels::default();
    for (i, n) in near_ab.iter().enumerate() {
        if let Some((d, j)) = *n {
            if let Some((d_back, i_back)) = near_ba[j] {
                if i_back == i && d.max(d_back) < MATCH_RADIUS_PX {
                    labels.matches.push((i, j));
                }
            }
        }
    }
    labels.non_repeatable_a = (0..kps_a.len()).filter(|&i| far(&near_ab[i])).collect();
    labels.non_repeatable_b = (0..kps_b.len()).filter(|&j| far(&near_ba[j])).collect();
    labels
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rule_examples() {
        let a = [[10.0, 10.0], [50.0, 50.0], [90.0, 10.0]];
        let b = [[10.0, 10.0], [65.0, 50.0], [95.0, 10.0]];
        let proj_ab = [Some([10.0, 10.0]), Some([50.0, 50.0]), Some([90.0, 10.0])];
        let proj_ba = [Some([10.0, 10.0]), Some([65.0, 50.0]), Some([95.0, 10.0])];
        let l = make_labels(&proj_ab, &proj_ba, &a, &b);
        assert_eq!(l.matches, vec![(0, 0)]);
        // 15 px from everything on both sides
        assert_eq!(l.non_repeatable_a, vec![1]);
        assert_eq!(l.non_repeatable_b, vec![1]);
        // 5 px band: neither matched nor non-repeatable
        assert_eq!(l.targets_a(3), vec![1.0, 0.0, 1.0]);
        assert!(l.is_consistent(3, 3));
    }

    #[test]
    fn missing_projection_is_non_repeatable() {
        let l = make_labels(&[None], &[Some([0.0, 0.0])], &[[0.0, 0.0]], &[[0.0, 0.0]]);
        assert!(l.matches.is_empty());
        assert_eq!(l.non_repeatable_a, vec![0]);
        assert!(l.non_repeatable_b.is_empty());
    }

    #[test]
    fn mutuality_is_required() {
        // A0 and A1 both land nearest to B0; B0 lands on A1.
        let a = [[0.0, 0.0], [2.0, 0.0]];
        let b = [[0.0, 0.0]];
        let l = make_labels(&[Some([0.5, 0.0]), Some([1.0, 0.0])], &[Some([2.0, 0.0])], &a, &b);
        assert_eq!(l.matches, vec![(1, 0)]);
    }
}

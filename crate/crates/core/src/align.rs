//! Ordered temporal alignment between frame sequences.
//!
//! The ordered route scores a support/query pair by dynamic time warping
//! over their frame distance grid: the video distance is the cumulative
//! cost of the cheapest monotone path from the first frame pair to the
//! last. A softmax-over-negative-distances cross-entropy turns the per-class
//! distances into a trainable loss.

use crate::error::{Error, Result};
use crate::frames::Frames;
use crate::sim::{frame_distance_matrix, softmax, CostMatrix, MatrixKind};

/// A monotone warping path through a `rows x cols` grid.
///
/// Steps move by `(1,0)`, `(0,1)` or `(1,1)`, from `(0,0)` to
/// `(rows-1, cols-1)` inclusive.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AlignmentPath {
    steps: Vec<(usize, usize)>,
}

impl AlignmentPath {
    /// Visited cells in order, `(row, col)`.
    pub fn steps(&self) -> &[(usize, usize)] {
        &self.steps
    }

    /// Number of visited cells.
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    /// True when the path has no cells (never produced by [`dtw`]).
    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

/// Predecessor direction in the alignment grid.
#[derive(Clone, Copy, PartialEq, Eq)]
enum Move {
    Start,
    Diag,
    Left,
    Up,
}

/// Minimum cumulative-cost monotone path through a distance grid.
///
/// Both endpoints are fixed: the path always starts at `(0, 0)` and ends at
/// `(rows-1, cols-1)`. Cost ties are broken deterministically, preferring a
/// diagonal predecessor, then the cell to the left, then the cell above.
pub fn dtw(dist: &CostMatrix) -> Result<(f64, AlignmentPath)> {
    if dist.kind() != MatrixKind::Distance {
        return Err(Error::InvalidParam(
            "temporal alignment requires a distance-kind matrix".into(),
        ));
    }
    let (rows, cols) = (dist.rows(), dist.cols());
    if rows == 0 || cols == 0 {
        return Err(Error::EmptyMatrix);
    }

    let mut cost = vec![f64::INFINITY; rows * cols];
    let mut from = vec![Move::Start; rows * cols];
    let idx = |r: usize, c: usize| r * cols + c;

    for r in 0..rows {
        for c in 0..cols {
            let (best, mv) = if r == 0 && c == 0 {
                (0.0, Move::Start)
            } else {
                let diag = if r > 0 && c > 0 {
                    cost[idx(r - 1, c - 1)]
                } else {
                    f64::INFINITY
                };
                let left = if c > 0 { cost[idx(r, c - 1)] } else { f64::INFINITY };
                let up = if r > 0 { cost[idx(r - 1, c)] } else { f64::INFINITY };
                // `<=` on later candidates keeps the earlier preference.
                let mut best = diag;
                let mut mv = Move::Diag;
                if left < best {
                    best = left;
                    mv = Move::Left;
                }
                if up < best {
                    best = up;
                    mv = Move::Up;
                }
                (best, mv)
            };
            cost[idx(r, c)] = best + dist.at(r, c);
            from[idx(r, c)] = mv;
        }
    }

    let mut steps = Vec::with_capacity(rows + cols);
    let (mut r, mut c) = (rows - 1, cols - 1);
    loop {
        steps.push((r, c));
        match from[idx(r, c)] {
            Move::Start => break,
            Move::Diag => {
                r -= 1;
                c -= 1;
            }
            Move::Left => c -= 1,
            Move::Up => r -= 1,
        }
    }
    steps.reverse();
    Ok((cost[idx(rows - 1, cols - 1)], AlignmentPath { steps }))
}

/// Video-level ordered distance: cumulative cost of the optimal warping path
/// over the `1 - cosine` frame distance grid.
pub fn video_distance_ota(support: &Frames, query: &Frames) -> Result<(f64, AlignmentPath)> {
    let dist = frame_distance_matrix(support, query)?;
    dtw(&dist)
}

fn check_scores(values: &[f64], true_idx: usize) -> Result<()> {
    if values.is_empty() {
        return Err(Error::InsufficientData("no candidate scores".into()));
    }
    if true_idx >= values.len() {
        return Err(Error::IndexOutOfRange {
            index: true_idx,
            len: values.len(),
        });
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            context: "candidate score",
        });
    }
    Ok(())
}

/// Cross-entropy over negated distances: `-log softmax(-d)[true_idx]`.
///
/// Lower distance to the true class lowers the loss. Computed in shifted
/// form so extreme gaps do not overflow.
pub fn ota_loss(distances: &[f64], true_idx: usize) -> Result<f64> {
    check_scores(distances, true_idx)?;
    let min = distances.iter().copied().fold(f64::INFINITY, f64::min);
    let lse: f64 = distances.iter().map(|&d| (-(d - min)).exp()).sum::<f64>().ln();
    Ok(distances[true_idx] - min + lse)
}

/// Gradient of [`ota_loss`] with respect to each distance.
///
/// With `p = softmax(-d)`, the derivative is `1[i == true_idx] - p[i]`:
/// positive on the true class (pushing its distance down reduces the loss)
/// and negative on the distractors.
pub fn ota_loss_grad(distances: &[f64], true_idx: usize) -> Result<Vec<f64>> {
    check_scores(distances, true_idx)?;
    let neg: Vec<f64> = distances.iter().map(|&d| -d).collect();
    let p = softmax(&neg);
    Ok(p.iter()
        .enumerate()
        .map(|(i, &pi)| if i == true_idx { 1.0 - pi } else { -pi })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn dist(rows: usize, cols: usize, v: Vec<f64>) -> CostMatrix {
        CostMatrix::distance(rows, cols, v).unwrap()
    }

    #[test]
    fn two_by_two_prefers_zero_diagonal() {
        let (cost, path) = dtw(&dist(2, 2, vec![0.0, 1.0, 1.0, 0.0])).unwrap();
        assert_eq!(cost, 0.0);
        assert_eq!(path.steps(), &[(0, 0), (1, 1)]);
    }

    #[test]
    fn uniform_grid_takes_diagonal_by_tie_break() {
        let (cost, path) = dtw(&dist(3, 3, vec![1.0; 9])).unwrap();
        assert_eq!(cost, 3.0);
        assert_eq!(path.steps(), &[(0, 0), (1, 1), (2, 2)]);
    }

    #[test]
    fn single_row_walks_every_column() {
        let (cost, path) = dtw(&dist(1, 4, vec![0.1, 0.2, 0.3, 0.4])).unwrap();
        assert!((cost - 1.0).abs() < 1e-12);
        assert_eq!(path.steps(), &[(0, 0), (0, 1), (0, 2), (0, 3)]);
    }

    #[test]
    fn single_column_walks_every_row() {
        let (cost, path) = dtw(&dist(3, 1, vec![0.5, 0.25, 0.125])).unwrap();
        assert!((cost - 0.875).abs() < 1e-12);
        assert_eq!(path.steps(), &[(0, 0), (1, 0), (2, 0)]);
    }

    #[test]
    fn cost_equals_sum_over_path_cells() {
        let mut rng = ChaCha20Rng::seed_from_u64(21);
        for _ in 0..20 {
            let (rows, cols) = (rng.gen_range(1..=6), rng.gen_range(1..=6));
            let values: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(0.0..2.0)).collect();
            let m = dist(rows, cols, values);
            let (cost, path) = dtw(&m).unwrap();
            let sum: f64 = path.steps().iter().map(|&(r, c)| m.at(r, c)).sum();
            assert!((cost - sum).abs() < 1e-12);
        }
    }

    #[test]
    fn path_is_monotone_and_anchored() {
        let mut rng = ChaCha20Rng::seed_from_u64(22);
        for _ in 0..20 {
            let (rows, cols) = (rng.gen_range(1..=7), rng.gen_range(1..=7));
            let values: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(0.0..2.0)).collect();
            let (_, path) = dtw(&dist(rows, cols, values)).unwrap();
            let steps = path.steps();
            assert_eq!(steps[0], (0, 0));
            assert_eq!(steps[steps.len() - 1], (rows - 1, cols - 1));
            for w in steps.windows(2) {
                let (dr, dc) = (w[1].0 - w[0].0, w[1].1 - w[0].1);
                assert!(matches!((dr, dc), (0, 1) | (1, 0) | (1, 1)));
            }
        }
    }

    #[test]
    fn identical_sequences_have_zero_ordered_distance() {
        let s = Frames::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]]).unwrap();
        let (cost, path) = video_distance_ota(&s, &s).unwrap();
        assert!(cost.abs() < 1e-12);
        assert_eq!(path.steps(), &[(0, 0), (1, 1), (2, 2)]);
    }

    #[test]
    fn similarity_kind_matrix_is_rejected() {
        let m = CostMatrix::similarity(2, 2, vec![0.0; 4]).unwrap();
        assert!(matches!(dtw(&m), Err(Error::InvalidParam(_))));
    }

    #[test]
    fn loss_is_log_n_at_uniform_distances() {
        for n in [2usize, 5, 9] {
            let d = vec![0.7; n];
            let loss = ota_loss(&d, 0).unwrap();
            assert!((loss - (n as f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn loss_decreases_as_true_distance_shrinks() {
        let base = ota_loss(&[1.0, 1.0, 1.0], 0).unwrap();
        let better = ota_loss(&[0.5, 1.0, 1.0], 0).unwrap();
        assert!(better < base);
    }

    #[test]
    fn grad_at_uniform_two_way_is_half_signed_toward_true() {
        let g = ota_loss_grad(&[0.0, 0.0], 0).unwrap();
        assert!((g[0] - 0.5).abs() < 1e-12);
        assert!((g[1] + 0.5).abs() < 1e-12);
    }

    #[test]
    fn grad_sums_to_zero() {
        let g = ota_loss_grad(&[0.3, 1.4, 0.2, 0.9], 2).unwrap();
        assert!(g.iter().sum::<f64>().abs() < 1e-12);
    }

    #[test]
    fn grad_matches_finite_differences() {
        let mut rng = ChaCha20Rng::seed_from_u64(23);
        for _ in 0..10 {
            let d: Vec<f64> = (0..5).map(|_| rng.gen_range(0.0..2.0)).collect();
            let t = rng.gen_range(0..5);
            let g = ota_loss_grad(&d, t).unwrap();
            let eps = 1e-6;
            for i in 0..5 {
                let mut dp = d.clone();
                dp[i] += eps;
                let mut dm = d.clone();
                dm[i] -= eps;
                let num = (ota_loss(&dp, t).unwrap() - ota_loss(&dm, t).unwrap()) / (2.0 * eps);
                assert!((g[i] - num).abs() < 1e-6, "i={i}: {} vs {num}", g[i]);
            }
        }
    }

    #[test]
    fn loss_input_validation() {
        assert!(matches!(
            ota_loss(&[], 0),
            Err(Error::InsufficientData(_))
        ));
        assert!(matches!(
            ota_loss(&[1.0], 3),
            Err(Error::IndexOutOfRange { index: 3, len: 1 })
        ));
        assert!(matches!(
            ota_loss(&[1.0, f64::NAN], 0),
            Err(Error::NonFinite { .. })
        ));
    }
}

//! Order-free frame assignment between equal-length sequences.
//!
//! The unordered route scores a support/query pair by a maximum-weight
//! perfect matching over the frame similarity grid: every support frame is
//! paired with exactly one query frame so the total cosine similarity is
//! maximal. Class scores feed a softmax cross-entropy loss.

use crate::error::{Error, Result};
use crate::frames::Frames;
use crate::sim::{frame_similarity_matrix, softmax, CostMatrix, MatrixKind};

/// A perfect matching between the rows and columns of a square grid.
#[derive(Debug, Clone, PartialEq)]
pub struct PerfectMatching {
    assignment: Vec<usize>,
    total: f64,
}

impl PerfectMatching {
    /// Column matched to each row: `assignment()[row] == col`.
    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    /// Sum of matched-entry weights.
    pub fn total(&self) -> f64 {
        self.total
    }
}

/// Maximum-weight perfect matching on a square similarity grid.
///
/// Runs the Kuhn-Munkres algorithm in `O(n^3)` via dual potentials on the
/// negated weights. Ties are resolved deterministically: rows are rooted in
/// ascending order and the minimum-slack column scan keeps the first
/// minimum, so equal-weight matchings always resolve the same way.
pub fn km_match(sim: &CostMatrix) -> Result<PerfectMatching> {
    if sim.kind() != MatrixKind::Similarity {
        return Err(Error::InvalidParam(
            "perfect matching requires a similarity-kind matrix".into(),
        ));
    }
    if sim.rows() == 0 {
        return Err(Error::EmptyMatrix);
    }
    if sim.rows() != sim.cols() {
        return Err(Error::NotSquare {
            rows: sim.rows(),
            cols: sim.cols(),
        });
    }

    let n = sim.rows();
    // Minimize the negated weights; column index `n` is the virtual root
    // slot where each new row enters the alternating tree.
    let cost = |r: usize, c: usize| -sim.at(r, c);
    let mut u = vec![0.0f64; n + 1]; // row potentials (index n unused)
    let mut v = vec![0.0f64; n + 1]; // column potentials (index n = root slot)
    let mut row_for_col = vec![usize::MAX; n + 1]; // matched row per column

    for root in 0..n {
        row_for_col[n] = root;
        let mut j0 = n;
        let mut min_slack = vec![f64::INFINITY; n + 1];
        let mut prev_col = vec![n; n + 1]; // tree predecessor column per column
        let mut used = vec![false; n + 1];

        loop {
            used[j0] = true;
            let i0 = row_for_col[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = n;
            for j in 0..n {
                if used[j] {
                    continue;
                }
                let cur = cost(i0, j) - u[i0] - v[j];
                if cur < min_slack[j] {
                    min_slack[j] = cur;
                    prev_col[j] = j0;
                }
                if min_slack[j] < delta {
                    delta = min_slack[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[row_for_col[j]] += delta;
                    v[j] -= delta;
                } else {
                    min_slack[j] -= delta;
                }
            }
            j0 = j1;
            if row_for_col[j0] == usize::MAX {
                break;
            }
        }

        // Augment: flip matched edges back along the tree.
        while j0 != n {
            let j1 = prev_col[j0];
            row_for_col[j0] = row_for_col[j1];
            j0 = j1;
        }
    }

    let mut assignment = vec![usize::MAX; n];
    for col in 0..n {
        assignment[row_for_col[col]] = col;
    }
    let total = assignment
        .iter()
        .enumerate()
        .map(|(r, &c)| sim.at(r, c))
        .sum();
    Ok(PerfectMatching { assignment, total })
}

/// Video-level unordered similarity: total cosine similarity of the optimal
/// perfect matching between the two sequences' frames.
///
/// Requires equally long sequences; a perfect matching is undefined
/// otherwise.
pub fn video_similarity_km(support: &Frames, query: &Frames) -> Result<(f64, PerfectMatching)> {
    if support.num_frames() != query.num_frames() {
        return Err(Error::LengthMismatch {
            left: support.num_frames(),
            right: query.num_frames(),
        });
    }
    let sim = frame_similarity_matrix(support, query)?;
    let matching = km_match(&sim)?;
    Ok((matching.total(), matching))
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

/// Cross-entropy over similarity scores: `-log softmax(s)[true_idx]`.
pub fn km_loss(scores: &[f64], true_idx: usize) -> Result<f64> {
    check_scores(scores, true_idx)?;
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse: f64 = scores.iter().map(|&s| (s - max).exp()).sum::<f64>().ln();
    Ok(lse - (scores[true_idx] - max))
}

/// Gradient of [`km_loss`] with respect to each score.
///
/// With `p = softmax(s)`, the derivative is `p[i] - 1[i == true_idx]`:
/// negative on the true class (raising its score reduces the loss) and
/// positive on the distractors.
pub fn km_loss_grad(scores: &[f64], true_idx: usize) -> Result<Vec<f64>> {
    check_scores(scores, true_idx)?;
    let p = softmax(scores);
    Ok(p.iter()
        .enumerate()
        .map(|(i, &pi)| if i == true_idx { pi - 1.0 } else { pi })
        .collect())
}

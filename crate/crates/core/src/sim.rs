//! Frame-level similarity kernels.
//!
//! Three building blocks used by every matcher in the crate:
//! cosine similarity between frame vectors, the `T_s x T_q` frame
//! distance/similarity grids built from it, and a parameter-free
//! cross-attention similarity between two whole sequences (each sequence is
//! attention-pooled against the other's mean frame, then the pooled vectors
//! are compared by cosine).

use crate::error::{Error, Result};
use crate::frames::{axpy, dot, norm, Frames};

/// Whether a [`CostMatrix`] holds distances or similarities.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatrixKind {
    /// Entries are `1 - cosine`, in `[0, 2]`.
    Distance,
    /// Entries are cosines, in `[-1, 1]`.
    Similarity,
}

/// A dense `rows x cols` grid of frame-level distances or similarities.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    kind: MatrixKind,
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl CostMatrix {
    /// Validates ranges and builds a matrix from a flat row-major buffer.
    pub fn new(kind: MatrixKind, rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(Error::Invariant(format!(
                "matrix buffer has {} values, expected {}x{}",
                values.len(),
                rows,
                cols
            )));
        }
        let (lo, hi) = match kind {
            MatrixKind::Distance => (0.0, 2.0),
            MatrixKind::Similarity => (-1.0, 1.0),
        };
        for &v in &values {
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    context: "cost matrix entry",
                });
            }
            if v < lo || v > hi {
                return Err(Error::Invariant(format!(
                    "{kind:?} entry {v} outside [{lo}, {hi}]"
                )));
            }
        }
        Ok(CostMatrix {
            kind,
            rows,
            cols,
            values,
        })
    }

    /// Distance-kind convenience constructor.
    pub fn distance(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        CostMatrix::new(MatrixKind::Distance, rows, cols, values)
    }

    /// Similarity-kind convenience constructor.
    pub fn similarity(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        CostMatrix::new(MatrixKind::Similarity, rows, cols, values)
    }

    /// Distance or similarity tag.
    pub fn kind(&self) -> MatrixKind {
        self.kind
    }

    /// Row count (`T_s`).
    pub fn rows(&self) -> usize {
        self.rows
    }

    /// Column count (`T_q`).
    pub fn cols(&self) -> usize {
        self.cols
    }

    /// Entry accessor.
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols + c]
    }

    /// Flat row-major buffer.
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// The transposed matrix (same kind).
    pub fn transpose(&self) -> CostMatrix {
        let mut values = vec![0.0; self.values.len()];
        for r in 0..self.rows {
            for c in 0..self.cols {
                values[c * self.rows + r] = self.at(r, c);
            }
        }
        CostMatrix {
            kind: self.kind,
            rows: self.cols,
            cols: self.rows,
            values,
        }
    }
}

/// Cosine similarity of two vectors, clamped to `[-1, 1]`.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    let na = norm(a);
    let nb = norm(b);
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroNorm);
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

fn check_same_dim(s: &Frames, q: &Frames) -> Result<()> {
    if s.dim() != q.dim() {
        return Err(Error::DimMismatch {
            left: s.dim(),
            right: q.dim(),
        });
    }
    if s.num_frames() == 0 || q.num_frames() == 0 {
        return Err(Error::EmptyMatrix);
    }
    Ok(())
}

/// Grid of `1 - cosine(S[l], Q[m])` over all frame pairs.
pub fn frame_distance_matrix(s: &Frames, q: &Frames) -> Result<CostMatrix> {
    check_same_dim(s, q)?;
    let mut values = Vec::with_capacity(s.num_frames() * q.num_frames());
    for l in 0..s.num_frames() {
        for m in 0..q.num_frames() {
            values.push(1.0 - cosine(s.frame(l), q.frame(m))?);
        }
    }
    CostMatrix::distance(s.num_frames(), q.num_frames(), values)
}

/// Grid of `cosine(S[l], Q[m])` over all frame pairs.
pub fn frame_similarity_matrix(s: &Frames, q: &Frames) -> Result<CostMatrix> {
    check_same_dim(s, q)?;
    let mut values = Vec::with_capacity(s.num_frames() * q.num_frames());
    for l in 0..s.num_frames() {
        for m in 0..q.num_frames() {
            values.push(cosine(s.frame(l), q.frame(m))?);
        }
    }
    CostMatrix::similarity(s.num_frames(), q.num_frames(), values)
}

/// Cosine similarity together with its gradients with respect to both
/// vectors. The clamp is treated as the identity (it only activates on
/// floating-point drift past ±1).
pub(crate) fn cosine_with_grad(a: &[f64], b: &[f64]) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    if a.len() != b.len() {
        return Err(Error::DimMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    let na = norm(a);
    let nb = norm(b);
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroNorm);
    }
    let raw = dot(a, b) / (na * nb);
    let ga: Vec<f64> = a
        .iter()
        .zip(b)
        .map(|(&ai, &bi)| bi / (na * nb) - raw * ai / (na * na))
        .collect();
    let gb: Vec<f64> = a
        .iter()
        .zip(b)
        .map(|(&ai, &bi)| ai / (na * nb) - raw * bi / (nb * nb))
        .collect();
    Ok((raw.clamp(-1.0, 1.0), ga, gb))
}

/// Numerically stable softmax.
pub(crate) fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

struct AttentionPool {
    context: Vec<f64>,
    weights: Vec<f64>,
    pooled: Vec<f64>,
}

/// Attention-pools `seq` against the mean frame of `other`.
fn pool_against(seq: &Frames, other: &Frames) -> AttentionPool {
    let context = other.mean_frame();
    let inv_sqrt_d = 1.0 / (seq.dim() as f64).sqrt();
    let logits: Vec<f64> = (0..seq.num_frames())
        .map(|t| dot(seq.frame(t), &context) * inv_sqrt_d)
        .collect();
    let weights = softmax(&logits);
    let mut pooled = vec![0.0; seq.dim()];
    for t in 0..seq.num_frames() {
        axpy(weights[t], seq.frame(t), &mut pooled);
    }
    AttentionPool {
        context,
        weights,
        pooled,
    }
}

/// Sequence-level similarity: each sequence is attention-pooled against the
/// other's mean frame, then the pooled vectors are compared by cosine.
pub fn cross_attention_similarity(x: &Frames, y: &Frames) -> Result<f64> {
    check_same_dim(x, y)?;
    let px = pool_against(x, y);
    let py = pool_against(y, x);
    cosine(&px.pooled, &py.pooled)
}

/// Gradients of [`cross_attention_similarity`] with respect to both inputs.
#[derive(Debug, Clone)]
pub struct CrossAttentionGrad {
    /// The similarity value itself.
    pub value: f64,
    /// `d value / d x`, same shape as `x`.
    pub grad_x: Frames,
    /// `d value / d y`, same shape as `y`.
    pub grad_y: Frames,
}

/// Computes the similarity together with its exact analytic gradient.
///
/// The clamp applied by [`cosine`] is treated as the identity: it only
/// activates on floating-point drift past ±1, where the true derivative is
/// still the cosine derivative.
pub fn cross_attention_similarity_with_grad(x: &Frames, y: &Frames) -> Result<CrossAttentionGrad> {
    check_same_dim(x, y)?;
    let d = x.dim();
    let inv_sqrt_d = 1.0 / (d as f64).sqrt();
    let px = pool_against(x, y);
    let py = pool_against(y, x);

    let np = norm(&px.pooled);
    let nq = norm(&py.pooled);
    if np == 0.0 || nq == 0.0 {
        return Err(Error::ZeroNorm);
    }
    let raw = dot(&px.pooled, &py.pooled) / (np * nq);
    let value = raw.clamp(-1.0, 1.0);

    // d cos / d pooled vectors.
    let mut gp = vec![0.0; d];
    let mut gq = vec![0.0; d];
    for i in 0..d {
        gp[i] = py.pooled[i] / (np * nq) - raw * px.pooled[i] / (np * np);
        gq[i] = px.pooled[i] / (np * nq) - raw * py.pooled[i] / (nq * nq);
    }

    // Attention-logit gradients: d value / d a_t and d value / d b_m.
    let gp_dot_p = dot(&gp, &px.pooled);
    let gq_dot_q = dot(&gq, &py.pooled);
    let da: Vec<f64> = (0..x.num_frames())
        .map(|t| px.weights[t] * (dot(&gp, x.frame(t)) - gp_dot_p))
        .collect();
    let db: Vec<f64> = (0..y.num_frames())
        .map(|m| py.weights[m] * (dot(&gq, y.frame(m)) - gq_dot_q))
        .collect();

    // Context gradients: contexts are the other sequence's frame mean.
    let mut d_cy = vec![0.0; d]; // context used when pooling x (mean of y)
    for t in 0..x.num_frames() {
        axpy(da[t] * inv_sqrt_d, x.frame(t), &mut d_cy);
    }
    let mut d_cx = vec![0.0; d]; // context used when pooling y (mean of x)
    for m in 0..y.num_frames() {
        axpy(db[m] * inv_sqrt_d, y.frame(m), &mut d_cx);
    }

    let mut grad_x = Frames::zeros(x.num_frames(), d);
    let inv_tx = 1.0 / x.num_frames() as f64;
    for t in 0..x.num_frames() {
        let row = grad_x.frame_mut(t);
        axpy(px.weights[t], &gp, row);
        axpy(da[t] * inv_sqrt_d, &px.context, row);
        axpy(inv_tx, &d_cx, row);
    }
    let mut grad_y = Frames::zeros(y.num_frames(), d);
    let inv_ty = 1.0 / y.num_frames() as f64;
    for m in 0..y.num_frames() {
        let row = grad_y.frame_mut(m);
        axpy(py.weights[m], &gq, row);
        axpy(db[m] * inv_sqrt_d, &py.context, row);
        axpy(inv_ty, &d_cy, row);
    }

    Ok(CrossAttentionGrad {
        value,
        grad_x,
        grad_y,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn random_frames(rng: &mut ChaCha20Rng, t: usize, d: usize) -> Frames {
        let data: Vec<f64> = (0..t * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Frames::from_flat(data, t, d).unwrap()
    }

    #[test]
    fn cosine_identical_direction_is_one() {
        assert_eq!(cosine(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 1.0);
    }

    #[test]
    fn cosine_orthogonal_is_zero() {
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
    }

    #[test]
    fn cosine_45_degrees() {
        let c = cosine(&[1.0, 1.0], &[1.0, 0.0]).unwrap();
        assert!((c - 0.70710678).abs() < 1e-8);
    }

    #[test]
    fn cosine_zero_norm_is_undefined() {
        assert!(matches!(
            cosine(&[0.0, 0.0], &[1.0, 0.0]),
            Err(Error::ZeroNorm)
        ));
    }

    #[test]
    fn distance_matrix_orthonormal_self() {
        let s = Frames::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let m = frame_distance_matrix(&s, &s).unwrap();
        assert_eq!(m.values(), &[0.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn distance_matrix_antipodal() {
        let s = Frames::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let q = Frames::from_rows(&[vec![-1.0, 0.0]]).unwrap();
        let m = frame_distance_matrix(&s, &q).unwrap();
        assert_eq!(m.values(), &[2.0]);
    }

    #[test]
    fn distance_matrix_matches_per_entry_recomputation() {
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let s = random_frames(&mut rng, 3, 4);
        let q = random_frames(&mut rng, 3, 4);
        let m = frame_distance_matrix(&s, &q).unwrap();
        for l in 0..3 {
            for k in 0..3 {
                // Independent scalar recomputation.
                let a = s.frame(l);
                let b = q.frame(k);
                let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
                let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
                let expected = 1.0 - dot / (na * nb);
                assert!((m.at(l, k) - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn similarity_is_one_minus_distance() {
        let mut rng = ChaCha20Rng::seed_from_u64(12);
        let s = random_frames(&mut rng, 4, 5);
        let q = random_frames(&mut rng, 3, 5);
        let dist = frame_distance_matrix(&s, &q).unwrap();
        let sim = frame_similarity_matrix(&s, &q).unwrap();
        for (d, c) in dist.values().iter().zip(sim.values()) {
            assert!((d + c - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn similarity_matrix_orthonormal_self_is_identity() {
        let s = Frames::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let m = frame_similarity_matrix(&s, &s).unwrap();
        assert_eq!(m.values(), &[1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let s = Frames::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let q = Frames::from_rows(&[vec![1.0, 0.0, 0.0]]).unwrap();
        assert!(frame_distance_matrix(&s, &q).is_err());
    }

    #[test]
    fn cross_attention_identical_constant_sequences() {
        let x = Frames::from_rows(&vec![vec![0.3, -0.2, 0.5]; 4]).unwrap();
        let s = cross_attention_similarity(&x, &x).unwrap();
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cross_attention_single_frames_reduce_to_cosine() {
        let x = Frames::from_rows(&[vec![1.0, 2.0, -1.0]]).unwrap();
        let y = Frames::from_rows(&[vec![0.5, -0.25, 2.0]]).unwrap();
        let s = cross_attention_similarity(&x, &y).unwrap();
        let c = cosine(x.frame(0), y.frame(0)).unwrap();
        assert!((s - c).abs() < 1e-15);
    }

    #[test]
    fn cross_attention_matches_straight_line_recomputation() {
        let mut rng = ChaCha20Rng::seed_from_u64(13);
        let x = random_frames(&mut rng, 4, 8);
        let y = random_frames(&mut rng, 4, 8);
        let got = cross_attention_similarity(&x, &y).unwrap();

        // Straight-line independent recomputation of the declared formula.
        let d = 8usize;
        let mean = |f: &Frames| -> Vec<f64> {
            let mut m = vec![0.0; d];
            for t in 0..f.num_frames() {
                for i in 0..d {
                    m[i] += f.frame(t)[i] / f.num_frames() as f64;
                }
            }
            m
        };
        let pool = |f: &Frames, ctx: &[f64]| -> Vec<f64> {
            let logits: Vec<f64> = (0..f.num_frames())
                .map(|t| {
                    f.frame(t).iter().zip(ctx).map(|(a, b)| a * b).sum::<f64>()
                        / (d as f64).sqrt()
                })
                .collect();
            let mx = logits.iter().cloned().fold(f64::MIN, f64::max);
            let e: Vec<f64> = logits.iter().map(|z| (z - mx).exp()).collect();
            let sum: f64 = e.iter().sum();
            let mut p = vec![0.0; d];
            for t in 0..f.num_frames() {
                for i in 0..d {
                    p[i] += e[t] / sum * f.frame(t)[i];
                }
            }
            p
        };
        let px = pool(&x, &mean(&y));
        let py = pool(&y, &mean(&x));
        let dot: f64 = px.iter().zip(&py).map(|(a, b)| a * b).sum();
        let np: f64 = px.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nq: f64 = py.iter().map(|v| v * v).sum::<f64>().sqrt();
        let expected = (dot / (np * nq)).clamp(-1.0, 1.0);
        assert!((got - expected).abs() < 1e-12);
    }

    #[test]
    fn cross_attention_invariant_under_independent_frame_permutations() {
        let mut rng = ChaCha20Rng::seed_from_u64(14);
        let x = random_frames(&mut rng, 5, 6);
        let y = random_frames(&mut rng, 4, 6);
        let base = cross_attention_similarity(&x, &y).unwrap();
        let xp = Frames::from_rows(&[
            x.frame(3).to_vec(),
            x.frame(0).to_vec(),
            x.frame(4).to_vec(),
            x.frame(2).to_vec(),
            x.frame(1).to_vec(),
        ])
        .unwrap();
        let yp = Frames::from_rows(&[
            y.frame(2).to_vec(),
            y.frame(3).to_vec(),
            y.frame(0).to_vec(),
            y.frame(1).to_vec(),
        ])
        .unwrap();
        let permuted = cross_attention_similarity(&xp, &yp).unwrap();
        assert!((base - permuted).abs() < 1e-12);
    }

    #[test]
    fn cross_attention_gradient_matches_finite_differences() {
        let mut rng = ChaCha20Rng::seed_from_u64(15);
        let x = random_frames(&mut rng, 3, 5);
        let y = random_frames(&mut rng, 4, 5);
        let g = cross_attention_similarity_with_grad(&x, &y).unwrap();
        let eps = 1e-5;

        let check = |which_x: bool, t: usize, i: usize, analytic: f64| {
            let perturb = |delta: f64| {
                let mut xa = x.clone();
                let mut ya = y.clone();
                if which_x {
                    xa.frame_mut(t)[i] += delta;
                } else {
                    ya.frame_mut(t)[i] += delta;
                }
                cross_attention_similarity(&xa, &ya).unwrap()
            };
            let numeric = (perturb(eps) - perturb(-eps)) / (2.0 * eps);
            let denom = analytic.abs().max(numeric.abs()).max(1.0);
            assert!(
                ((analytic - numeric) / denom).abs() < 1e-6,
                "grad mismatch: analytic {analytic}, numeric {numeric}"
            );
        };
        for t in 0..3 {
            for i in 0..5 {
                check(true, t, i, g.grad_x.frame(t)[i]);
            }
        }
        for m in 0..4 {
            for i in 0..5 {
                check(false, m, i, g.grad_y.frame(m)[i]);
            }
        }
    }

    #[test]
    fn cosine_gradient_matches_finite_differences() {
        let mut rng = ChaCha20Rng::seed_from_u64(16);
        let a: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (_, ga, gb) = cosine_with_grad(&a, &b).unwrap();
        let eps = 1e-6;
        for i in 0..6 {
            let mut ap = a.clone();
            ap[i] += eps;
            let mut am = a.clone();
            am[i] -= eps;
            let num = (cosine(&ap, &b).unwrap() - cosine(&am, &b).unwrap()) / (2.0 * eps);
            assert!((ga[i] - num).abs() < 1e-6);
            let mut bp = b.clone();
            bp[i] += eps;
            let mut bm = b.clone();
            bm[i] -= eps;
            let num = (cosine(&a, &bp).unwrap() - cosine(&a, &bm).unwrap()) / (2.0 * eps);
            assert!((gb[i] - num).abs() < 1e-6);
        }
    }

    #[test]
    fn cost_matrix_rejects_out_of_range_entries() {
        assert!(CostMatrix::distance(1, 1, vec![2.5]).is_err());
        assert!(CostMatrix::similarity(1, 1, vec![-1.5]).is_err());
        assert!(CostMatrix::similarity(1, 1, vec![f64::NAN]).is_err());
    }
}

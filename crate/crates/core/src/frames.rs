//! Dense row-major frame matrices used by all matching math.
//!
//! Storage types ([`crate::store::FeatureSequence`]) hold `f32` exactly as
//! serialized on disk; everything numeric runs in `f64`. [`Frames`] is the
//! in-memory `f64` matrix those computations operate on: `num_frames` rows,
//! each a `dim`-dimensional feature vector.

use crate::error::{Error, Result};

/// A `T x D` matrix of frame features in `f64`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Frames {
    data: Vec<f64>,
    num_frames: usize,
    dim: usize,
}

impl Frames {
    /// Creates a zero-filled matrix with `num_frames` rows of width `dim`.
    pub fn zeros(num_frames: usize, dim: usize) -> Self {
        Frames {
            data: vec![0.0; num_frames * dim],
            num_frames,
            dim,
        }
    }

    /// Builds a matrix from a flat row-major buffer.
    pub fn from_flat(data: Vec<f64>, num_frames: usize, dim: usize) -> Result<Self> {
        if data.len() != num_frames * dim {
            return Err(Error::Invariant(format!(
                "flat buffer has {} values, expected {}x{}",
                data.len(),
                num_frames,
                dim
            )));
        }
        Ok(Frames {
            data,
            num_frames,
            dim,
        })
    }

    /// Builds a matrix from per-frame rows; all rows must share a width.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * dim);
        for row in rows {
            if row.len() != dim {
                return Err(Error::DimMismatch {
                    left: dim,
                    right: row.len(),
                });
            }
            data.extend_from_slice(row);
        }
        Ok(Frames {
            data,
            num_frames: rows.len(),
            dim,
        })
    }

    /// Number of frames (rows).
    pub fn num_frames(&self) -> usize {
        self.num_frames
    }

    /// Feature dimension (row width).
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Borrows frame `t` as a slice of length `dim`.
    ///
    /// # Panics
    /// Panics if `t >= num_frames`; frame indices are internal and bounded.
    pub fn frame(&self, t: usize) -> &[f64] {
        &self.data[t * self.dim..(t + 1) * self.dim]
    }

    /// Mutable access to frame `t`.
    pub fn frame_mut(&mut self, t: usize) -> &mut [f64] {
        &mut self.data[t * self.dim..(t + 1) * self.dim]
    }

    /// The flat row-major buffer.
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Mutable flat buffer (used by gradient accumulation).
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Mean of all frames: a `dim`-vector.
    pub fn mean_frame(&self) -> Vec<f64> {
        let mut mean = vec![0.0; self.dim];
        for t in 0..self.num_frames {
            for (m, x) in mean.iter_mut().zip(self.frame(t)) {
                *m += x;
            }
        }
        let inv = 1.0 / self.num_frames as f64;
        for m in &mut mean {
            *m *= inv;
        }
        mean
    }
}

/// Dot product of two equal-length slices.
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Euclidean norm of a slice.
pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `y += alpha * x` over equal-length slices.
pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

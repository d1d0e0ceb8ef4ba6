//! Synthetic dataset generator.
//!
//! Stands in for a real feature extractor: each class is an ordered list of
//! latent sub-action anchor vectors, and each video renders those sub-actions
//! with per-video speed warps (and optionally a shuffled sub-action order)
//! resampled to exactly `T` frames. The RGB stream carries appearance
//! (anchors + noise); the flow stream carries motion (a fixed seeded linear
//! map of per-frame anchor differences, plus a fixed rest-motion offset so
//! frames inside a sub-action are never the zero vector, plus noise).
//!
//! Generation is a pure function of the config, including its seed: the same
//! config always yields a bit-identical store.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};

use crate::error::{Error, Result};
use crate::store::{FeatureSequence, FeatureStore, Modality, VideoRecord};

/// Frame vectors with Euclidean norm below this are re-drawn (or replaced by
/// a deterministic fallback when there is no noise to re-draw).
const ZERO_FRAME_GUARD: f64 = 1e-8;

/// Maximum noise re-draws before falling back deterministically.
const MAX_REDRAWS: usize = 16;

/// Configuration for [`gen_synthetic`].
#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    /// Number of distinct classes.
    pub num_classes: usize,
    /// Videos generated per class.
    pub videos_per_class: usize,
    /// Frames per video (`T`).
    pub frames: usize,
    /// Feature dimension (`D`).
    pub dim: usize,
    /// Latent sub-actions per class; must not exceed `frames`.
    pub num_subactions: usize,
    /// Inclusive duration-warp factor range `(low, high)`, both positive.
    pub speed_warp_range: (f64, f64),
    /// Shuffle the sub-action order independently per video.
    pub permute_subactions: bool,
    /// Standard deviation of per-coordinate Gaussian feature noise.
    pub noise_sigma: f64,
    /// Generator seed; the store is a pure function of the whole config.
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_classes: 12,
            videos_per_class: 10,
            frames: 8,
            dim: 16,
            num_subactions: 3,
            speed_warp_range: (0.5, 2.0),
            permute_subactions: true,
            noise_sigma: 0.3,
            seed: 7,
        }
    }
}

impl SynthConfig {
    /// Checks every config invariant.
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 {
            return Err(Error::InvalidParam("num_classes must be >= 1".into()));
        }
        if self.videos_per_class == 0 {
            return Err(Error::InvalidParam("videos_per_class must be >= 1".into()));
        }
        if self.frames == 0 {
            return Err(Error::InvalidParam("frames must be >= 1".into()));
        }
        if self.dim == 0 {
            return Err(Error::InvalidParam("dim must be >= 1".into()));
        }
        if self.num_subactions == 0 || self.num_subactions > self.frames {
            return Err(Error::InvalidParam(format!(
                "num_subactions must be in [1, frames]; got {} with frames {}",
                self.num_subactions, self.frames
            )));
        }
        let (lo, hi) = self.speed_warp_range;
        if !(lo.is_finite() && hi.is_finite()) || lo <= 0.0 || hi < lo {
            return Err(Error::InvalidParam(format!(
                "speed_warp_range must satisfy 0 < low <= high; got ({lo}, {hi})"
            )));
        }
        if !self.noise_sigma.is_finite() || self.noise_sigma < 0.0 {
            return Err(Error::InvalidParam(format!(
                "noise_sigma must be finite and >= 0; got {}",
                self.noise_sigma
            )));
        }
        if (self.num_classes as u128) * (self.videos_per_class as u128) > u32::MAX as u128 {
            return Err(Error::InvalidParam(
                "num_classes * videos_per_class exceeds the id space".into(),
            ));
        }
        Ok(())
    }
}

/// Draws a unit-norm vector from the standard normal distribution.
fn unit_vector(rng: &mut ChaCha20Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > ZERO_FRAME_GUARD {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Adds seeded Gaussian noise to `base`, re-drawing while the result is
/// numerically zero; falls back to `fallback` if noise is disabled or the
/// guard keeps failing.
fn noisy_frame(
    rng: &mut ChaCha20Rng,
    base: &[f64],
    sigma: f64,
    fallback: &[f64],
) -> Vec<f64> {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if sigma == 0.0 {
        if norm(base) < ZERO_FRAME_GUARD {
            return fallback.to_vec();
        }
        return base.to_vec();
    }
    for _ in 0..MAX_REDRAWS {
        let frame: Vec<f64> = base
            .iter()
            .map(|&b| b + sigma * rng.sample::<f64, _>(StandardNormal))
            .collect();
        if norm(&frame) >= ZERO_FRAME_GUARD {
            return frame;
        }
    }
    fallback.to_vec()
}

fn to_f32(values: Vec<f64>) -> Vec<f32> {
    values.into_iter().map(|v| v as f32).collect()
}

/// Generates a synthetic paired-modality feature store.
///
/// Draw order is fixed (flow map, flow offset, per-class anchors, then per
/// video: optional permutation, warp factors, noise), which is what makes
/// the output a pure function of the config.
pub fn gen_synthetic(cfg: &SynthConfig) -> Result<FeatureStore> {
    cfg.validate()?;
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let d = cfg.dim;
    let s = cfg.num_subactions;

    // Fixed seeded linear map for the flow surrogate, scaled so that the
    // image of a unit vector keeps unit-scale norm in expectation.
    let scale = 1.0 / (d as f64).sqrt();
    let flow_map: Vec<f64> = (0..d * d)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect();
    // Rest-motion offset: keeps within-sub-action flow frames (whose anchor
    // difference is zero) away from the zero vector even at sigma = 0.
    let flow_offset = unit_vector(&mut rng, d);

    let anchors: Vec<Vec<Vec<f64>>> = (0..cfg.num_classes)
        .map(|_| (0..s).map(|_| unit_vector(&mut rng, d)).collect())
        .collect();

    let warp = Uniform::new_inclusive(cfg.speed_warp_range.0, cfg.speed_warp_range.1);
    let mut records = Vec::with_capacity(cfg.num_classes * cfg.videos_per_class);
    let mut video_id: u32 = 0;

    for class in 0..cfg.num_classes {
        for _ in 0..cfg.videos_per_class {
            // (a) Sub-action order for this video.
            let mut order: Vec<usize> = (0..s).collect();
            if cfg.permute_subactions {
                // Fisher-Yates via the shared stream keeps the draw order fixed.
                for i in (1..s).rev() {
                    let j = rng.gen_range(0..=i);
                    order.swap(i, j);
                }
            }
            // (b) Per-sub-action duration warps.
            let durations: Vec<f64> = (0..s).map(|_| warp.sample(&mut rng)).collect();
            let total: f64 = durations.iter().sum();

            // (c) Resample to exactly T frames: frame t takes the anchor of
            // the sub-action active at its center time.
            let mut cumulative = Vec::with_capacity(s);
            let mut acc = 0.0;
            for &w in &durations {
                acc += w;
                cumulative.push(acc);
            }
            let frame_anchor: Vec<&[f64]> = (0..cfg.frames)
                .map(|t| {
                    let pos = (t as f64 + 0.5) / cfg.frames as f64 * total;
                    let slot = cumulative
                        .iter()
                        .position(|&edge| pos < edge)
                        .unwrap_or(s - 1);
                    anchors[class][order[slot]].as_slice()
                })
                .collect();

            // (d) Emit both streams.
            let mut rgb = Vec::with_capacity(cfg.frames * d);
            let mut flow = Vec::with_capacity(cfg.frames * d);
            let mut prev: Option<&[f64]> = None;
            for &anchor in &frame_anchor {
                rgb.extend(noisy_frame(&mut rng, anchor, cfg.noise_sigma, anchor));

                // Motion: map the anchor step (first frame steps from the
                // origin), then add the rest-motion offset.
                let diff: Vec<f64> = match prev {
                    Some(p) => anchor.iter().zip(p).map(|(a, b)| a - b).collect(),
                    None => anchor.to_vec(),
                };
                let mut base = flow_offset.clone();
                for (row, &dv) in diff.iter().enumerate() {
                    if dv != 0.0 {
                        for (col, b) in base.iter_mut().enumerate() {
                            *b += flow_map[row * d + col] * dv;
                        }
                    }
                }
                flow.extend(noisy_frame(&mut rng, &base, cfg.noise_sigma, &flow_offset));
                prev = Some(anchor);
            }

            let rgb = FeatureSequence::new(Modality::Rgb, cfg.frames, d, to_f32(rgb))?;
            let flow = FeatureSequence::new(Modality::Flow, cfg.frames, d, to_f32(flow))?;
            records.push(VideoRecord::new(video_id, class as u32, rgb, flow)?);
            video_id += 1;
        }
    }
    FeatureStore::new(records, cfg.num_classes)
}

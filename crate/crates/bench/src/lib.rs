//! Shared fixtures for the matching and evaluation benchmarks.

use fsam_core::{gen_synthetic, FeatureStore, Frames, SynthConfig};

/// Default benchmark store: 12 classes x 10 videos, 8 frames, 16 dims.
pub fn bench_store() -> FeatureStore {
    gen_synthetic(&SynthConfig::default()).expect("default config generates")
}

/// Appearance-stream frame matrices for the first `n` records.
pub fn bench_frames(store: &FeatureStore, n: usize) -> Vec<Frames> {
    (0..n)
        .map(|i| store.record(i).expect("record exists").rgb.to_frames())
        .collect()
}

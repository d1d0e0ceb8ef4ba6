//! Few-shot action matching: core algorithms and data model.
//!
//! The crate implements a two-branch video matcher for episodic few-shot
//! evaluation. Videos are stored as paired appearance/motion frame-feature
//! sequences ([`FeatureStore`]). Matching runs along two routes: an ordered
//! temporal alignment (dynamic time warping over frame distances) and an
//! order-free perfect assignment (Kuhn-Munkres over frame similarities),
//! each applied to both modalities, then fused into one score. A lightweight
//! residual bottleneck adapter, trained with a contrastive objective over
//! cross-attention similarities, sharpens the features before matching.

pub mod align;
pub mod assign;
pub mod contrastive;
pub mod episode;
pub mod error;
pub mod frames;
pub mod gradcheck;
pub mod sim;
pub mod store;
pub mod synth;
pub mod train;
mod wire;

pub use align::{dtw, ota_loss, ota_loss_grad, video_distance_ota, AlignmentPath};
pub use assign::{km_loss, km_loss_grad, km_match, video_similarity_km, PerfectMatching};
pub use contrastive::{
    adapter_backward, adapter_forward, decode_adapters, encode_adapters, infonce_grad,
    infonce_loss, load_adapters, mcl_loss_and_grads, mcl_similarity_matrix, save_adapters,
    AdapterGrad, AdapterParams, Adapters, ContrastiveBatch, ParamBlock, PARAM_BLOCKS,
};
pub use episode::{
    class_prototype_scores, classify, evaluate, fuse_scores, sample_episode, BranchAccuracies,
    EvalConfig, EvalReport, Episode, FourScores, FusionWeights,
};
pub use error::{Error, Result};
pub use frames::Frames;
pub use gradcheck::{run_suites, GradCheckReport, SuiteReport};
pub use sim::{
    cosine, cross_attention_similarity, cross_attention_similarity_with_grad,
    frame_distance_matrix, frame_similarity_matrix, CostMatrix, CrossAttentionGrad, MatrixKind,
};
pub use store::{
    decode_store, encode_store, load_store, save_store, FeatureSequence, FeatureStore, Modality,
    VideoRecord,
};
pub use synth::{gen_synthetic, SynthConfig};
pub use train::{
    build_schedule, freeze_structures, retrieval_probe, total_loss, total_loss_and_grad,
    total_loss_frozen, train, FrozenStructures, LossBreakdown, TrainBatch, TrainConfig,
    TrainGrads, TrainResult,
};

/// Derives a per-task seed from a base seed and an index.
///
/// Uses a splitmix64-style mix so consecutive indices give statistically
/// independent streams. The mapping is pure, which keeps parallel runs
/// reproducible regardless of scheduling: worker threads derive their seeds
/// from the task index, never from execution order.
pub fn derive_seed(base: u64, index: u64) -> u64 {
    let mut z = base
        .wrapping_add(0x9e3779b97f4a7c15)
        .wrapping_add(index.wrapping_mul(0xbf58476d1ce4e5b9));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

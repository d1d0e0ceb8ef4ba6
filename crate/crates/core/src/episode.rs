//! Episode sampling, four-score fusion, and multi-episode evaluation.
//!
//! An episode draws `N` classes with `K` support videos each plus some
//! held-out queries. Every query is scored against each class along four
//! routes (ordered/unordered matcher x appearance/motion modality); the four
//! score vectors are z-normalized and fused by a weighted sum, and the
//! query is assigned to the best class. The evaluator repeats this over
//! many independently seeded episodes and reports mean accuracy with a 95%
//! confidence half-width, deterministically for a given seed regardless of
//! thread count.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::align::video_distance_ota;
use crate::assign::video_similarity_km;
use crate::contrastive::{adapter_forward, Adapters};
use crate::derive_seed;
use crate::error::{Error, Result};
use crate::frames::Frames;
use crate::store::{FeatureStore, Modality, VideoRecord};

/// One sampled N-way K-shot episode, holding record indices into a store.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Episode {
    way: usize,
    shot: usize,
    classes: Vec<u32>,
    support: Vec<Vec<usize>>,
    queries: Vec<(usize, usize)>,
}

impl Episode {
    /// Validates and builds an episode from explicit record indices.
    ///
    /// `support[c]` lists the `K` support records of class slot `c`;
    /// `queries` pairs a record index with its true class slot. Every
    /// record of a slot must belong to that slot's class, slots must name
    /// distinct classes, and no record may appear both as support and as a
    /// query.
    pub fn new(
        store: &FeatureStore,
        support: Vec<Vec<usize>>,
        queries: Vec<(usize, usize)>,
    ) -> Result<Self> {
        if support.is_empty() {
            return Err(Error::InsufficientData("episode needs at least one class".into()));
        }
        let shot = support[0].len();
        if shot == 0 {
            return Err(Error::InsufficientData(
                "episode needs at least one support record per class".into(),
            ));
        }
        let mut classes = Vec::with_capacity(support.len());
        for row in &support {
            if row.len() != shot {
                return Err(Error::Invariant(
                    "all classes must have the same number of support records".into(),
                ));
            }
            let class = store.record(row[0])?.class_id;
            for &idx in row {
                if store.record(idx)?.class_id != class {
                    return Err(Error::Invariant(
                        "support slot mixes records of different classes".into(),
                    ));
                }
            }
            if classes.contains(&class) {
                return Err(Error::Invariant("duplicate class in episode support".into()));
            }
            classes.push(class);
        }
        let mut support_set: Vec<usize> = support.iter().flatten().copied().collect();
        support_set.sort_unstable();
        if support_set.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Invariant("duplicate support record".into()));
        }
        for &(idx, slot) in &queries {
            if slot >= support.len() {
                return Err(Error::IndexOutOfRange {
                    index: slot,
                    len: support.len(),
                });
            }
            if store.record(idx)?.class_id != classes[slot] {
                return Err(Error::Invariant(
                    "query labeled with a slot of a different class".into(),
                ));
            }
            if support_set.binary_search(&idx).is_ok() {
                return Err(Error::Invariant(
                    "record appears in both support and queries".into(),
                ));
            }
        }
        Ok(Episode {
            way: support.len(),
            shot,
            classes,
            support,
            queries,
        })
    }

    /// Number of classes `N`.
    pub fn way(&self) -> usize {
        self.way
    }

    /// Support records per class `K`.
    pub fn shot(&self) -> usize {
        self.shot
    }

    /// Class id backing each slot.
    pub fn classes(&self) -> &[u32] {
        &self.classes
    }

    /// Support record indices, grouped by class slot.
    pub fn support(&self) -> &[Vec<usize>] {
        &self.support
    }

    /// Query `(record index, true class slot)` pairs.
    pub fn queries(&self) -> &[(usize, usize)] {
        &self.queries
    }
}

/// Draws an N-way K-shot episode with `queries_per_class` held-out queries
/// per class. Deterministic given the seed.
pub fn sample_episode(
    store: &FeatureStore,
    n_way: usize,
    k_shot: usize,
    queries_per_class: usize,
    seed: u64,
) -> Result<Episode> {
    if n_way == 0 || k_shot == 0 || queries_per_class == 0 {
        return Err(Error::InvalidParam(
            "way, shot and queries-per-class must all be at least 1".into(),
        ));
    }
    let per_class = k_shot + queries_per_class;
    let eligible: Vec<usize> = (0..store.num_classes())
        .filter(|&c| store.class_records(c).map(|r| r.len()).unwrap_or(0) >= per_class)
        .collect();
    if eligible.len() < n_way {
        return Err(Error::InsufficientData(format!(
            "need {n_way} classes with at least {per_class} records each, found {}",
            eligible.len()
        )));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let picked = rand::seq::index::sample(&mut rng, eligible.len(), n_way);
    let mut support = Vec::with_capacity(n_way);
    let mut queries = Vec::new();
    for (slot, pick) in picked.iter().enumerate() {
        let class = eligible[pick] as u32;
        let records = store.class_records(class as usize)?;
        let chosen = rand::seq::index::sample(&mut rng, records.len(), per_class);
        let chosen: Vec<usize> = chosen.iter().map(|i| records[i]).collect();
        support.push(chosen[..k_shot].to_vec());
        for &idx in &chosen[k_shot..] {
            queries.push((idx, slot));
        }
    }
    Episode::new(store, support, queries)
}

/// The four per-class score vectors of one query: ordered and unordered
/// matcher, each on both modalities. Higher is better in all four.
#[derive(Debug, Clone, PartialEq)]
pub struct FourScores {
    /// Negated mean ordered-alignment distance, appearance stream.
    pub ota_rgb: Vec<f64>,
    /// Negated mean ordered-alignment distance, motion stream.
    pub ota_flow: Vec<f64>,
    /// Mean perfect-matching similarity, appearance stream.
    pub km_rgb: Vec<f64>,
    /// Mean perfect-matching similarity, motion stream.
    pub km_flow: Vec<f64>,
}

impl FourScores {
    /// The four vectors in fixed order (ota_rgb, ota_flow, km_rgb, km_flow).
    pub fn branches(&self) -> [&[f64]; 4] {
        [&self.ota_rgb, &self.ota_flow, &self.km_rgb, &self.km_flow]
    }
}

pub(crate) fn adapted_frames(
    record: &VideoRecord,
    modality: Modality,
    adapters: Option<&Adapters>,
) -> Result<Frames> {
    let frames = record.sequence(modality).to_frames();
    match adapters {
        Some(a) => adapter_forward(&frames, a.params(modality)),
        None => Ok(frames),
    }
}

/// Scores one query against every class of an episode along all four routes.
///
/// Ordered scores are the negated mean optimal-alignment distance over the
/// class's `K` support records; unordered scores are the mean
/// perfect-matching similarity. Adapters, when given, are applied to both
/// support and query features first.
pub fn class_prototype_scores(
    store: &FeatureStore,
    episode: &Episode,
    adapters: Option<&Adapters>,
    query: &VideoRecord,
) -> Result<FourScores> {
    let n = episode.way();
    let mut scores = FourScores {
        ota_rgb: vec![0.0; n],
        ota_flow: vec![0.0; n],
        km_rgb: vec![0.0; n],
        km_flow: vec![0.0; n],
    };
    for modality in [Modality::Rgb, Modality::Flow] {
        let q = adapted_frames(query, modality, adapters)?;
        for (slot, row) in episode.support().iter().enumerate() {
            let mut dist_sum = 0.0;
            let mut sim_sum = 0.0;
            for &idx in row {
                let s = adapted_frames(store.record(idx)?, modality, adapters)?;
                dist_sum += video_distance_ota(&s, &q)?.0;
                sim_sum += video_similarity_km(&s, &q)?.0;
            }
            let k = row.len() as f64;
            let (ota, km) = match modality {
                Modality::Rgb => (&mut scores.ota_rgb, &mut scores.km_rgb),
                Modality::Flow => (&mut scores.ota_flow, &mut scores.km_flow),
            };
            ota[slot] = -(dist_sum / k);
            km[slot] = sim_sum / k;
        }
    }
    Ok(scores)
}

/// Nonnegative weights of the four fused branches.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FusionWeights {
    /// Ordered matcher, appearance stream.
    pub ota_rgb: f64,
    /// Ordered matcher, motion stream.
    pub ota_flow: f64,
    /// Unordered matcher, appearance stream.
    pub km_rgb: f64,
    /// Unordered matcher, motion stream.
    pub km_flow: f64,
}

impl Default for FusionWeights {
    fn default() -> Self {
        FusionWeights {
            ota_rgb: 0.25,
            ota_flow: 0.25,
            km_rgb: 0.25,
            km_flow: 0.25,
        }
    }
}

impl FusionWeights {
    /// Weights in branch order (ota_rgb, ota_flow, km_rgb, km_flow).
    pub fn as_array(&self) -> [f64; 4] {
        [self.ota_rgb, self.ota_flow, self.km_rgb, self.km_flow]
    }

    /// Checks nonnegativity, finiteness, and that some weight is positive.
    pub fn validate(&self) -> Result<()> {
        let w = self.as_array();
        if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidParam(
                "fusion weights must be finite and nonnegative".into(),
            ));
        }
        if w.iter().all(|&v| v == 0.0) {
            return Err(Error::InvalidParam(
                "at least one fusion weight must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Z-normalizes a score vector in place: zero mean, unit variance across
/// the `N` entries; a (numerically) constant vector maps to all zeros.
fn z_normalize(v: &[f64]) -> Vec<f64> {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let sd = var.sqrt();
    if sd < 1e-12 {
        vec![0.0; v.len()]
    } else {
        v.iter().map(|x| (x - mean) / sd).collect()
    }
}

/// Fuses the four score vectors into one: each vector is z-normalized
/// across classes, then combined by the weighted sum.
pub fn fuse_scores(scores: &FourScores, weights: &FusionWeights) -> Result<Vec<f64>> {
    weights.validate()?;
    let n = scores.ota_rgb.len();
    for branch in scores.branches() {
        if branch.len() != n {
            return Err(Error::LengthMismatch {
                left: n,
                right: branch.len(),
            });
        }
    }
    let mut fused = vec![0.0; n];
    for (branch, w) in scores.branches().into_iter().zip(weights.as_array()) {
        if w == 0.0 {
            continue;
        }
        for (f, z) in fused.iter_mut().zip(z_normalize(branch)) {
            *f += w * z;
        }
    }
    Ok(fused)
}

/// Argmax readout; ties resolve to the lowest index.
pub fn classify(fused: &[f64]) -> Result<usize> {
    if fused.is_empty() {
        return Err(Error::InsufficientData("empty score vector".into()));
    }
    if fused.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            context: "fused score",
        });
    }
    let mut best = 0;
    for (i, &v) in fused.iter().enumerate().skip(1) {
        if v > fused[best] {
            best = i;
        }
    }
    Ok(best)
}

/// Evaluation protocol parameters.
#[derive(Debug, Clone, Serialize)]
pub struct EvalConfig {
    /// Classes per episode `N`.
    pub n_way: usize,
    /// Support records per class `K`.
    pub k_shot: usize,
    /// Held-out queries per class.
    pub queries_per_class: usize,
    /// Number of independently seeded episodes.
    pub episodes: usize,
    /// Fusion weights.
    pub weights: FusionWeights,
    /// Base seed; episode `i` derives its own stream from it.
    pub seed: u64,
    /// Worker threads; `None` uses the default pool. Purely a throughput
    /// knob: results are identical for every setting.
    pub threads: Option<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            n_way: 5,
            k_shot: 1,
            queries_per_class: 1,
            episodes: 10_000,
            weights: FusionWeights::default(),
            seed: 0,
            threads: None,
        }
    }
}

/// Accuracy of each branch alone and of the fused score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BranchAccuracies {
    /// Ordered matcher on appearance features.
    pub ota_rgb: f64,
    /// Ordered matcher on motion features.
    pub ota_flow: f64,
    /// Unordered matcher on appearance features.
    pub km_rgb: f64,
    /// Unordered matcher on motion features.
    pub km_flow: f64,
    /// Weighted fusion of all four.
    pub fused: f64,
}

/// Evaluation outcome over all episodes.
#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    /// Mean fused accuracy over episodes.
    pub mean_accuracy: f64,
    /// 95% confidence half-width over per-episode accuracies.
    pub ci95: f64,
    /// Number of episodes evaluated.
    pub episodes: usize,
    /// Per-branch and fused accuracies over all queries.
    pub branch_accuracies: BranchAccuracies,
    /// Echo of the configuration that produced the report.
    pub config: EvalConfig,
    /// Per-episode fused accuracies (not serialized).
    #[serde(skip)]
    pub per_episode_accuracy: Vec<f64>,
}

struct EpisodeOutcome {
    queries: usize,
    branch_correct: [usize; 4],
    fused_correct: usize,
}

fn evaluate_episode(
    store: &FeatureStore,
    cfg: &EvalConfig,
    adapters: Option<&Adapters>,
    seed: u64,
) -> Result<EpisodeOutcome> {
    let episode = sample_episode(store, cfg.n_way, cfg.k_shot, cfg.queries_per_class, seed)?;
    let mut outcome = EpisodeOutcome {
        queries: 0,
        branch_correct: [0; 4],
        fused_correct: 0,
    };
    for &(query_idx, true_slot) in episode.queries() {
        let query = store.record(query_idx)?;
        let scores = class_prototype_scores(store, &episode, adapters, query)?;
        outcome.queries += 1;
        for (b, branch) in scores.branches().into_iter().enumerate() {
            if classify(branch)? == true_slot {
                outcome.branch_correct[b] += 1;
            }
        }
        let fused = fuse_scores(&scores, &cfg.weights)?;
        if classify(&fused)? == true_slot {
            outcome.fused_correct += 1;
        }
    }
    Ok(outcome)
}

/// Runs the episodic protocol: `episodes` independently seeded episodes,
/// evaluated in parallel, reduced by episode index.
///
/// The result is a pure function of `(store, cfg, adapters)`: episode `i`
/// always uses `derive_seed(cfg.seed, i)`, and the reduction is
/// order-preserving, so thread count cannot change any reported number.
pub fn evaluate(
    store: &FeatureStore,
    cfg: &EvalConfig,
    adapters: Option<&Adapters>,
) -> Result<EvalReport> {
    if cfg.episodes == 0 {
        return Err(Error::InvalidParam("episodes must be at least 1".into()));
    }
    cfg.weights.validate()?;

    let run = || -> Result<Vec<EpisodeOutcome>> {
        (0..cfg.episodes)
            .into_par_iter()
            .map(|i| evaluate_episode(store, cfg, adapters, derive_seed(cfg.seed, i as u64)))
            .collect()
    };
    let outcomes = match cfg.threads {
        Some(t) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(t)
                .build()
                .map_err(|e| Error::ThreadPool(e.to_string()))?;
            pool.install(run)?
        }
        None => run()?,
    };

    let per_episode: Vec<f64> = outcomes
        .iter()
        .map(|o| o.fused_correct as f64 / o.queries as f64)
        .collect();
    let e = per_episode.len() as f64;
    let mean = per_episode.iter().sum::<f64>() / e;
    let ci95 = if per_episode.len() > 1 {
        let var = per_episode.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / (e - 1.0);
        1.96 * (var / e).sqrt()
    } else {
        0.0
    };
    let total_queries: usize = outcomes.iter().map(|o| o.queries).sum();
    let branch_total = |b: usize| -> f64 {
        outcomes.iter().map(|o| o.branch_correct[b]).sum::<usize>() as f64 / total_queries as f64
    };
    let fused_total =
        outcomes.iter().map(|o| o.fused_correct).sum::<usize>() as f64 / total_queries as f64;

    Ok(EvalReport {
        mean_accuracy: mean,
        ci95,
        episodes: outcomes.len(),
        branch_accuracies: BranchAccuracies {
            ota_rgb: branch_total(0),
            ota_flow: branch_total(1),
            km_rgb: branch_total(2),
            km_flow: branch_total(3),
            fused: fused_total,
        },
        config: cfg.clone(),
        per_episode_accuracy: per_episode,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::{FeatureSequence, VideoRecord};
    use crate::synth::{gen_synthetic, SynthConfig};

    fn tiny_store(num_classes: u32, per_class: u32) -> FeatureStore {
        // Deterministic, well-separated: class c points along axis c.
        let dim = (num_classes as usize).max(2) + 1;
        let mut records = Vec::new();
        for c in 0..num_classes {
            for v in 0..per_class {
                let mut rgb = vec![0.01f32; 2 * dim];
                let mut flow = vec![0.01f32; 2 * dim];
                for t in 0..2 {
                    rgb[t * dim + c as usize] = 1.0 + v as f32 * 0.01;
                    flow[t * dim + c as usize] = 0.5;
                }
                records.push(
                    VideoRecord::new(
                        c * per_class + v,
                        c,
                        FeatureSequence::new(Modality::Rgb, 2, dim, rgb).unwrap(),
                        FeatureSequence::new(Modality::Flow, 2, dim, flow).unwrap(),
                    )
                    .unwrap(),
                );
            }
        }
        FeatureStore::new(records, num_classes as usize).unwrap()
    }

    #[test]
    fn forced_selection_uses_every_record_disjointly() {
        let store = tiny_store(3, 2); // exactly K+1 records per class
        let ep = sample_episode(&store, 3, 1, 1, 99).unwrap();
        assert_eq!(ep.way(), 3);
        assert_eq!(ep.shot(), 1);
        let mut used: Vec<usize> = ep.support().iter().flatten().copied().collect();
        used.extend(ep.queries().iter().map(|&(i, _)| i));
        used.sort_unstable();
        assert_eq!(used, (0..6).collect::<Vec<_>>());
    }

    #[test]
    fn same_seed_gives_identical_episodes() {
        let store = tiny_store(6, 4);
        let a = sample_episode(&store, 4, 2, 1, 123).unwrap();
        let b = sample_episode(&store, 4, 2, 1, 123).unwrap();
        assert_eq!(a, b);
        let c = sample_episode(&store, 4, 2, 1, 124).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn five_way_one_shot_episode_shape() {
        let store = gen_synthetic(&SynthConfig::default()).unwrap();
        let ep = sample_episode(&store, 5, 1, 1, 7).unwrap();
        assert_eq!(ep.way(), 5);
        assert_eq!(ep.support().iter().map(|r| r.len()).sum::<usize>(), 5);
        assert_eq!(ep.queries().len(), 5);
        // Disjointness and label consistency are enforced by Episode::new.
    }

    #[test]
    fn insufficient_records_are_reported() {
        let store = tiny_store(3, 2);
        assert!(matches!(
            sample_episode(&store, 4, 1, 1, 0),
            Err(Error::InsufficientData(_))
        ));
        assert!(matches!(
            sample_episode(&store, 3, 2, 1, 0),
            Err(Error::InsufficientData(_))
        ));
    }

    #[test]
    fn self_match_dominates_all_four_scores() {
        // Noiseless, unwarped, unpermuted: all videos of a class identical.
        let cfg = SynthConfig {
            num_classes: 4,
            videos_per_class: 3,
            noise_sigma: 0.0,
            speed_warp_range: (1.0, 1.0),
            permute_subactions: false,
            ..SynthConfig::default()
        };
        let store = gen_synthetic(&cfg).unwrap();
        let ep = sample_episode(&store, 4, 1, 1, 5).unwrap();
        let (query_idx, true_slot) = ep.queries()[0];
        let scores =
            class_prototype_scores(&store, &ep, None, store.record(query_idx).unwrap()).unwrap();
        for branch in scores.branches() {
            let best = classify(branch).unwrap();
            assert_eq!(best, true_slot);
        }
    }

    #[test]
    fn uninformative_modality_yields_constant_scores() {
        // Flow identical everywhere: flow branches carry no class signal.
        let dim = 4;
        let flow_payload = vec![0.3f32; 2 * dim];
        let mut records = Vec::new();
        for c in 0..3u32 {
            for v in 0..2u32 {
                let mut rgb = vec![0.05f32; 2 * dim];
                rgb[c as usize] = 1.0;
                rgb[dim + c as usize] = 1.0;
                records.push(
                    VideoRecord::new(
                        c * 2 + v,
                        c,
                        FeatureSequence::new(Modality::Rgb, 2, dim, rgb).unwrap(),
                        FeatureSequence::new(Modality::Flow, 2, dim, flow_payload.clone())
                            .unwrap(),
                    )
                    .unwrap(),
                );
            }
        }
        let store = FeatureStore::new(records, 3).unwrap();
        let ep = sample_episode(&store, 3, 1, 1, 1).unwrap();
        let (query_idx, _) = ep.queries()[0];
        let scores =
            class_prototype_scores(&store, &ep, None, store.record(query_idx).unwrap()).unwrap();
        for v in [&scores.ota_flow, &scores.km_flow] {
            let spread = v.iter().cloned().fold(f64::MIN, f64::max)
                - v.iter().cloned().fold(f64::MAX, f64::min);
            assert!(spread.abs() < 1e-9, "flow scores should be constant: {v:?}");
        }
    }

    #[test]
    fn scores_match_primitive_recomputation() {
        let store = gen_synthetic(&SynthConfig {
            num_classes: 5,
            videos_per_class: 4,
            ..SynthConfig::default()
        })
        .unwrap();
        let ep = sample_episode(&store, 3, 2, 1, 17).unwrap();
        let (query_idx, _) = ep.queries()[1];
        let query = store.record(query_idx).unwrap();
        let scores = class_prototype_scores(&store, &ep, None, query).unwrap();
        for (slot, row) in ep.support().iter().enumerate() {
            for (modality, ota, km) in [
                (Modality::Rgb, &scores.ota_rgb, &scores.km_rgb),
                (Modality::Flow, &scores.ota_flow, &scores.km_flow),
            ] {
                let q = query.sequence(modality).to_frames();
                let mut dsum = 0.0;
                let mut ssum = 0.0;
                for &idx in row {
                    let s = store.record(idx).unwrap().sequence(modality).to_frames();
                    dsum += video_distance_ota(&s, &q).unwrap().0;
                    ssum += video_similarity_km(&s, &q).unwrap().0;
                }
                assert!((ota[slot] - (-(dsum / row.len() as f64))).abs() < 1e-10);
                assert!((km[slot] - ssum / row.len() as f64).abs() < 1e-10);
            }
        }
    }

    fn demo_scores() -> FourScores {
        FourScores {
            ota_rgb: vec![0.3, -0.2, 0.9],
            ota_flow: vec![-1.0, 2.0, 0.5],
            km_rgb: vec![1.5, 1.5, 1.5],
            km_flow: vec![0.0, 0.1, 0.2],
        }
    }

    #[test]
    fn one_hot_weights_select_a_single_branch() {
        let s = demo_scores();
        let w = FusionWeights {
            ota_rgb: 1.0,
            ota_flow: 0.0,
            km_rgb: 0.0,
            km_flow: 0.0,
        };
        let fused = fuse_scores(&s, &w).unwrap();
        assert_eq!(classify(&fused).unwrap(), classify(&s.ota_rgb).unwrap());
    }

    #[test]
    fn convex_mix_of_identical_vectors_matches_single_branch() {
        let mut s = demo_scores();
        s.ota_flow = s.ota_rgb.clone();
        let half = FusionWeights {
            ota_rgb: 0.5,
            ota_flow: 0.5,
            km_rgb: 0.0,
            km_flow: 0.0,
        };
        let single = FusionWeights {
            ota_rgb: 1.0,
            ota_flow: 0.0,
            km_rgb: 0.0,
            km_flow: 0.0,
        };
        let a = fuse_scores(&s, &half).unwrap();
        let b = fuse_scores(&s, &single).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn fusion_matches_hand_computation() {
        let s = FourScores {
            ota_rgb: vec![1.0, 3.0],         // z = [-1, 1]
            ota_flow: vec![5.0, 5.0],        // constant -> zeros
            km_rgb: vec![2.0, 0.0],          // z = [1, -1]
            km_flow: vec![-1.0, 1.0],        // z = [-1, 1]
        };
        let w = FusionWeights {
            ota_rgb: 0.25,
            ota_flow: 0.25,
            km_rgb: 0.25,
            km_flow: 0.25,
        };
        let fused = fuse_scores(&s, &w).unwrap();
        // 0.25*(-1) + 0 + 0.25*1 + 0.25*(-1) = -0.25; mirrored for entry 1.
        assert!((fused[0] + 0.25).abs() < 1e-12);
        assert!((fused[1] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn weight_scaling_preserves_the_argmax() {
        let s = demo_scores();
        let w = FusionWeights::default();
        let scaled = FusionWeights {
            ota_rgb: w.ota_rgb * 7.0,
            ota_flow: w.ota_flow * 7.0,
            km_rgb: w.km_rgb * 7.0,
            km_flow: w.km_flow * 7.0,
        };
        let a = classify(&fuse_scores(&s, &w).unwrap()).unwrap();
        let b = classify(&fuse_scores(&s, &scaled).unwrap()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_weights_are_rejected() {
        let w = FusionWeights {
            ota_rgb: 0.0,
            ota_flow: 0.0,
            km_rgb: 0.0,
            km_flow: 0.0,
        };
        assert!(fuse_scores(&demo_scores(), &w).is_err());
    }

    #[test]
    fn classify_rules() {
        assert_eq!(classify(&[0.1, 0.9, 0.3]).unwrap(), 1);
        assert_eq!(classify(&[0.5, 0.5, 0.5]).unwrap(), 0);
        assert_eq!(classify(&[0.42]).unwrap(), 0);
        assert!(classify(&[]).is_err());
        assert!(classify(&[f64::NAN]).is_err());
    }

    #[test]
    fn separable_store_evaluates_to_perfect_accuracy() {
        let store = tiny_store(5, 3);
        let cfg = EvalConfig {
            n_way: 4,
            k_shot: 1,
            queries_per_class: 1,
            episodes: 20,
            ..EvalConfig::default()
        };
        let report = evaluate(&store, &cfg, None).unwrap();
        assert_eq!(report.mean_accuracy, 1.0);
        assert_eq!(report.ci95, 0.0);
        assert_eq!(report.branch_accuracies.fused, 1.0);
        assert_eq!(report.episodes, 20);
        assert_eq!(report.per_episode_accuracy.len(), 20);
    }

    #[test]
    fn evaluation_is_deterministic_and_thread_count_independent() {
        let store = gen_synthetic(&SynthConfig {
            num_classes: 6,
            videos_per_class: 5,
            ..SynthConfig::default()
        })
        .unwrap();
        let base = EvalConfig {
            n_way: 4,
            k_shot: 1,
            queries_per_class: 2,
            episodes: 30,
            seed: 11,
            ..EvalConfig::default()
        };
        let one = evaluate(
            &store,
            &EvalConfig {
                threads: Some(1),
                ..base.clone()
            },
            None,
        )
        .unwrap();
        let four = evaluate(
            &store,
            &EvalConfig {
                threads: Some(4),
                ..base.clone()
            },
            None,
        )
        .unwrap();
        assert_eq!(one.mean_accuracy, four.mean_accuracy);
        assert_eq!(one.ci95, four.ci95);
        assert_eq!(one.branch_accuracies, four.branch_accuracies);
        assert_eq!(one.per_episode_accuracy, four.per_episode_accuracy);
        // And reruns of the same config agree exactly.
        let again = evaluate(
            &store,
            &EvalConfig {
                threads: Some(4),
                ..base
            },
            None,
        )
        .unwrap();
        assert_eq!(four.mean_accuracy, again.mean_accuracy);
    }

    #[test]
    fn episode_invariants_hold_across_many_seeds() {
        let store = gen_synthetic(&SynthConfig {
            num_classes: 8,
            videos_per_class: 6,
            ..SynthConfig::default()
        })
        .unwrap();
        for seed in 0..100 {
            let ep = sample_episode(&store, 5, 2, 2, seed).unwrap();
            let support: std::collections::HashSet<usize> =
                ep.support().iter().flatten().copied().collect();
            assert_eq!(support.len(), 10);
            for &(idx, slot) in ep.queries() {
                assert!(!support.contains(&idx));
                assert_eq!(
                    store.record(idx).unwrap().class_id,
                    ep.classes()[slot]
                );
            }
        }
    }
}

//! Desk-scale adapter training with the combined objective.
//!
//! The objective couples three terms on adapted features:
//! `L = l_cl * L_contrastive + l_ota * (L_ord^rgb + L_ord^flow) + l_km * (L_unord^rgb + L_unord^flow)`.
//! The contrastive term pulls paired appearance/motion features together;
//! the matching terms are per-query cross-entropies over episode class
//! scores. Optimization is plain per-batch gradient descent with analytic
//! gradients; the discrete alignment path and matching assignment are
//! treated as locally constant (straight-through), which is also the
//! convention the finite-difference checks freeze.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::Serialize;

use crate::align::{ota_loss, ota_loss_grad, video_distance_ota, AlignmentPath};
use crate::assign::{km_loss, km_loss_grad, video_similarity_km};
use crate::contrastive::{
    adapter_backward, adapter_forward, mcl_loss_and_grads, AdapterGrad, Adapters,
    ContrastiveBatch,
};
use crate::derive_seed;
use crate::episode::{sample_episode, Episode};
use crate::error::{Error, Result};
use crate::frames::{axpy, Frames};
use crate::sim::cosine_with_grad;
use crate::store::{FeatureStore, Modality};

/// Training hyperparameters.
#[derive(Debug, Clone, Serialize)]
pub struct TrainConfig {
    /// Full passes over the (fixed) batch schedule.
    pub epochs: usize,
    /// Records per contrastive batch.
    pub batch_size: usize,
    /// Gradient-descent step size; zero is allowed and leaves parameters
    /// untouched (useful as a no-op baseline).
    pub learning_rate: f64,
    /// Contrastive softmax temperature.
    pub temperature: f64,
    /// Weight of the contrastive term.
    pub lambda_cl: f64,
    /// Weight of the ordered-matching term.
    pub lambda_ota: f64,
    /// Weight of the unordered-matching term.
    pub lambda_km: f64,
    /// Adapter bottleneck width; `None` picks `dim / 4` (at least 1).
    pub bottleneck: Option<usize>,
    /// Seed controlling the batch schedule and parameter initialization.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 8,
            learning_rate: 1e-5,
            temperature: 0.1,
            lambda_cl: 1.0,
            lambda_ota: 1.0,
            lambda_km: 1.0,
            bottleneck: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Validates ranges and cross-field constraints.
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::InvalidParam("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidParam("batch size must be at least 1".into()));
        }
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(Error::InvalidParam(format!(
                "learning rate must be finite and nonnegative, got {}",
                self.learning_rate
            )));
        }
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::InvalidParam(format!(
                "temperature must be positive and finite, got {}",
                self.temperature
            )));
        }
        let lambdas = [self.lambda_cl, self.lambda_ota, self.lambda_km];
        if lambdas.iter().any(|l| !l.is_finite() || *l < 0.0) {
            return Err(Error::InvalidParam(
                "loss weights must be finite and nonnegative".into(),
            ));
        }
        if lambdas.iter().all(|&l| l == 0.0) {
            return Err(Error::InvalidParam(
                "at least one loss weight must be positive".into(),
            ));
        }
        Ok(())
    }

    fn needs_matching(&self) -> bool {
        self.lambda_ota > 0.0 || self.lambda_km > 0.0
    }
}

/// One training batch: a contrastive chunk of records plus (when the store
/// supports it) a sampled episode for the matching terms.
#[derive(Debug, Clone)]
pub struct TrainBatch {
    /// Record indices forming the contrastive pairs.
    pub contrastive: Vec<usize>,
    /// Episode for the matching losses; `None` when the store cannot
    /// support episode sampling.
    pub episode: Option<Episode>,
}

/// Loss components of one batch or one epoch.
///
/// `l_cl`, `l_ota`, `l_km` are the raw (unweighted) component values;
/// `total` applies the configured weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossBreakdown {
    /// Weighted total.
    pub total: f64,
    /// Contrastive component.
    pub l_cl: f64,
    /// Ordered-matching component (both modalities summed).
    pub l_ota: f64,
    /// Unordered-matching component (both modalities summed).
    pub l_km: f64,
}

impl LossBreakdown {
    fn zero() -> Self {
        LossBreakdown {
            total: 0.0,
            l_cl: 0.0,
            l_ota: 0.0,
            l_km: 0.0,
        }
    }
}

/// Gradients for both adapters.
#[derive(Debug, Clone)]
pub struct TrainGrads {
    /// Appearance-adapter gradient.
    pub rgb: AdapterGrad,
    /// Motion-adapter gradient.
    pub flow: AdapterGrad,
}

/// Discrete structures captured at a reference parameter point: the
/// alignment path and matching assignment of every (query, modality, class,
/// shot) cell, in deterministic iteration order. Finite-difference probes
/// replay these instead of re-solving, matching the straight-through
/// convention of the analytic gradient.
#[derive(Debug, Clone, Default)]
pub struct FrozenStructures {
    paths: Vec<AlignmentPath>,
    assignments: Vec<Vec<usize>>,
}

/// The deterministic batch schedule for one epoch: a seeded shuffle of all
/// records chunked by batch size, each chunk paired with an independently
/// seeded episode. The schedule depends only on `(store, cfg.seed)` and is
/// reused verbatim every epoch, so a zero learning rate yields an exactly
/// flat loss trajectory.
pub fn build_schedule(store: &FeatureStore, cfg: &TrainConfig) -> Result<Vec<TrainBatch>> {
    cfg.validate()?;
    let mut order: Vec<usize> = (0..store.len()).collect();
    let mut rng = ChaCha20Rng::seed_from_u64(derive_seed(cfg.seed, 1 << 32));
    order.shuffle(&mut rng);

    // Largest episode the store supports with 1 query per class, up to
    // 5-way 1-shot.
    let eligible = (0..store.num_classes())
        .filter(|&c| store.class_records(c).map(|r| r.len()).unwrap_or(0) >= 2)
        .count();
    let n_way = eligible.min(5);
    if n_way == 0 && cfg.needs_matching() {
        return Err(Error::InsufficientData(
            "matching losses need at least one class with two records".into(),
        ));
    }

    let mut batches = Vec::new();
    for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
        let episode = if n_way > 0 {
            Some(sample_episode(
                store,
                n_way,
                1,
                1,
                derive_seed(cfg.seed, bi as u64),
            )?)
        } else {
            None
        };
        batches.push(TrainBatch {
            contrastive: chunk.to_vec(),
            episode,
        });
    }
    Ok(batches)
}

/// Adapted-feature gradient accumulator keyed by record index.
type FeatureGrads = BTreeMap<usize, [Option<Frames>; 2]>;

fn add_feature_grad(acc: &mut FeatureGrads, record: usize, modality: Modality, grad: &Frames, scale: f64) {
    let slot = match modality {
        Modality::Rgb => 0,
        Modality::Flow => 1,
    };
    let entry = &mut acc.entry(record).or_insert([None, None])[slot];
    match entry {
        Some(g) => axpy(scale, grad.as_slice(), g.as_mut_slice()),
        None => {
            let mut g = Frames::zeros(grad.num_frames(), grad.dim());
            axpy(scale, grad.as_slice(), g.as_mut_slice());
            *entry = Some(g);
        }
    }
}

/// Internal evaluation engine shared by loss, gradient, and freeze/replay.
struct BatchEval<'a> {
    store: &'a FeatureStore,
    batch: &'a TrainBatch,
    adapters: &'a Adapters,
    cfg: &'a TrainConfig,
}

impl<'a> BatchEval<'a> {
    fn adapted(&self, record: usize, modality: Modality) -> Result<Frames> {
        let frames = self.store.record(record)?.sequence(modality).to_frames();
        adapter_forward(&frames, self.adapters.params(modality))
    }

    /// Contrastive component; gradients flow into `grads` when requested.
    fn contrastive_term(&self, grads: Option<&mut FeatureGrads>) -> Result<f64> {
        let batch = &self.batch.contrastive;
        let pairs: Vec<(Frames, Frames)> = batch
            .iter()
            .map(|&i| Ok((self.adapted(i, Modality::Rgb)?, self.adapted(i, Modality::Flow)?)))
            .collect::<Result<_>>()?;
        let cb = ContrastiveBatch::new(pairs, self.cfg.temperature)?;
        match grads {
            None => {
                let sim = crate::contrastive::mcl_similarity_matrix(&cb)?;
                crate::contrastive::infonce_loss(&sim, self.cfg.temperature)
            }
            Some(acc) => {
                let (loss, grad_rgb, grad_flow) = mcl_loss_and_grads(&cb)?;
                for (pos, &record) in batch.iter().enumerate() {
                    add_feature_grad(acc, record, Modality::Rgb, &grad_rgb[pos], 1.0);
                    add_feature_grad(acc, record, Modality::Flow, &grad_flow[pos], 1.0);
                }
                Ok(loss)
            }
        }
    }

    /// Ordered cost of one support/query pair; replays a frozen path when
    /// given one, otherwise solves the alignment fresh.
    fn pair_ota(
        &self,
        s: &Frames,
        q: &Frames,
        frozen: Option<&AlignmentPath>,
    ) -> Result<(f64, AlignmentPath)> {
        match frozen {
            Some(path) => {
                let mut cost = 0.0;
                for &(l, m) in path.steps() {
                    let (c, _, _) = cosine_with_grad(s.frame(l), q.frame(m))?;
                    cost += 1.0 - c;
                }
                Ok((cost, path.clone()))
            }
            None => video_distance_ota(s, q),
        }
    }

    /// Unordered total of one support/query pair; replays a frozen
    /// assignment when given one.
    fn pair_km(
        &self,
        s: &Frames,
        q: &Frames,
        frozen: Option<&[usize]>,
    ) -> Result<(f64, Vec<usize>)> {
        match frozen {
            Some(assignment) => {
                let mut total = 0.0;
                for (l, &m) in assignment.iter().enumerate() {
                    let (c, _, _) = cosine_with_grad(s.frame(l), q.frame(m))?;
                    total += c;
                }
                Ok((total, assignment.to_vec()))
            }
            None => {
                let (total, matching) = video_similarity_km(s, q)?;
                Ok((total, matching.assignment().to_vec()))
            }
        }
    }

    /// Matching components over the batch episode. Returns
    /// `(l_ota, l_km)`, records structures when `record_into` is given,
    /// replays `frozen` when given, and accumulates adapted-feature
    /// gradients when `grads` is given.
    fn matching_terms(
        &self,
        frozen: Option<&FrozenStructures>,
        mut record_into: Option<&mut FrozenStructures>,
        mut grads: Option<&mut FeatureGrads>,
    ) -> Result<(f64, f64)> {
        let episode = match &self.batch.episode {
            Some(e) => e,
            None => return Ok((0.0, 0.0)),
        };
        let num_queries = episode.queries().len();
        if num_queries == 0 {
            return Ok((0.0, 0.0));
        }
        let inv_q = 1.0 / num_queries as f64;
        let mut l_ota = 0.0;
        let mut l_km = 0.0;
        let mut cell = 0usize; // flat (query, modality, class, shot) counter

        for &(query_idx, true_slot) in episode.queries() {
            for modality in [Modality::Rgb, Modality::Flow] {
                let q = self.adapted(query_idx, modality)?;
                let n = episode.way();
                let mut distances = vec![0.0; n];
                let mut totals = vec![0.0; n];
                // Per (class, shot): adapted support, path, assignment.
                let mut cells: Vec<(usize, Frames, AlignmentPath, Vec<usize>)> = Vec::new();
                for (slot, row) in episode.support().iter().enumerate() {
                    let inv_k = 1.0 / row.len() as f64;
                    for &sidx in row {
                        let s = self.adapted(sidx, modality)?;
                        let (fp, fa) = match frozen {
                            Some(f) => (Some(&f.paths[cell]), Some(f.assignments[cell].as_slice())),
                            None => (None, None),
                        };
                        let (cost, path) = self.pair_ota(&s, &q, fp)?;
                        let (total, assignment) = self.pair_km(&s, &q, fa)?;
                        distances[slot] += cost * inv_k;
                        totals[slot] += total * inv_k;
                        if let Some(rec) = record_into.as_deref_mut() {
                            rec.paths.push(path.clone());
                            rec.assignments.push(assignment.clone());
                        }
                        cells.push((sidx, s, path, assignment));
                        cell += 1;
                    }
                }
                l_ota += ota_loss(&distances, true_slot)? * inv_q;
                l_km += km_loss(&totals, true_slot)? * inv_q;

                if let Some(acc) = grads.as_deref_mut() {
                    // Chain rule through the frozen structures.
                    let g_ota = ota_loss_grad(&distances, true_slot)?;
                    let g_km = km_loss_grad(&totals, true_slot)?;
                    let mut q_grad = Frames::zeros(q.num_frames(), q.dim());
                    let mut cell_it = cells.iter();
                    for (slot, row) in episode.support().iter().enumerate() {
                        let inv_k = 1.0 / row.len() as f64;
                        // d total_loss / d cost and / d total for this cell.
                        let w_ota = self.cfg.lambda_ota * g_ota[slot] * inv_q * inv_k;
                        let w_km = self.cfg.lambda_km * g_km[slot] * inv_q * inv_k;
                        for _ in row {
                            let (sidx, s, path, assignment) =
                                cell_it.next().expect("cell bookkeeping");
                            let mut s_grad = Frames::zeros(s.num_frames(), s.dim());
                            if w_ota != 0.0 {
                                for &(l, m) in path.steps() {
                                    let (_, gu, gv) =
                                        cosine_with_grad(s.frame(l), q.frame(m))?;
                                    // cost adds 1 - cos: negate the cosine grads.
                                    axpy(-w_ota, &gu, s_grad.frame_mut(l));
                                    axpy(-w_ota, &gv, q_grad.frame_mut(m));
                                }
                            }
                            if w_km != 0.0 {
                                for (l, &m) in assignment.iter().enumerate() {
                                    let (_, gu, gv) =
                                        cosine_with_grad(s.frame(l), q.frame(m))?;
                                    axpy(w_km, &gu, s_grad.frame_mut(l));
                                    axpy(w_km, &gv, q_grad.frame_mut(m));
                                }
                            }
                            add_feature_grad(acc, *sidx, modality, &s_grad, 1.0);
                        }
                    }
                    add_feature_grad(acc, query_idx, modality, &q_grad, 1.0);
                }
            }
        }
        Ok((l_ota, l_km))
    }

    fn breakdown(&self, l_cl: f64, l_ota: f64, l_km: f64) -> LossBreakdown {
        LossBreakdown {
            total: self.cfg.lambda_cl * l_cl
                + self.cfg.lambda_ota * l_ota
                + self.cfg.lambda_km * l_km,
            l_cl,
            l_ota,
            l_km,
        }
    }
}

/// Combined loss of one batch at the current adapter parameters.
pub fn total_loss(
    store: &FeatureStore,
    batch: &TrainBatch,
    adapters: &Adapters,
    cfg: &TrainConfig,
) -> Result<LossBreakdown> {
    cfg.validate()?;
    let eval = BatchEval {
        store,
        batch,
        adapters,
        cfg,
    };
    let l_cl = if cfg.lambda_cl > 0.0 {
        eval.contrastive_term(None)?
    } else {
        0.0
    };
    let (l_ota, l_km) = if cfg.needs_matching() {
        eval.matching_terms(None, None, None)?
    } else {
        (0.0, 0.0)
    };
    Ok(eval.breakdown(l_cl, l_ota, l_km))
}

/// Captures every alignment path and matching assignment of the batch at
/// the current parameters, for replay by [`total_loss_frozen`].
pub fn freeze_structures(
    store: &FeatureStore,
    batch: &TrainBatch,
    adapters: &Adapters,
    cfg: &TrainConfig,
) -> Result<FrozenStructures> {
    cfg.validate()?;
    let eval = BatchEval {
        store,
        batch,
        adapters,
        cfg,
    };
    let mut frozen = FrozenStructures::default();
    eval.matching_terms(None, Some(&mut frozen), None)?;
    Ok(frozen)
}

/// Combined loss with the discrete structures pinned to `frozen` instead of
/// re-solved. At the parameters where `frozen` was captured this equals
/// [`total_loss`]; under small parameter perturbations it is the smooth
/// function whose derivative the analytic gradient computes.
pub fn total_loss_frozen(
    store: &FeatureStore,
    batch: &TrainBatch,
    adapters: &Adapters,
    cfg: &TrainConfig,
    frozen: &FrozenStructures,
) -> Result<LossBreakdown> {
    cfg.validate()?;
    let eval = BatchEval {
        store,
        batch,
        adapters,
        cfg,
    };
    let l_cl = if cfg.lambda_cl > 0.0 {
        eval.contrastive_term(None)?
    } else {
        0.0
    };
    let (l_ota, l_km) = if cfg.needs_matching() {
        eval.matching_terms(Some(frozen), None, None)?
    } else {
        (0.0, 0.0)
    };
    Ok(eval.breakdown(l_cl, l_ota, l_km))
}

/// Combined loss and its analytic gradient with respect to both adapters.
pub fn total_loss_and_grad(
    store: &FeatureStore,
    batch: &TrainBatch,
    adapters: &Adapters,
    cfg: &TrainConfig,
) -> Result<(LossBreakdown, TrainGrads)> {
    cfg.validate()?;
    let eval = BatchEval {
        store,
        batch,
        adapters,
        cfg,
    };
    // Adapted-feature gradients of the weighted objective. Contrastive
    // feature grads enter unweighted here and are scaled below; matching
    // grads are already weighted inside matching_terms.
    let mut cl_grads = FeatureGrads::new();
    let l_cl = if cfg.lambda_cl > 0.0 {
        eval.contrastive_term(Some(&mut cl_grads))?
    } else {
        0.0
    };
    let mut match_grads = FeatureGrads::new();
    let (l_ota, l_km) = if cfg.needs_matching() {
        eval.matching_terms(None, None, Some(&mut match_grads))?
    } else {
        (0.0, 0.0)
    };

    // Merge: total feature grad = lambda_cl * cl + matching (pre-weighted).
    let mut merged = match_grads;
    for (record, grads) in cl_grads {
        for (slot, g) in grads.into_iter().enumerate() {
            if let Some(g) = g {
                let modality = if slot == 0 { Modality::Rgb } else { Modality::Flow };
                add_feature_grad(&mut merged, record, modality, &g, cfg.lambda_cl);
            }
        }
    }

    // Back-propagate each record's adapted-feature gradient through its
    // adapter.
    let dim = store.dim();
    let bottleneck = adapters.rgb.bottleneck();
    let mut out = TrainGrads {
        rgb: AdapterGrad::zeros(dim, bottleneck),
        flow: AdapterGrad::zeros(dim, bottleneck),
    };
    for (record, grads) in merged {
        for (slot, g) in grads.into_iter().enumerate() {
            let Some(upstream) = g else { continue };
            let modality = if slot == 0 { Modality::Rgb } else { Modality::Flow };
            let x = store.record(record)?.sequence(modality).to_frames();
            let (_, pg) = adapter_backward(&x, adapters.params(modality), &upstream)?;
            match modality {
                Modality::Rgb => out.rgb.accumulate(&pg, 1.0),
                Modality::Flow => out.flow.accumulate(&pg, 1.0),
            }
        }
    }
    Ok((eval.breakdown(l_cl, l_ota, l_km), out))
}

/// Training outcome: final adapters plus the per-epoch loss trajectory.
#[derive(Debug, Clone)]
pub struct TrainResult {
    /// Trained adapter parameters.
    pub adapters: Adapters,
    /// Mean batch loss per epoch, in epoch order.
    pub trajectory: Vec<LossBreakdown>,
}

impl TrainResult {
    /// Renders the trajectory as `epoch,total,l_cl,l_ota,l_km` CSV lines
    /// (with header).
    pub fn trajectory_csv(&self) -> String {
        let mut out = String::from("epoch,total,l_cl,l_ota,l_km\n");
        for (epoch, b) in self.trajectory.iter().enumerate() {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                epoch, b.total, b.l_cl, b.l_ota, b.l_km
            ));
        }
        out
    }
}

/// Runs per-batch gradient descent over the fixed schedule.
///
/// Deterministic given `(store, cfg)`. Reports [`Error::Diverged`] as soon
/// as a batch loss or any parameter stops being finite.
pub fn train(store: &FeatureStore, cfg: &TrainConfig) -> Result<TrainResult> {
    cfg.validate()?;
    let dim = store.dim();
    let bottleneck = match cfg.bottleneck {
        Some(b) => b,
        None => (dim / 4).max(1),
    };
    if bottleneck >= dim {
        return Err(Error::InvalidParam(format!(
            "bottleneck {bottleneck} must be below the feature dimension {dim}"
        )));
    }
    let schedule = build_schedule(store, cfg)?;
    let mut adapters = Adapters::init(dim, bottleneck, derive_seed(cfg.seed, (1 << 32) + 1))?;

    let mut trajectory = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut epoch_sum = LossBreakdown::zero();
        for batch in &schedule {
            // Exploded parameters surface as non-finite intermediates (or
            // zero-norm pooled vectors) inside the loss itself; both mean
            // the optimization diverged at this epoch.
            let (loss, grads) = match total_loss_and_grad(store, batch, &adapters, cfg) {
                Ok(v) => v,
                Err(Error::NonFinite { .. }) | Err(Error::ZeroNorm) => {
                    return Err(Error::Diverged { epoch })
                }
                Err(e) => return Err(e),
            };
            if !loss.total.is_finite() {
                return Err(Error::Diverged { epoch });
            }
            adapters.rgb.step(&grads.rgb, cfg.learning_rate);
            adapters.flow.step(&grads.flow, cfg.learning_rate);
            if adapters.rgb.has_non_finite() || adapters.flow.has_non_finite() {
                return Err(Error::Diverged { epoch });
            }
            epoch_sum.total += loss.total;
            epoch_sum.l_cl += loss.l_cl;
            epoch_sum.l_ota += loss.l_ota;
            epoch_sum.l_km += loss.l_km;
        }
        let n = schedule.len() as f64;
        trajectory.push(LossBreakdown {
            total: epoch_sum.total / n,
            l_cl: epoch_sum.l_cl / n,
            l_ota: epoch_sum.l_ota / n,
            l_km: epoch_sum.l_km / n,
        });
    }
    Ok(TrainResult {
        adapters,
        trajectory,
    })
}

/// Top-1 cross-modal retrieval accuracy over the given records: the
/// fraction whose appearance stream is most similar to its own motion
/// stream among all candidates. Ties resolve to the lowest index.
pub fn retrieval_probe(
    store: &FeatureStore,
    records: &[usize],
    adapters: Option<&Adapters>,
) -> Result<f64> {
    if records.len() < 2 {
        return Err(Error::InsufficientData(
            "retrieval probe needs at least two pairs".into(),
        ));
    }
    let adapt = |record: usize, modality: Modality| -> Result<Frames> {
        let frames = store.record(record)?.sequence(modality).to_frames();
        match adapters {
            Some(a) => adapter_forward(&frames, a.params(modality)),
            None => Ok(frames),
        }
    };
    let rgb: Vec<Frames> = records
        .iter()
        .map(|&r| adapt(r, Modality::Rgb))
        .collect::<Result<_>>()?;
    let flow: Vec<Frames> = records
        .iter()
        .map(|&r| adapt(r, Modality::Flow))
        .collect::<Result<_>>()?;
    let mut hits = 0usize;
    for (i, r) in rgb.iter().enumerate() {
        let mut best = 0usize;
        let mut best_sim = f64::NEG_INFINITY;
        for (j, f) in flow.iter().enumerate() {
            let s = crate::sim::cross_attention_similarity(r, f)?;
            if s > best_sim {
                best_sim = s;
                best = j;
            }
        }
        if best == i {
            hits += 1;
        }
    }
    Ok(hits as f64 / records.len() as f64)
}

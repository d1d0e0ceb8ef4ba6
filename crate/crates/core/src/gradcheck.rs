//! Central finite-difference verification of every analytic gradient.
//!
//! Each check builds a seeded random instance, computes the analytic
//! gradient, probes the same scalar objective with central differences, and
//! reports the worst relative error `|a - n| / max(1, |a|, |n|)`. The
//! trainer check freezes the discrete alignment/matching structures during
//! probing, consistent with the straight-through convention of the
//! analytic gradient.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::Serialize;

use crate::align::{ota_loss, ota_loss_grad};
use crate::assign::{km_loss, km_loss_grad};
use crate::contrastive::{
    adapter_backward, adapter_forward, infonce_grad, infonce_loss, AdapterParams, Adapters,
    ParamBlock, PARAM_BLOCKS,
};
use crate::derive_seed;
use crate::error::Result;
use crate::frames::Frames;
use crate::sim::CostMatrix;
use crate::synth::{gen_synthetic, SynthConfig};
use crate::train::{build_schedule, freeze_structures, total_loss_and_grad, total_loss_frozen, TrainConfig};

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1.0)
}

/// Worst relative error of the ordered-matching loss gradient on one
/// seeded instance.
pub fn check_ota_grad(seed: u64, eps: f64) -> Result<f64> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let n = rng.gen_range(3..=8);
    let d: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..2.0)).collect();
    let t = rng.gen_range(0..n);
    let g = ota_loss_grad(&d, t)?;
    let mut worst = 0.0f64;
    for i in 0..n {
        let mut dp = d.clone();
        dp[i] += eps;
        let mut dm = d.clone();
        dm[i] -= eps;
        let num = (ota_loss(&dp, t)? - ota_loss(&dm, t)?) / (2.0 * eps);
        worst = worst.max(rel_err(g[i], num));
    }
    Ok(worst)
}

/// Worst relative error of the unordered-matching loss gradient on one
/// seeded instance.
pub fn check_km_grad(seed: u64, eps: f64) -> Result<f64> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let n = rng.gen_range(3..=8);
    let s: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
    let t = rng.gen_range(0..n);
    let g = km_loss_grad(&s, t)?;
    let mut worst = 0.0f64;
    for i in 0..n {
        let mut sp = s.clone();
        sp[i] += eps;
        let mut sm = s.clone();
        sm[i] -= eps;
        let num = (km_loss(&sp, t)? - km_loss(&sm, t)?) / (2.0 * eps);
        worst = worst.max(rel_err(g[i], num));
    }
    Ok(worst)
}

/// Worst relative error of the contrastive-loss gradient on one seeded
/// instance.
pub fn check_infonce_grad(seed: u64, eps: f64) -> Result<f64> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let k = rng.gen_range(2..=5);
    let tau = rng.gen_range(0.1..1.0);
    let v: Vec<f64> = (0..k * k).map(|_| rng.gen_range(-0.9..0.9)).collect();
    let m = CostMatrix::similarity(k, k, v.clone())?;
    let g = infonce_grad(&m, tau)?;
    let mut worst = 0.0f64;
    for e in 0..k * k {
        let mut vp = v.clone();
        vp[e] += eps;
        let mut vm = v.clone();
        vm[e] -= eps;
        let lp = infonce_loss(&CostMatrix::similarity(k, k, vp)?, tau)?;
        let lm = infonce_loss(&CostMatrix::similarity(k, k, vm)?, tau)?;
        worst = worst.max(rel_err(g[e], (lp - lm) / (2.0 * eps)));
    }
    Ok(worst)
}

/// Worst relative error of the adapter backward pass on one seeded
/// instance, over all parameter blocks and the input.
pub fn check_adapter_backward(seed: u64, eps: f64) -> Result<f64> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let d = rng.gen_range(4..=8);
    let b = rng.gen_range(1..=d / 2);
    let t = rng.gen_range(2..=4);
    let p = AdapterParams::new(
        d,
        b,
        (0..d * b).map(|_| rng.gen_range(-0.5..0.5)).collect(),
        (0..b).map(|_| rng.gen_range(-0.5..0.5)).collect(),
        (0..b * d).map(|_| rng.gen_range(-0.5..0.5)).collect(),
        (0..d).map(|_| rng.gen_range(-0.5..0.5)).collect(),
    )?;
    let x = Frames::from_flat((0..t * d).map(|_| rng.gen_range(-1.0..1.0)).collect(), t, d)?;
    let upstream =
        Frames::from_flat((0..t * d).map(|_| rng.gen_range(-1.0..1.0)).collect(), t, d)?;
    // Scalar objective: sum(out * upstream).
    let loss = |params: &AdapterParams, input: &Frames| -> Result<f64> {
        let out = adapter_forward(input, params)?;
        Ok(out
            .as_slice()
            .iter()
            .zip(upstream.as_slice())
            .map(|(o, u)| o * u)
            .sum())
    };
    let (gx, gp) = adapter_backward(&x, &p, &upstream)?;
    let mut worst = 0.0f64;
    for block in PARAM_BLOCKS {
        for i in 0..p.block_len(block) {
            let orig = p.get(block, i);
            let mut pp = p.clone();
            pp.set(block, i, orig + eps);
            let mut pm = p.clone();
            pm.set(block, i, orig - eps);
            let num = (loss(&pp, &x)? - loss(&pm, &x)?) / (2.0 * eps);
            worst = worst.max(rel_err(gp.get(block, i), num));
        }
    }
    for ti in 0..t {
        for i in 0..d {
            let mut xp = x.clone();
            xp.frame_mut(ti)[i] += eps;
            let mut xm = x.clone();
            xm.frame_mut(ti)[i] -= eps;
            let num = (loss(&p, &xp)? - loss(&p, &xm)?) / (2.0 * eps);
            worst = worst.max(rel_err(gx.frame(ti)[i], num));
        }
    }
    Ok(worst)
}

/// Worst relative error of the end-to-end trainer gradient on one seeded
/// instance, probing every parameter of both adapters with the discrete
/// structures frozen.
pub fn check_trainer_grad(seed: u64, eps: f64) -> Result<f64> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let store = gen_synthetic(&SynthConfig {
        num_classes: 3,
        videos_per_class: 3,
        frames: 3,
        dim: 6,
        num_subactions: 2,
        noise_sigma: 0.3,
        seed: rng.gen(),
        ..SynthConfig::default()
    })?;
    let cfg = TrainConfig {
        epochs: 1,
        batch_size: 4,
        temperature: rng.gen_range(0.1..0.5),
        bottleneck: Some(2),
        seed: rng.gen(),
        ..TrainConfig::default()
    };
    let mut adapters = Adapters::init(store.dim(), 2, rng.gen())?;
    // Move off the identity so up-projection gradients are generic.
    for modality_params in [&mut adapters.rgb, &mut adapters.flow] {
        for i in 0..modality_params.block_len(ParamBlock::WUp) {
            modality_params.set(ParamBlock::WUp, i, rng.gen_range(-0.1..0.1));
        }
        for i in 0..modality_params.block_len(ParamBlock::BUp) {
            modality_params.set(ParamBlock::BUp, i, rng.gen_range(-0.1..0.1));
        }
    }
    let batch = &build_schedule(&store, &cfg)?[0];
    let (_, grads) = total_loss_and_grad(&store, batch, &adapters, &cfg)?;
    let frozen = freeze_structures(&store, batch, &adapters, &cfg)?;
    let mut worst = 0.0f64;
    for (is_rgb, g) in [(true, &grads.rgb), (false, &grads.flow)] {
        for block in PARAM_BLOCKS {
            let len = if is_rgb {
                adapters.rgb.block_len(block)
            } else {
                adapters.flow.block_len(block)
            };
            for idx in 0..len {
                let params = |a: &Adapters| if is_rgb { a.rgb.clone() } else { a.flow.clone() };
                let orig = params(&adapters).get(block, idx);
                let mut up = adapters.clone();
                let mut dn = adapters.clone();
                if is_rgb {
                    up.rgb.set(block, idx, orig + eps);
                    dn.rgb.set(block, idx, orig - eps);
                } else {
                    up.flow.set(block, idx, orig + eps);
                    dn.flow.set(block, idx, orig - eps);
                }
                let lp = total_loss_frozen(&store, batch, &up, &cfg, &frozen)?.total;
                let lm = total_loss_frozen(&store, batch, &dn, &cfg, &frozen)?.total;
                worst = worst.max(rel_err(g.get(block, idx), (lp - lm) / (2.0 * eps)));
            }
        }
    }
    Ok(worst)
}

/// Result of one named suite.
#[derive(Debug, Clone, Serialize)]
pub struct SuiteReport {
    /// Suite name (`otm`, `bgm`, `mcl`, `trainer`).
    pub name: &'static str,
    /// Worst relative error over all instances and entries.
    pub max_rel_err: f64,
    /// Seeded instances probed.
    pub instances: usize,
}

/// Combined gradient-check outcome.
#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    /// Central-difference step used.
    pub eps: f64,
    /// Per-suite worst errors.
    pub suites: Vec<SuiteReport>,
}

impl GradCheckReport {
    /// Worst error across all suites.
    pub fn max_rel_err(&self) -> f64 {
        self.suites
            .iter()
            .map(|s| s.max_rel_err)
            .fold(0.0, f64::max)
    }

    /// True when every suite is below the tolerance.
    pub fn passes(&self, tol: f64) -> bool {
        self.suites.iter().all(|s| s.max_rel_err < tol)
    }
}

/// Runs all four suites over `instances` seeded cases each.
///
/// `otm` checks the ordered-loss gradient, `bgm` the unordered-loss
/// gradient, `mcl` both the contrastive-loss gradient and the adapter
/// backward pass, and `trainer` the end-to-end objective gradient.
pub fn run_suites(eps: f64, instances: usize, seed: u64) -> Result<GradCheckReport> {
    let mut otm = 0.0f64;
    let mut bgm = 0.0f64;
    let mut mcl = 0.0f64;
    let mut trainer = 0.0f64;
    for i in 0..instances {
        let s = derive_seed(seed, i as u64);
        otm = otm.max(check_ota_grad(s, eps)?);
        bgm = bgm.max(check_km_grad(s, eps)?);
        mcl = mcl.max(check_infonce_grad(s, eps)?);
        mcl = mcl.max(check_adapter_backward(s, eps)?);
        trainer = trainer.max(check_trainer_grad(s, eps)?);
    }
    Ok(GradCheckReport {
        eps,
        suites: vec![
            SuiteReport {
                name: "otm",
                max_rel_err: otm,
                instances,
            },
            SuiteReport {
                name: "bgm",
                max_rel_err: bgm,
                instances,
            },
            SuiteReport {
                name: "mcl",
                max_rel_err: mcl,
                instances,
            },
            SuiteReport {
                name: "trainer",
                max_rel_err: trainer,
                instances,
            },
        ],
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn individual_checks_pass_at_default_tolerance() {
        for seed in 0..5 {
            assert!(check_ota_grad(seed, 1e-5).unwrap() < 1e-4);
            assert!(check_km_grad(seed, 1e-5).unwrap() < 1e-4);
            assert!(check_infonce_grad(seed, 1e-5).unwrap() < 1e-4);
            assert!(check_adapter_backward(seed, 1e-5).unwrap() < 1e-4);
        }
    }

    #[test]
    fn trainer_check_passes_at_default_tolerance() {
        for seed in 0..3 {
            let err = check_trainer_grad(seed, 1e-5).unwrap();
            assert!(err < 1e-4, "seed {seed}: {err}");
        }
    }

    #[test]
    fn suite_report_aggregates_and_gates() {
        let report = run_suites(1e-5, 2, 42).unwrap();
        assert_eq!(report.suites.len(), 4);
        assert!(report.passes(1e-4), "max err {}", report.max_rel_err());
        assert!(!report.passes(0.0));
    }
}

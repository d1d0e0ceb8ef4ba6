//! Property-based checks over the matching, fusion, and storage layers.

use fsam_core::{
    classify, cosine, cross_attention_similarity, decode_store, dtw, encode_store,
    frame_distance_matrix, fuse_scores, gen_synthetic, infonce_loss, km_match, ota_loss,
    sample_episode, CostMatrix, FeatureSequence, FeatureStore, FourScores, Frames, FusionWeights,
    MatrixKind, Modality, SynthConfig, VideoRecord,
};
use proptest::prelude::*;
use std::collections::HashSet;

fn dist_matrix(max_side: usize) -> impl Strategy<Value = CostMatrix> {
    (1..=max_side, 1..=max_side).prop_flat_map(|(r, c)| {
        prop::collection::vec(0.0..1.0f64, r * c)
            .prop_map(move |v| CostMatrix::distance(r, c, v).unwrap())
    })
}

fn sim_square(max_side: usize) -> impl Strategy<Value = CostMatrix> {
    (1..=max_side).prop_flat_map(|n| {
        prop::collection::vec(-0.5..0.5f64, n * n)
            .prop_map(move |v| CostMatrix::similarity(n, n, v).unwrap())
    })
}

fn nonzero_vec(dim: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.0..1.0f64, dim)
        .prop_filter("needs usable norm", |v| {
            v.iter().map(|x| x * x).sum::<f64>().sqrt() > 1e-3
        })
}

fn frames(t: usize, d: usize) -> impl Strategy<Value = Frames> {
    prop::collection::vec(nonzero_vec(d), t).prop_map(|rows| Frames::from_rows(&rows).unwrap())
}

proptest! {
    #[test]
    fn cosine_is_scale_invariant(
        a in nonzero_vec(4),
        b in nonzero_vec(4),
        alpha in 0.01..100.0f64,
        beta in 0.01..100.0f64,
    ) {
        let scaled_a: Vec<f64> = a.iter().map(|x| x * alpha).collect();
        let scaled_b: Vec<f64> = b.iter().map(|x| x * beta).collect();
        let base = cosine(&a, &b).unwrap();
        let scaled = cosine(&scaled_a, &scaled_b).unwrap();
        prop_assert!((base - scaled).abs() < 1e-12);
    }

    #[test]
    fn distance_matrix_transposes_with_argument_swap(
        x in frames(3, 4),
        y in frames(4, 4),
    ) {
        let xy = frame_distance_matrix(&x, &y).unwrap();
        let yx = frame_distance_matrix(&y, &x).unwrap();
        for i in 0..xy.rows() {
            for j in 0..xy.cols() {
                prop_assert!((xy.at(i, j) - yx.at(j, i)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cross_attention_ignores_frame_order(
        x in frames(4, 3),
        y in frames(3, 3),
    ) {
        let base = cross_attention_similarity(&x, &y).unwrap();
        // Reverse both sequences independently; mean-context pooling must
        // not care about frame order.
        let rev = |f: &Frames| {
            let rows: Vec<Vec<f64>> =
                (0..f.num_frames()).rev().map(|t| f.frame(t).to_vec()).collect();
            Frames::from_rows(&rows).unwrap()
        };
        let flipped = cross_attention_similarity(&rev(&x), &rev(&y)).unwrap();
        prop_assert!((base - flipped).abs() < 1e-10);
        prop_assert!((-1.0..=1.0).contains(&base));
    }

    #[test]
    fn dtw_cost_scales_linearly(m in dist_matrix(5), scale in 0.01..2.0f64) {
        let (cost, path) = dtw(&m).unwrap();
        let scaled_values: Vec<f64> = m.values().iter().map(|v| v * scale).collect();
        let scaled = CostMatrix::distance(m.rows(), m.cols(), scaled_values).unwrap();
        let (scaled_cost, scaled_path) = dtw(&scaled).unwrap();
        prop_assert!((scaled_cost - cost * scale).abs() < 1e-9);
        prop_assert_eq!(path.steps(), scaled_path.steps());
    }

    #[test]
    fn dtw_cost_survives_transposition(m in dist_matrix(5)) {
        let (cost, _) = dtw(&m).unwrap();
        let (cost_t, _) = dtw(&m.transpose()).unwrap();
        prop_assert!((cost - cost_t).abs() < 1e-9);
    }

    #[test]
    fn dtw_cost_respects_the_path_length_lower_bound(m in dist_matrix(5)) {
        let (cost, _) = dtw(&m).unwrap();
        let min_entry = m.values().iter().cloned().fold(f64::INFINITY, f64::min);
        let floor = m.rows().max(m.cols()) as f64 * min_entry;
        prop_assert!(cost >= floor - 1e-9);
        prop_assert!(cost <= m.values().iter().sum::<f64>() + 1e-9);
    }

    #[test]
    fn alignment_loss_ignores_constant_distance_shifts(
        d in prop::collection::vec(0.0..2.0f64, 2..6),
        shift in -5.0..5.0f64,
    ) {
        let base = ota_loss(&d, 0).unwrap();
        let shifted: Vec<f64> = d.iter().map(|x| x + shift).collect();
        prop_assert!((base - ota_loss(&shifted, 0).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn assignment_total_tracks_additive_shifts(m in sim_square(6), c in -0.4..0.4f64) {
        let base = km_match(&m).unwrap();
        let shifted_values: Vec<f64> = m.values().iter().map(|v| v + c).collect();
        let shifted =
            CostMatrix::new(MatrixKind::Similarity, m.rows(), m.cols(), shifted_values).unwrap();
        let moved = km_match(&shifted).unwrap();
        let expected = base.total() + c * m.rows() as f64;
        prop_assert!((moved.total() - expected).abs() < 1e-9);
        prop_assert_eq!(base.assignment(), moved.assignment());
    }

    #[test]
    fn assignment_total_is_invariant_under_row_permutation(
        m in sim_square(6),
        perm_seed in 0u64..1000,
    ) {
        let n = m.rows();
        // Rotate rows by a seed-derived offset: a cheap deterministic permutation.
        let offset = (perm_seed as usize) % n;
        let mut rows: Vec<Vec<f64>> = (0..n)
            .map(|r| (0..n).map(|c| m.at((r + offset) % n, c)).collect())
            .collect();
        let values: Vec<f64> = rows.drain(..).flatten().collect();
        let permuted = CostMatrix::similarity(n, n, values).unwrap();
        let base = km_match(&m).unwrap();
        let moved = km_match(&permuted).unwrap();
        prop_assert!((base.total() - moved.total()).abs() < 1e-9);
        // The permuted optimum, mapped back through the rotation, must
        // attain the same weight on the original matrix.
        let mapped_total: f64 = moved
            .assignment()
            .iter()
            .enumerate()
            .map(|(r, &c)| m.at((r + offset) % n, c))
            .sum();
        prop_assert!((mapped_total - base.total()).abs() < 1e-9);
    }

    #[test]
    fn assignment_total_dominates_named_permutations(m in sim_square(6), rot in 0usize..6) {
        let n = m.rows();
        let best = km_match(&m).unwrap().total();
        let trace: f64 = (0..n).map(|i| m.at(i, i)).sum();
        prop_assert!(best >= trace - 1e-9);
        let rotated: f64 = (0..n).map(|i| m.at(i, (i + rot) % n)).sum();
        prop_assert!(best >= rotated - 1e-9);
    }

    #[test]
    fn contrastive_loss_is_stable_under_joint_permutation(
        values in prop::collection::vec(-0.9..0.9f64, 16),
        rot in 0usize..4,
    ) {
        let m = CostMatrix::similarity(4, 4, values).unwrap();
        let permuted_values: Vec<f64> = (0..4)
            .flat_map(|r| (0..4).map(move |c| ((r + rot) % 4, (c + rot) % 4)))
            .map(|(r, c)| m.at(r, c))
            .collect();
        let permuted = CostMatrix::similarity(4, 4, permuted_values).unwrap();
        let base = infonce_loss(&m, 0.3).unwrap();
        let moved = infonce_loss(&permuted, 0.3).unwrap();
        prop_assert!(base > 0.0);
        prop_assert!((base - moved).abs() < 1e-12);
    }

    #[test]
    fn contrastive_loss_never_rises_when_positives_strengthen(
        values in prop::collection::vec(-0.8..0.8f64, 9),
        which in 0usize..3,
        bump in 0.0..0.19f64,
    ) {
        let m = CostMatrix::similarity(3, 3, values.clone()).unwrap();
        let mut raised = values;
        raised[which * 3 + which] += bump;
        let r = CostMatrix::similarity(3, 3, raised).unwrap();
        prop_assert!(infonce_loss(&r, 0.2).unwrap() <= infonce_loss(&m, 0.2).unwrap() + 1e-12);
    }

    #[test]
    fn fused_prediction_ignores_weight_rescaling(
        a in prop::collection::vec(-2.0..2.0f64, 5),
        b in prop::collection::vec(-2.0..2.0f64, 5),
        c in prop::collection::vec(-2.0..2.0f64, 5),
        d in prop::collection::vec(-2.0..2.0f64, 5),
        scale in 0.01..50.0f64,
    ) {
        let scores = FourScores {
            ota_rgb: a,
            ota_flow: b,
            km_rgb: c,
            km_flow: d,
        };
        let w = FusionWeights::default();
        let fused = fuse_scores(&scores, &w).unwrap();
        // Skip near-ties where rounding could legitimately flip the argmax.
        let mut sorted = fused.clone();
        sorted.sort_by(|x, y| y.partial_cmp(x).unwrap());
        prop_assume!(sorted[0] - sorted[1] > 1e-9);
        let scaled = FusionWeights {
            ota_rgb: w.ota_rgb * scale,
            ota_flow: w.ota_flow * scale,
            km_rgb: w.km_rgb * scale,
            km_flow: w.km_flow * scale,
        };
        let fused_scaled = fuse_scores(&scores, &scaled).unwrap();
        prop_assert_eq!(
            classify(&fused).unwrap(),
            classify(&fused_scaled).unwrap()
        );
    }
}

#[test]
fn store_round_trips_bit_exactly() {
    // Hand-built store with ragged frame counts, then generator output:
    // both must survive encode -> decode -> encode without a byte moving.
    let seq = |m, t, d, scale: f32| {
        let values = (0..t * d).map(|i| (i as f32 + 1.0) * scale).collect();
        FeatureSequence::new(m, t, d, values).unwrap()
    };
    let records = vec![
        VideoRecord::new(
            7,
            0,
            seq(Modality::Rgb, 3, 2, 0.25),
            seq(Modality::Flow, 3, 2, -0.5),
        )
        .unwrap(),
        VideoRecord::new(
            9,
            1,
            seq(Modality::Rgb, 1, 2, 1.5),
            seq(Modality::Flow, 1, 2, 0.125),
        )
        .unwrap(),
    ];
    let store = FeatureStore::new(records, 2).unwrap();
    let bytes = encode_store(&store).unwrap();
    let back = decode_store(&bytes).unwrap();
    assert_eq!(bytes, encode_store(&back).unwrap());

    let generated = gen_synthetic(&SynthConfig {
        num_classes: 3,
        videos_per_class: 2,
        frames: 4,
        dim: 5,
        ..SynthConfig::default()
    })
    .unwrap();
    let bytes = encode_store(&generated).unwrap();
    let back = decode_store(&bytes).unwrap();
    assert_eq!(bytes, encode_store(&back).unwrap());
    assert_eq!(back.len(), generated.len());
    assert_eq!(back.dim(), generated.dim());
}

#[test]
fn episode_invariants_hold_across_ten_thousand_seeds() {
    let store = gen_synthetic(&SynthConfig {
        num_classes: 6,
        videos_per_class: 4,
        frames: 2,
        dim: 3,
        num_subactions: 2,
        ..SynthConfig::default()
    })
    .unwrap();
    for seed in 0..10_000u64 {
        let ep = sample_episode(&store, 3, 2, 2, seed).unwrap();
        assert_eq!(ep.way(), 3);
        assert_eq!(ep.shot(), 2);
        let classes: HashSet<u32> = ep.classes().iter().copied().collect();
        assert_eq!(classes.len(), 3, "support classes must be distinct");
        let mut support_ids = HashSet::new();
        for class_records in ep.support() {
            assert_eq!(class_records.len(), 2);
            for &r in class_records {
                assert!(support_ids.insert(r), "support record repeated");
            }
        }
        assert_eq!(ep.queries().len(), 6);
        for &(record, slot) in ep.queries() {
            assert!(slot < 3);
            assert!(!support_ids.contains(&record), "query leaked into support");
            let class = store.record(record).unwrap().class_id;
            assert_eq!(class, ep.classes()[slot]);
        }
    }
}

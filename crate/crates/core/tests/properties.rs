//! Property tests for structural invariants: partitions stay partitions,
//! distributions stay normalized, rankings stay sorted, and normalizations
//! stay inside their advertised ranges, for arbitrary inputs.

use std::collections::HashSet;

use proptest::prelude::*;

use attrscope::actstore::{ActivationMatrix, LayerKind, LayerSchema, UnitAddress};
use attrscope::corpus::{
    assign_splits, cosine_distance, dedup_shop, ImageRecord, Split, TermCounts,
};
use attrscope::divergence::{
    estimate_histograms, select_prime_units, symmetric_kl, UnitDivergence,
};
use attrscope::perception::{fractional_ranks, human_visualness, pearson, spearman, PairVote};
use attrscope::saliency::{
    accumulate, bilinear_upsample, gaussian_kernel, normalize_response, otsu_threshold,
    smooth_grid, Grid,
};

fn term_counts() -> impl Strategy<Value = TermCounts> {
    prop::collection::btree_map("[a-e]{1,2}", 1u32..50, 0..8)
}

fn samples() -> impl Strategy<Value = Vec<f32>> {
    prop::collection::vec(-100.0f32..100.0, 1..40)
}

fn grid() -> impl Strategy<Value = Grid> {
    (1usize..7, 1usize..7).prop_flat_map(|(w, h)| {
        prop::collection::vec(0.0f32..1.0, w * h)
            .prop_map(move |data| Grid::from_data(w, h, data).unwrap())
    })
}

proptest! {
    #[test]
    fn cosine_distance_is_symmetric_and_bounded(a in term_counts(), b in term_counts()) {
        let d_ab = cosine_distance(&a, &b);
        let d_ba = cosine_distance(&b, &a);
        prop_assert!((d_ab - d_ba).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&d_ab));
        if !a.is_empty() {
            prop_assert!(cosine_distance(&a, &a) < 1e-12);
        } else {
            prop_assert_eq!(cosine_distance(&a, &a), 1.0);
        }
    }

    #[test]
    fn split_assignment_is_an_exact_partition(n in 0usize..400, seed in any::<u64>()) {
        let splits = assign_splits(n, seed);
        prop_assert_eq!(splits.len(), n);
        let count = |s: Split| splits.iter().filter(|&&v| v == s).count();
        prop_assert_eq!(count(Split::Train), n / 2);
        prop_assert_eq!(count(Split::Test), n / 4);
        prop_assert_eq!(count(Split::Validation), n - n / 2 - n / 4);
        prop_assert_eq!(assign_splits(n, seed), splits);
    }

    #[test]
    fn histograms_are_smoothed_distributions(
        pos in samples(),
        neg in samples(),
        bins in 1usize..=64,
    ) {
        let pair = estimate_histograms(&pos, &neg, bins).unwrap();
        prop_assert_eq!(pair.p_pos.len(), pair.p_neg.len());
        for p in [&pair.p_pos, &pair.p_neg] {
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(p.iter().all(|&v| v > 0.0));
        }
    }

    #[test]
    fn symmetric_kl_is_nonnegative_and_symmetric(
        pos in samples(),
        neg in samples(),
        bins in 1usize..=64,
    ) {
        let forward = symmetric_kl(&estimate_histograms(&pos, &neg, bins).unwrap()).unwrap();
        let backward = symmetric_kl(&estimate_histograms(&neg, &pos, bins).unwrap()).unwrap();
        prop_assert!(forward >= 0.0);
        prop_assert!((forward - backward).abs() < 1e-9);
        let same = symmetric_kl(&estimate_histograms(&pos, &pos, bins).unwrap()).unwrap();
        prop_assert!(same.abs() < 1e-12);
    }

    #[test]
    fn prime_units_are_ranked_unique_and_capped(
        scores in prop::collection::vec(0.0f64..10.0, 1..60),
        k in 1usize..70,
    ) {
        let profile: Vec<UnitDivergence> = scores
            .iter()
            .enumerate()
            .map(|(i, &score)| UnitDivergence {
                unit: UnitAddress { layer_index: 0, unit_index: i, flat_index: i },
                score,
            })
            .collect();
        let set = select_prime_units("w", &profile, k).unwrap();
        prop_assert_eq!(set.units.len(), k.min(scores.len()));
        prop_assert_eq!(set.units.len(), set.scores.len());
        prop_assert!(set.scores.windows(2).all(|w| w[1] <= w[0]));
        let distinct: HashSet<usize> = set.units.iter().map(|u| u.flat_index).collect();
        prop_assert_eq!(distinct.len(), set.units.len());
        // The selected scores are the k largest of the input.
        let mut sorted = scores.clone();
        sorted.sort_by(|a, b| b.total_cmp(a));
        for (selected, expected) in set.scores.iter().zip(&sorted) {
            prop_assert_eq!(selected, expected);
        }
    }

    #[test]
    fn pearson_is_invariant_to_positive_affine_maps(
        pairs in prop::collection::vec((-50.0f64..50.0, -50.0f64..50.0), 3..30),
        a in 0.1f64..10.0,
        b in -20.0f64..20.0,
    ) {
        let x: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let y: Vec<f64> = pairs.iter().map(|p| p.1).collect();
        let spread = |v: &[f64]| v.iter().fold(f64::NEG_INFINITY, |m, &t| m.max(t))
            - v.iter().fold(f64::INFINITY, |m, &t| m.min(t));
        prop_assume!(spread(&x) > 1e-3 && spread(&y) > 1e-3);
        let mapped: Vec<f64> = x.iter().map(|&v| a * v + b).collect();
        let base = pearson(&x, &y).unwrap();
        let moved = pearson(&mapped, &y).unwrap();
        prop_assert!((base - moved).abs() < 1e-7, "{base} vs {moved}");
        prop_assert!((-1.0..=1.0).contains(&base));
    }

    #[test]
    fn spearman_is_invariant_to_monotone_maps(
        pairs in prop::collection::vec((-50.0f64..50.0, -50.0f64..50.0), 3..30),
    ) {
        let x: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let y: Vec<f64> = pairs.iter().map(|p| p.1).collect();
        let spread = |v: &[f64]| v.iter().fold(f64::NEG_INFINITY, |m, &t| m.max(t))
            - v.iter().fold(f64::INFINITY, |m, &t| m.min(t));
        prop_assume!(spread(&x) > 1e-3 && spread(&y) > 1e-3);
        // Strictly increasing map: preserves every rank, so also the statistic.
        let mapped: Vec<f64> = x.iter().map(|&v| v.powi(3) + 2.0 * v).collect();
        let base = spearman(&x, &y).unwrap();
        let moved = spearman(&mapped, &y).unwrap();
        prop_assert!((base - moved).abs() < 1e-9);
        prop_assert!((-1.0..=1.0).contains(&base));
    }

    #[test]
    fn fractional_ranks_always_sum_to_the_rank_total(
        values in prop::collection::vec(-5.0f64..5.0, 1..50),
    ) {
        let ranks = fractional_ranks(&values);
        let n = values.len() as f64;
        prop_assert!((ranks.iter().sum::<f64>() - n * (n + 1.0) / 2.0).abs() < 1e-9);
    }

    #[test]
    fn human_visualness_shrinks_as_theta_rises(
        votes in prop::collection::vec(0u32..=5, 1..40),
        theta in 0u32..5,
    ) {
        let votes: Vec<PairVote> = votes
            .iter()
            .enumerate()
            .map(|(i, &positive_votes)| PairVote {
                word: "w".into(),
                pair_index: i as u32,
                positive_votes,
                annotators: 5,
            })
            .collect();
        let low = human_visualness(&votes, theta).unwrap();
        let high = human_visualness(&votes, theta + 1).unwrap();
        prop_assert!((0.0..=1.0).contains(&low.score));
        prop_assert!(low.score >= high.score);
    }

    #[test]
    fn gaussian_kernels_are_normalized_and_symmetric(sigma in 0.01f64..8.0) {
        let kernel = gaussian_kernel(sigma);
        prop_assert_eq!(kernel.len() % 2, 1);
        prop_assert!((kernel.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        for i in 0..kernel.len() / 2 {
            prop_assert!((kernel[i] - kernel[kernel.len() - 1 - i]).abs() < 1e-12);
        }
    }

    #[test]
    fn smoothing_never_leaves_the_value_range(g in grid(), sigma in 0.05f64..3.0) {
        let smoothed = smooth_grid(&g, sigma);
        let lo = g.data().iter().cloned().fold(f32::INFINITY, f32::min);
        let hi = g.data().iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        prop_assert_eq!((smoothed.width(), smoothed.height()), (g.width(), g.height()));
        for &v in smoothed.data() {
            prop_assert!(v >= lo - 1e-5 && v <= hi + 1e-5, "{v} outside [{lo}, {hi}]");
        }
        let flat = Grid::from_data(
            g.width(),
            g.height(),
            vec![0.37; g.width() * g.height()],
        )
        .unwrap();
        for &v in smooth_grid(&flat, sigma).data() {
            prop_assert!((v - 0.37).abs() < 1e-5);
        }
    }

    #[test]
    fn normalized_responses_span_the_unit_interval(g in grid()) {
        let normalized = normalize_response(&g);
        let lo = g.data().iter().cloned().fold(f32::INFINITY, f32::min);
        let hi = g.data().iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        if hi > lo {
            let out_lo = normalized.data().iter().cloned().fold(f32::INFINITY, f32::min);
            let out_hi = normalized.data().iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            prop_assert!(out_lo.abs() < 1e-6);
            prop_assert!((out_hi - 1.0).abs() < 1e-6);
        } else {
            prop_assert!(normalized.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn accumulation_stays_inside_the_convex_hull(
        dims in (2usize..5, 2usize..5),
        raw in prop::collection::vec((0.0f64..5.0, prop::collection::vec(0.0f32..1.0, 16)), 1..5),
        k in 1usize..7,
    ) {
        let (w, h) = dims;
        let mut scores: Vec<f64> = raw.iter().map(|r| r.0).collect();
        scores.sort_by(|a, b| b.total_cmp(a));
        prop_assume!(scores[..k.min(scores.len())].iter().sum::<f64>() > 0.0);
        let grids: Vec<Grid> = raw
            .iter()
            .map(|r| Grid::from_data(w, h, r.1[..w * h].to_vec()).unwrap())
            .collect();
        let refs: Vec<&Grid> = grids.iter().collect();
        let map = accumulate("w", "img", &refs, &scores, k).unwrap();
        let used = k.min(grids.len());
        prop_assert!((map.normalizer - scores[..used].iter().sum::<f64>()).abs() < 1e-12);
        prop_assert_eq!(map.k, used);
        for y in 0..h {
            for x in 0..w {
                let lo = refs[..used].iter().map(|g| g.at(x, y)).fold(f32::INFINITY, f32::min);
                let hi = refs[..used]
                    .iter()
                    .map(|g| g.at(x, y))
                    .fold(f32::NEG_INFINITY, f32::max);
                let v = map.grid.at(x, y);
                prop_assert!(v >= lo - 1e-5 && v <= hi + 1e-5);
            }
        }
    }

    #[test]
    fn upsampling_preserves_dimensions_and_bounds(g in grid(), stride in 1usize..6) {
        let up = bilinear_upsample(&g, stride);
        prop_assert_eq!(up.width(), g.width() * stride);
        prop_assert_eq!(up.height(), g.height() * stride);
        let lo = g.data().iter().cloned().fold(f32::INFINITY, f32::min);
        let hi = g.data().iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        for &v in up.data() {
            prop_assert!(v >= lo - 1e-6 && v <= hi + 1e-6);
        }
    }

    #[test]
    fn otsu_splits_any_nonconstant_sample(
        values in prop::collection::vec(0.0f32..1.0, 2..60),
    ) {
        let lo = values.iter().cloned().fold(f32::INFINITY, f32::min);
        let hi = values.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        prop_assume!(hi - lo > 1e-4);
        let t = otsu_threshold(&values).unwrap();
        prop_assert!(f64::from(lo) < t && t <= f64::from(hi));
        prop_assert!(values.iter().any(|&v| f64::from(v) >= t));
        prop_assert!(values.iter().any(|&v| f64::from(v) < t));
    }
}

fn shop_record(id: usize, tokens: &[String]) -> ImageRecord {
    ImageRecord {
        id: format!("r{id}"),
        shop_id: Some("shop".into()),
        title_tokens: tokens.to_vec(),
        description_tokens: Vec::new(),
        candidate_words: Vec::new(),
        category: None,
        image_path: None,
        split: Split::Train,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn dedup_clusters_partition_the_shop(
        titles in prop::collection::vec(prop::collection::vec("[a-c]", 1..6), 1..10),
        threshold in 0.01f64..=1.0,
        seed in any::<u64>(),
    ) {
        let records: Vec<ImageRecord> = titles
            .iter()
            .enumerate()
            .map(|(i, t)| shop_record(i, t))
            .collect();
        let refs: Vec<&ImageRecord> = records.iter().collect();
        let clustering = dedup_shop(&refs, &HashSet::new(), threshold, seed).unwrap();

        let mut seen: Vec<&str> = clustering
            .clusters
            .iter()
            .flatten()
            .map(String::as_str)
            .collect();
        seen.sort_unstable();
        let mut expected: Vec<&str> = records.iter().map(|r| r.id.as_str()).collect();
        expected.sort_unstable();
        prop_assert_eq!(seen, expected, "clusters must cover every id exactly once");

        prop_assert_eq!(clustering.representatives.len(), clustering.clusters.len());
        for (rep, cluster) in clustering.representatives.iter().zip(&clustering.clusters) {
            prop_assert!(cluster.contains(rep), "representative outside its cluster");
        }
    }

    #[test]
    fn activation_matrices_round_trip_through_disk(
        n_images in 1usize..4,
        conv_units in 1usize..5,
        fc_units in 1usize..5,
        seed in any::<u64>(),
    ) {
        use rand::{Rng as _, SeedableRng as _};
        let layers = vec![
            LayerSchema { name: "conv1".into(), unit_count: conv_units, kind: LayerKind::Conv },
            LayerSchema { name: "fc2".into(), unit_count: fc_units, kind: LayerKind::Fc },
        ];
        let unit_count = conv_units + fc_units;
        let ids: Vec<String> = (0..n_images).map(|i| format!("img{i}")).collect();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let values: Vec<f32> = (0..n_images * unit_count)
            .map(|_| rng.random_range(-10.0f32..10.0))
            .collect();
        let matrix = ActivationMatrix::new(ids.clone(), layers.clone(), values.clone()).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("matrix.actv");
        matrix.write(&path).unwrap();
        let loaded = ActivationMatrix::read(&path).unwrap();

        prop_assert_eq!(loaded.image_ids(), matrix.image_ids());
        prop_assert_eq!(loaded.layers(), matrix.layers());
        for id in &ids {
            prop_assert_eq!(loaded.row(id).unwrap(), matrix.row(id).unwrap());
        }
    }
}

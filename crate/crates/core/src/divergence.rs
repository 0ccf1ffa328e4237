//! Per-unit activation divergence between weakly positive and negative
//! image sets.
//!
//! For one word and one unit, the unit's activations over the positive and
//! negative sets are histogrammed on a shared equal-width grid and compared
//! with a symmetric Kullback-Leibler divergence (natural log). Units whose
//! activation distribution shifts strongly when the word is present score
//! high; the top scorers are the word's "prime units".

use rayon::prelude::*;

use crate::actstore::{ActivationMatrix, LayerSchema, UnitAddress};
use crate::corpus::DatasetPartition;
use crate::error::{Error, Result};

/// Histogram resolution shared by both sides.
pub const DEFAULT_BINS: usize = 32;
/// Prime units kept per word.
pub const DEFAULT_PRIME_K: usize = 100;
/// Additive smoothing mass per bin; keeps every bin strictly positive so the
/// divergence stays finite.
pub const SMOOTHING_ALPHA: f64 = 0.5;

/// A pair of smoothed activation histograms on one shared grid.
#[derive(Debug, Clone, PartialEq)]
pub struct HistogramPair {
    /// `bins + 1` strictly increasing edges covering the pooled value range.
    pub edges: Vec<f64>,
    pub p_pos: Vec<f64>,
    pub p_neg: Vec<f64>,
}

/// Histograms `pos` and `neg` on a shared equal-width grid over the pooled
/// min/max, then applies additive smoothing `(c_b + a) / (n + B a)` with
/// `a = 0.5`. A degenerate value range (all values identical) collapses to a
/// single bin, which makes both histograms `[1.0]` and the divergence zero.
pub fn estimate_histograms(pos: &[f32], neg: &[f32], bins: usize) -> Result<HistogramPair> {
    if pos.is_empty() {
        return Err(Error::EmptyInput {
            what: "positive activation sample",
        });
    }
    if neg.is_empty() {
        return Err(Error::EmptyInput {
            what: "negative activation sample",
        });
    }
    if bins == 0 {
        return Err(Error::InvalidInput(
            "histogram needs at least one bin".into(),
        ));
    }
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    for &v in pos.iter().chain(neg.iter()) {
        if !v.is_finite() {
            return Err(Error::NonFinite {
                context: "activation sample".into(),
            });
        }
        let v = f64::from(v);
        min = min.min(v);
        max = max.max(v);
    }

    let bins = if min == max { 1 } else { bins };
    let edges: Vec<f64> = if min == max {
        vec![min, min + f64::max(1.0, min.abs() * 1e-6)]
    } else {
        let width = (max - min) / bins as f64;
        (0..=bins)
            .map(|b| {
                if b == bins {
                    max
                } else {
                    min + width * b as f64
                }
            })
            .collect()
    };

    let histogram = |values: &[f32]| -> Vec<f64> {
        let mut counts = vec![0usize; bins];
        if min < max {
            let width = (max - min) / bins as f64;
            for &v in values {
                let idx = ((f64::from(v) - min) / width) as usize;
                counts[idx.min(bins - 1)] += 1;
            }
        } else {
            counts[0] = values.len();
        }
        let n = values.len() as f64;
        let denom = n + bins as f64 * SMOOTHING_ALPHA;
        counts
            .iter()
            .map(|&c| (c as f64 + SMOOTHING_ALPHA) / denom)
            .collect()
    };

    Ok(HistogramPair {
        edges,
        p_pos: histogram(pos),
        p_neg: histogram(neg),
    })
}

/// Symmetric KL divergence `KL(p||q) + KL(q||p)` in nats. Requires both
/// histograms to be strictly positive and sum to one.
pub fn symmetric_kl(pair: &HistogramPair) -> Result<f64> {
    let HistogramPair { p_pos, p_neg, .. } = pair;
    if p_pos.len() != p_neg.len() || p_pos.is_empty() {
        return Err(Error::DimensionMismatch {
            what: "histogram bins",
            expected: p_pos.len().max(1),
            actual: p_neg.len(),
        });
    }
    for (name, p) in [("positive", p_pos), ("negative", p_neg)] {
        let sum: f64 = p.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidInput(format!(
                "{name} histogram sums to {sum}, expected 1"
            )));
        }
        if p.iter().any(|&v| v <= 0.0 || !v.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "{name} histogram has a non-positive bin; smoothing missing?"
            )));
        }
    }
    let mut total = 0.0;
    for (&p, &q) in p_pos.iter().zip(p_neg.iter()) {
        total += p * (p / q).ln() + q * (q / p).ln();
    }
    // Identical histograms produce exactly zero; tiny negatives can only
    // come from rounding and are clamped away.
    Ok(total.max(0.0))
}

/// One unit's divergence score for one word.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnitDivergence {
    pub unit: UnitAddress,
    pub score: f64,
}

/// Scores every unit of the matrix for one partition. The result is in flat
/// unit order; errors carry the offending unit's flat index.
pub fn divergence_profile(
    matrix: &ActivationMatrix,
    part: &DatasetPartition,
    bins: usize,
) -> Result<Vec<UnitDivergence>> {
    if part.positive_ids.is_empty() {
        return Err(Error::EmptyInput {
            what: "partition positives",
        });
    }
    if part.negative_ids.is_empty() {
        return Err(Error::EmptyInput {
            what: "partition negatives",
        });
    }
    let pos = matrix.rows_for(&part.positive_ids)?;
    let neg = matrix.rows_for(&part.negative_ids)?;
    (0..matrix.unit_count())
        .into_par_iter()
        .map(|flat| {
            let score = estimate_histograms(&pos.column(flat)?, &neg.column(flat)?, bins)
                .and_then(|pair| symmetric_kl(&pair))
                .map_err(|e| Error::at_unit(flat, e))?;
            Ok(UnitDivergence {
                unit: matrix.address_of(flat)?,
                score,
            })
        })
        .collect()
}

/// The top divergence units for one word, strongest first.
#[derive(Debug, Clone, PartialEq)]
pub struct PrimeUnitSet {
    pub word: String,
    /// Unit addresses sorted by score descending; ties break toward the
    /// lower flat index.
    pub units: Vec<UnitAddress>,
    /// Scores aligned with `units`, non-increasing.
    pub scores: Vec<f64>,
}

/// Selects the `k` highest scoring units. `k` larger than the unit count
/// returns all units.
pub fn select_prime_units(
    word: &str,
    profile: &[UnitDivergence],
    k: usize,
) -> Result<PrimeUnitSet> {
    if profile.is_empty() {
        return Err(Error::EmptyInput {
            what: "divergence profile",
        });
    }
    if k == 0 {
        return Err(Error::InvalidInput(
            "prime unit count must be at least 1".into(),
        ));
    }
    let mut ranked: Vec<&UnitDivergence> = profile.iter().collect();
    ranked.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then_with(|| a.unit.flat_index.cmp(&b.unit.flat_index))
    });
    ranked.truncate(k);
    Ok(PrimeUnitSet {
        word: word.to_string(),
        units: ranked.iter().map(|u| u.unit).collect(),
        scores: ranked.iter().map(|u| u.score).collect(),
    })
}

/// Per-layer divergence profile for one word: each layer is summarized by
/// its strongest unit and the summaries are normalized to sum to one.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerDivergenceProfile {
    pub word: String,
    /// `max_{i in layer} S_i`, one entry per layer.
    pub per_layer_max: Vec<f64>,
    /// `per_layer_max / normalizer`; uniform when every score is zero.
    pub normalized: Vec<f64>,
    /// Sum of per-layer maxima before normalization.
    pub normalizer: f64,
}

/// Collapses a full profile to per-layer maxima normalized across layers.
pub fn layer_profile(
    word: &str,
    profile: &[UnitDivergence],
    layers: &[LayerSchema],
) -> Result<LayerDivergenceProfile> {
    let expected: usize = layers.iter().map(|l| l.unit_count).sum();
    if profile.len() != expected {
        return Err(Error::DimensionMismatch {
            what: "divergence profile units",
            expected,
            actual: profile.len(),
        });
    }
    let mut per_layer_max = vec![f64::NEG_INFINITY; layers.len()];
    for entry in profile {
        if entry.unit.layer_index >= layers.len() {
            return Err(Error::AddressOutOfRange {
                what: "layer index",
                index: entry.unit.layer_index,
                limit: layers.len(),
            });
        }
        let slot = &mut per_layer_max[entry.unit.layer_index];
        *slot = slot.max(entry.score);
    }
    let normalizer: f64 = per_layer_max.iter().sum();
    let normalized = if normalizer == 0.0 {
        vec![1.0 / layers.len() as f64; layers.len()]
    } else {
        per_layer_max.iter().map(|&m| m / normalizer).collect()
    };
    Ok(LayerDivergenceProfile {
        word: word.to_string(),
        per_layer_max,
        normalized,
        normalizer,
    })
}

/// Words ranked by how much of their divergence mass sits in one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerSalienceTable {
    pub layer: String,
    /// Words sorted by normalized share descending, ties alphabetical.
    pub ranked_words: Vec<String>,
    /// Shares aligned with `ranked_words`.
    pub shares: Vec<f64>,
}

/// Ranks every word by its normalized share at `layer_index`.
pub fn salient_words(
    profiles: &[LayerDivergenceProfile],
    layers: &[LayerSchema],
    layer_index: usize,
) -> Result<LayerSalienceTable> {
    if profiles.is_empty() {
        return Err(Error::EmptyInput {
            what: "layer profiles",
        });
    }
    if layer_index >= layers.len() {
        return Err(Error::AddressOutOfRange {
            what: "layer index",
            index: layer_index,
            limit: layers.len(),
        });
    }
    let mut entries: Vec<(&str, f64)> = Vec::with_capacity(profiles.len());
    for profile in profiles {
        if profile.normalized.len() != layers.len() {
            return Err(Error::DimensionMismatch {
                what: "layer profile entries",
                expected: layers.len(),
                actual: profile.normalized.len(),
            });
        }
        entries.push((&profile.word, profile.normalized[layer_index]));
    }
    entries.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    Ok(LayerSalienceTable {
        layer: layers[layer_index].name.clone(),
        ranked_words: entries.iter().map(|(w, _)| w.to_string()).collect(),
        shares: entries.iter().map(|&(_, s)| s).collect(),
    })
}

/// Average per-layer divergence magnitude over a set of words, in two
/// aggregations: summing all unit scores within a layer, and taking the
/// layer maximum.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerMagnitude {
    pub layers: Vec<String>,
    pub sum_variant: Vec<f64>,
    pub max_variant: Vec<f64>,
}

pub fn average_layer_magnitude(
    word_profiles: &[&[UnitDivergence]],
    layers: &[LayerSchema],
) -> Result<LayerMagnitude> {
    if word_profiles.is_empty() {
        return Err(Error::EmptyInput {
            what: "word profiles",
        });
    }
    let expected: usize = layers.iter().map(|l| l.unit_count).sum();
    let mut sum_variant = vec![0.0f64; layers.len()];
    let mut max_variant = vec![0.0f64; layers.len()];
    for profile in word_profiles {
        if profile.len() != expected {
            return Err(Error::DimensionMismatch {
                what: "divergence profile units",
                expected,
                actual: profile.len(),
            });
        }
        let mut layer_sum = vec![0.0f64; layers.len()];
        let mut layer_max = vec![f64::NEG_INFINITY; layers.len()];
        for entry in *profile {
            if entry.unit.layer_index >= layers.len() {
                return Err(Error::AddressOutOfRange {
                    what: "layer index",
                    index: entry.unit.layer_index,
                    limit: layers.len(),
                });
            }
            layer_sum[entry.unit.layer_index] += entry.score;
            let slot = &mut layer_max[entry.unit.layer_index];
            *slot = slot.max(entry.score);
        }
        for l in 0..layers.len() {
            sum_variant[l] += layer_sum[l];
            max_variant[l] += layer_max[l];
        }
    }
    let w = word_profiles.len() as f64;
    Ok(LayerMagnitude {
        layers: layers.iter().map(|l| l.name.clone()).collect(),
        sum_variant: sum_variant.into_iter().map(|v| v / w).collect(),
        max_variant: max_variant.into_iter().map(|v| v / w).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::actstore::LayerKind;
    use crate::corpus::Split;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn pair(p_pos: Vec<f64>, p_neg: Vec<f64>) -> HistogramPair {
        HistogramPair {
            edges: (0..=p_pos.len()).map(|i| i as f64).collect(),
            p_pos,
            p_neg,
        }
    }

    #[test]
    fn symmetric_kl_known_value() {
        // KL((.5,.5)||(.25,.75)) + KL((.25,.75)||(.5,.5)) = ln(3)/4.
        let got = symmetric_kl(&pair(vec![0.5, 0.5], vec![0.25, 0.75])).unwrap();
        assert!((got - 0.25 * 3.0f64.ln()).abs() < 1e-12, "got {got}");
        assert!((got - 0.274653).abs() < 1e-6);
    }

    #[test]
    fn symmetric_kl_is_symmetric_and_zero_on_identical() {
        let a = vec![0.1, 0.2, 0.7];
        let b = vec![0.3, 0.4, 0.3];
        let ab = symmetric_kl(&pair(a.clone(), b.clone())).unwrap();
        let ba = symmetric_kl(&pair(b.clone(), a.clone())).unwrap();
        assert_eq!(ab, ba);
        assert_eq!(symmetric_kl(&pair(a.clone(), a)).unwrap(), 0.0);
    }

    #[test]
    fn symmetric_kl_rejects_bad_histograms() {
        assert!(symmetric_kl(&pair(vec![0.5, 0.5], vec![0.9, 0.2])).is_err());
        assert!(symmetric_kl(&pair(vec![1.0, 0.0], vec![0.5, 0.5])).is_err());
        assert!(symmetric_kl(&pair(vec![0.5, 0.5], vec![1.0])).is_err());
    }

    #[test]
    fn histogram_smoothing_known_value() {
        // Nine values in the low bin, none in the high bin:
        // p = ((9 + .5) / (9 + 1), (0 + .5) / (9 + 1)) = (.95, .05).
        let pos = vec![0.0f32; 9];
        let neg = vec![0.0f32, 1.0];
        let got = estimate_histograms(&pos, &neg, 2).unwrap();
        assert_eq!(got.p_pos, vec![0.95, 0.05]);
        assert_eq!(got.p_neg, vec![0.5, 0.5]);
        assert_eq!(got.edges, vec![0.0, 0.5, 1.0]);
    }

    #[test]
    fn histogram_max_value_lands_in_last_bin() {
        let got = estimate_histograms(&[0.0, 1.0], &[1.0], 4).unwrap();
        // 1.0 belongs to the final bin, not a phantom fifth one.
        assert!((got.p_pos.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(got.p_pos.len(), 4);
        assert!(got.p_pos[3] > got.p_pos[1]);
    }

    #[test]
    fn degenerate_range_collapses_to_single_bin_and_zero_score() {
        let got = estimate_histograms(&[2.5, 2.5, 2.5], &[2.5], 32).unwrap();
        assert_eq!(got.p_pos, vec![1.0]);
        assert_eq!(got.p_neg, vec![1.0]);
        assert!(got.edges[1] > got.edges[0]);
        assert_eq!(symmetric_kl(&got).unwrap(), 0.0);
    }

    #[test]
    fn histogram_rejects_bad_input() {
        assert!(estimate_histograms(&[], &[1.0], 2).is_err());
        assert!(estimate_histograms(&[1.0], &[], 2).is_err());
        assert!(estimate_histograms(&[1.0], &[1.0], 0).is_err());
        assert!(estimate_histograms(&[f32::NAN], &[1.0], 2).is_err());
    }

    fn gaussian_sample(rng: &mut ChaCha8Rng, mean: f64, n: usize) -> Vec<f32> {
        let dist = Normal::new(mean, 1.0).unwrap();
        (0..n).map(|_| dist.sample(rng) as f32).collect()
    }

    #[test]
    fn score_grows_with_mean_separation() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let neg = gaussian_sample(&mut rng, 0.0, 4000);
        let mut last = -1.0;
        for separation in [0.5, 1.5, 3.0] {
            let pos = gaussian_sample(&mut rng, separation, 4000);
            let score =
                symmetric_kl(&estimate_histograms(&pos, &neg, DEFAULT_BINS).unwrap()).unwrap();
            assert!(
                score > last,
                "separation {separation} gave {score}, not above {last}"
            );
            last = score;
        }
    }

    fn toy_matrix() -> (ActivationMatrix, DatasetPartition) {
        // Three units; unit 1 separates the classes, units 0 and 2 do not.
        let layers = vec![
            LayerSchema {
                name: "conv1".into(),
                unit_count: 2,
                kind: LayerKind::Conv,
            },
            LayerSchema {
                name: "fc1".into(),
                unit_count: 1,
                kind: LayerKind::Fc,
            },
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 200;
        let mut ids = Vec::new();
        let mut values = Vec::new();
        for i in 0..n {
            let positive = i % 2 == 0;
            ids.push(format!("img{i:03}"));
            let base = gaussian_sample(&mut rng, 0.0, 3);
            values.push(base[0]);
            values.push(base[1] + if positive { 4.0 } else { 0.0 });
            values.push(base[2]);
        }
        let matrix = ActivationMatrix::new(ids.clone(), layers, values).unwrap();
        let (pos, neg): (Vec<String>, Vec<String>) = ids.into_iter().partition(|id| {
            let n: usize = id[3..].parse().unwrap();
            n.is_multiple_of(2)
        });
        let part = DatasetPartition::from_ids("shifted", Split::Train, pos, neg);
        (matrix, part)
    }

    /// Independent recomputation of the per-unit score, kept deliberately
    /// naive: count, smooth, and sum the two KL terms by hand.
    fn naive_unit_score(pos: &[f32], neg: &[f32], bins: usize) -> f64 {
        let all: Vec<f64> = pos.iter().chain(neg).map(|&v| f64::from(v)).collect();
        let min = all.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = all.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if min == max {
            return 0.0;
        }
        let count = |values: &[f32]| -> Vec<f64> {
            let mut c = vec![0.0; bins];
            for &v in values {
                let mut b = ((f64::from(v) - min) / (max - min) * bins as f64) as usize;
                if b == bins {
                    b -= 1;
                }
                c[b] += 1.0;
            }
            let n: f64 = c.iter().sum();
            c.iter()
                .map(|&x| (x + 0.5) / (n + bins as f64 * 0.5))
                .collect()
        };
        let (p, q) = (count(pos), count(neg));
        let mut s = 0.0;
        for b in 0..bins {
            s += p[b] * (p[b] / q[b]).ln() + q[b] * (q[b] / p[b]).ln();
        }
        s
    }

    #[test]
    fn profile_matches_naive_reimplementation_and_ranks_planted_unit_first() {
        let (matrix, part) = toy_matrix();
        let profile = divergence_profile(&matrix, &part, DEFAULT_BINS).unwrap();
        assert_eq!(profile.len(), 3);

        let pos = matrix.rows_for(&part.positive_ids).unwrap();
        let neg = matrix.rows_for(&part.negative_ids).unwrap();
        for entry in &profile {
            let flat = entry.unit.flat_index;
            let expected = naive_unit_score(
                &pos.column(flat).unwrap(),
                &neg.column(flat).unwrap(),
                DEFAULT_BINS,
            );
            assert!(
                (entry.score - expected).abs() < 1e-12,
                "unit {flat}: {} vs naive {expected}",
                entry.score
            );
        }

        let prime = select_prime_units("shifted", &profile, 1).unwrap();
        assert_eq!(prime.units[0].flat_index, 1);
        assert!(prime.scores[0] > profile[0].score * 5.0);
    }

    #[test]
    fn prime_units_tie_breaks_toward_lower_flat_index() {
        let unit = |flat: usize, score: f64| UnitDivergence {
            unit: UnitAddress {
                layer_index: 0,
                unit_index: flat,
                flat_index: flat,
            },
            score,
        };
        let profile = vec![unit(0, 1.0), unit(1, 2.0), unit(2, 2.0), unit(3, 0.5)];
        let prime = select_prime_units("w", &profile, 3).unwrap();
        let flats: Vec<usize> = prime.units.iter().map(|u| u.flat_index).collect();
        assert_eq!(flats, vec![1, 2, 0]);
        // k beyond the unit count returns everything.
        assert_eq!(
            select_prime_units("w", &profile, 99).unwrap().units.len(),
            4
        );
    }

    #[test]
    fn layer_profile_normalizes_per_layer_maxima() {
        let layers = vec![
            LayerSchema {
                name: "conv1".into(),
                unit_count: 2,
                kind: LayerKind::Conv,
            },
            LayerSchema {
                name: "fc1".into(),
                unit_count: 1,
                kind: LayerKind::Fc,
            },
        ];
        let unit = |layer: usize, unit: usize, flat: usize, score: f64| UnitDivergence {
            unit: UnitAddress {
                layer_index: layer,
                unit_index: unit,
                flat_index: flat,
            },
            score,
        };
        let profile = vec![unit(0, 0, 0, 3.0), unit(0, 1, 1, 1.0), unit(1, 0, 2, 1.0)];
        let lp = layer_profile("red", &profile, &layers).unwrap();
        assert_eq!(lp.per_layer_max, vec![3.0, 1.0]);
        assert_eq!(lp.normalizer, 4.0);
        assert_eq!(lp.normalized, vec![0.75, 0.25]);
        assert!((lp.normalized.iter().sum::<f64>() - 1.0).abs() < 1e-12);

        let zero = vec![unit(0, 0, 0, 0.0), unit(0, 1, 1, 0.0), unit(1, 0, 2, 0.0)];
        let lp = layer_profile("noise", &zero, &layers).unwrap();
        assert_eq!(lp.normalized, vec![0.5, 0.5]);
        assert_eq!(lp.normalizer, 0.0);
    }

    #[test]
    fn salient_words_ranks_by_share_then_alphabet() {
        let layers = vec![LayerSchema {
            name: "conv1".into(),
            unit_count: 1,
            kind: LayerKind::Conv,
        }];
        let profile = |word: &str, share: f64| LayerDivergenceProfile {
            word: word.into(),
            per_layer_max: vec![share],
            normalized: vec![share],
            normalizer: 1.0,
        };
        let table = salient_words(
            &[
                profile("wool", 0.5),
                profile("red", 0.9),
                profile("blue", 0.9),
            ],
            &layers,
            0,
        )
        .unwrap();
        assert_eq!(table.layer, "conv1");
        assert_eq!(table.ranked_words, vec!["blue", "red", "wool"]);
        assert_eq!(table.shares, vec![0.9, 0.9, 0.5]);
    }

    #[test]
    fn layer_magnitude_sums_and_maxes_per_layer() {
        let layers = vec![
            LayerSchema {
                name: "conv1".into(),
                unit_count: 2,
                kind: LayerKind::Conv,
            },
            LayerSchema {
                name: "fc1".into(),
                unit_count: 1,
                kind: LayerKind::Fc,
            },
        ];
        let unit = |layer: usize, unit: usize, flat: usize, score: f64| UnitDivergence {
            unit: UnitAddress {
                layer_index: layer,
                unit_index: unit,
                flat_index: flat,
            },
            score,
        };
        let w1 = vec![unit(0, 0, 0, 1.0), unit(0, 1, 1, 3.0), unit(1, 0, 2, 2.0)];
        let w2 = vec![unit(0, 0, 0, 2.0), unit(0, 1, 1, 0.0), unit(1, 0, 2, 4.0)];
        let m = average_layer_magnitude(&[&w1, &w2], &layers).unwrap();
        assert_eq!(m.sum_variant, vec![3.0, 3.0]);
        assert_eq!(m.max_variant, vec![2.5, 3.0]);
    }
}

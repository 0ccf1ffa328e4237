//! Two-stage logistic classification and the visualness score.
//!
//! Stage one trains on the word's prime-unit activations with a balanced
//! seeded subsample of the weak labels. Its confidences then re-rank the
//! training pool; keeping only the most confident positives and least
//! confident negatives sheds much of the label noise, and stage two retrains
//! on that cleaner subset using every unit as a feature. Visualness is the
//! balanced accuracy of a model on a held-out split: the average of the
//! positive and negative recall.
//!
//! The optimizer is full-batch gradient descent with a backtracking (Armijo)
//! line search on the standardized design matrix. The loss is
//! `mean(softplus(-y z)) + l2/(2n) * |w|^2` with labels `y` in {-1, +1} and
//! an unregularized bias.

use std::collections::HashSet;
use std::io::Read as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::actstore::ActivationMatrix;
use crate::corpus::DatasetPartition;
use crate::divergence::PrimeUnitSet;
use crate::error::{Error, Result};

pub const DEFAULT_L2: f64 = 1.0;
pub const DEFAULT_RESAMPLE_FRACTION: f64 = 0.5;

pub const ALRM_MAGIC: [u8; 4] = *b"ALRM";
pub const ALRM_VERSION: u8 = 1;

/// Which training round produced a model or report.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Initial,
    Resampled,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Initial => "initial",
            Stage::Resampled => "resampled",
        }
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Gradient descent stopping rule. The defaults are the pipeline contract;
/// tests tighten `tolerance` when verifying exact optima.
#[derive(Debug, Clone, Copy)]
pub struct TrainOptions {
    pub max_epochs: usize,
    /// Stop once the gradient infinity norm falls below this.
    pub tolerance: f64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            max_epochs: 1000,
            tolerance: 1e-6,
        }
    }
}

/// A trained logistic model. Weights live in z-scored feature space; raw
/// features are standardized by the stored means and stds at prediction
/// time. `selector` maps model features to flat unit columns of the
/// activation matrix (`None` means all columns).
#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub feature_means: Vec<f64>,
    pub feature_stds: Vec<f64>,
    pub selector: Option<Vec<usize>>,
    pub l2: f64,
    pub seed: u64,
}

#[derive(Serialize, Deserialize)]
struct ModelHeader {
    feature_dim: usize,
    l2: f64,
    seed: u64,
    selector: Option<Vec<usize>>,
}

fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + exp(t))` without overflow.
fn softplus(t: f64) -> f64 {
    if t > 0.0 {
        t + (-t).exp().ln_1p()
    } else {
        t.exp().ln_1p()
    }
}

impl LinearModel {
    pub fn feature_dim(&self) -> usize {
        self.weights.len()
    }

    /// Sigmoid confidence that `features` (raw, already selector-ordered)
    /// belongs to the positive class.
    pub fn confidence(&self, features: &[f64]) -> Result<f64> {
        if features.len() != self.feature_dim() {
            return Err(Error::DimensionMismatch {
                what: "prediction features",
                expected: self.feature_dim(),
                actual: features.len(),
            });
        }
        let mut z = self.bias;
        for (j, &x) in features.iter().enumerate() {
            z += self.weights[j] * (x - self.feature_means[j]) / self.feature_stds[j];
        }
        Ok(sigmoid(z))
    }

    /// Confidence for one image of the matrix, applying the stored selector.
    pub fn confidence_for(&self, matrix: &ActivationMatrix, id: &str) -> Result<f64> {
        self.confidence(&raw_features(matrix, id, self.selector.as_deref())?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let header = serde_json::to_vec(&ModelHeader {
            feature_dim: self.feature_dim(),
            l2: self.l2,
            seed: self.seed,
            selector: self.selector.clone(),
        })
        .expect("header serializes");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&ALRM_MAGIC);
        bytes.push(ALRM_VERSION);
        bytes.extend_from_slice(
            &u32::try_from(header.len())
                .expect("header fits u32")
                .to_le_bytes(),
        );
        bytes.extend_from_slice(&header);
        for value in self
            .weights
            .iter()
            .chain(std::iter::once(&self.bias))
            .chain(self.feature_means.iter())
            .chain(self.feature_stds.iter())
        {
            bytes.extend_from_slice(&value.to_le_bytes());
        }
        crate::util::atomic_write(path, &bytes).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<LinearModel> {
        let format_err = |message: String| Error::Format {
            path: path.to_path_buf(),
            message,
        };
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        if bytes.len() < 9 || bytes[..4] != ALRM_MAGIC {
            return Err(format_err("not an ALRM model file".into()));
        }
        if bytes[4] != ALRM_VERSION {
            return Err(format_err(format!(
                "unsupported version {}, expected {ALRM_VERSION}",
                bytes[4]
            )));
        }
        let hlen = u32::from_le_bytes([bytes[5], bytes[6], bytes[7], bytes[8]]) as usize;
        let header_end = 9usize
            .checked_add(hlen)
            .filter(|&end| end <= bytes.len())
            .ok_or_else(|| format_err("header truncated".into()))?;
        let header: ModelHeader = serde_json::from_slice(&bytes[9..header_end])
            .map_err(|e| format_err(format!("header is not valid JSON: {e}")))?;
        let d = header.feature_dim;
        let expected = (3 * d + 1) * std::mem::size_of::<f64>();
        let payload = &bytes[header_end..];
        if payload.len() != expected {
            return Err(format_err(format!(
                "payload is {} bytes, expected {expected}",
                payload.len()
            )));
        }
        if let Some(selector) = &header.selector {
            if selector.len() != d {
                return Err(format_err(format!(
                    "selector has {} entries for {d} features",
                    selector.len()
                )));
            }
        }
        let mut values = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
        let mut take = |n: usize| -> Vec<f64> { values.by_ref().take(n).collect() };
        let weights = take(d);
        let bias = take(1)[0];
        let feature_means = take(d);
        let feature_stds = take(d);
        if weights
            .iter()
            .chain(&feature_means)
            .chain(&feature_stds)
            .any(|v| !v.is_finite())
            || !bias.is_finite()
        {
            return Err(format_err("non-finite model parameter".into()));
        }
        if feature_stds.iter().any(|&s| s <= 0.0) {
            return Err(format_err("non-positive feature std".into()));
        }
        Ok(LinearModel {
            weights,
            bias,
            feature_means,
            feature_stds,
            selector: header.selector,
            l2: header.l2,
            seed: header.seed,
        })
    }
}

/// Extracts one image's raw feature vector: the selected flat unit columns,
/// or the full row when `selector` is `None`.
pub fn raw_features(
    matrix: &ActivationMatrix,
    id: &str,
    selector: Option<&[usize]>,
) -> Result<Vec<f64>> {
    let row = matrix.row(id)?;
    match selector {
        None => Ok(row.iter().map(|&v| f64::from(v)).collect()),
        Some(flats) => flats
            .iter()
            .map(|&flat| {
                row.get(flat)
                    .map(|&v| f64::from(v))
                    .ok_or(Error::AddressOutOfRange {
                        what: "flat unit index",
                        index: flat,
                        limit: row.len(),
                    })
            })
            .collect(),
    }
}

/// Loss and gradient of the regularized logistic objective at `(w, b)` on a
/// row-major `n x d` design matrix with labels in {-1, +1}. Public so tests
/// can check the analytic gradient against finite differences.
pub fn logistic_value_grad(
    x: &[f64],
    y: &[f64],
    n: usize,
    d: usize,
    w: &[f64],
    b: f64,
    l2: f64,
) -> (f64, Vec<f64>, f64) {
    debug_assert_eq!(x.len(), n * d);
    debug_assert_eq!(y.len(), n);
    debug_assert_eq!(w.len(), d);
    let mut loss = 0.0;
    let mut grad_w = vec![0.0; d];
    let mut grad_b = 0.0;
    for i in 0..n {
        let row = &x[i * d..(i + 1) * d];
        let mut z = b;
        for j in 0..d {
            z += w[j] * row[j];
        }
        let margin = -y[i] * z;
        loss += softplus(margin);
        // d/dz softplus(-y z) = -y * sigmoid(-y z)
        let coeff = -y[i] * sigmoid(margin);
        grad_b += coeff;
        for j in 0..d {
            grad_w[j] += coeff * row[j];
        }
    }
    let n_f = n as f64;
    loss /= n_f;
    grad_b /= n_f;
    for j in 0..d {
        grad_w[j] /= n_f;
        loss += l2 / (2.0 * n_f) * w[j] * w[j];
        grad_w[j] += l2 / n_f * w[j];
    }
    (loss, grad_w, grad_b)
}

fn logistic_value(x: &[f64], y: &[f64], n: usize, d: usize, w: &[f64], b: f64, l2: f64) -> f64 {
    let mut loss = 0.0;
    for i in 0..n {
        let row = &x[i * d..(i + 1) * d];
        let mut z = b;
        for j in 0..d {
            z += w[j] * row[j];
        }
        loss += softplus(-y[i] * z);
    }
    let n_f = n as f64;
    loss / n_f + w.iter().map(|v| v * v).sum::<f64>() * l2 / (2.0 * n_f)
}

/// Trains an L2-regularized logistic model on raw features (row-major
/// `n x d`). Features are z-scored internally; zero-variance columns keep
/// std 1 and, starting from zero weights, never move. Labels are weak and
/// may be wrong; that is the caller's problem. `seed` is recorded for
/// provenance (the optimizer itself is deterministic).
pub fn train_logistic(
    x: &[f64],
    labels: &[bool],
    d: usize,
    l2: f64,
    seed: u64,
    options: TrainOptions,
) -> Result<LinearModel> {
    let n = labels.len();
    if n == 0 || d == 0 {
        return Err(Error::EmptyInput {
            what: "training data",
        });
    }
    if x.len() != n * d {
        return Err(Error::DimensionMismatch {
            what: "design matrix",
            expected: n * d,
            actual: x.len(),
        });
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            context: "design matrix".into(),
        });
    }
    if l2 < 0.0 {
        return Err(Error::InvalidInput(format!("l2 must be >= 0, got {l2}")));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    if n_pos == 0 {
        return Err(Error::SingleClass { class: "negative" });
    }
    if n_pos == n {
        return Err(Error::SingleClass { class: "positive" });
    }

    // Population statistics per column.
    let mut means = vec![0.0f64; d];
    for i in 0..n {
        for j in 0..d {
            means[j] += x[i * d + j];
        }
    }
    for m in &mut means {
        *m /= n as f64;
    }
    let mut stds = vec![0.0f64; d];
    for i in 0..n {
        for j in 0..d {
            let c = x[i * d + j] - means[j];
            stds[j] += c * c;
        }
    }
    for s in &mut stds {
        *s = (*s / n as f64).sqrt();
        if *s == 0.0 {
            *s = 1.0;
        }
    }

    let mut design = vec![0.0f64; n * d];
    for i in 0..n {
        for j in 0..d {
            design[i * d + j] = (x[i * d + j] - means[j]) / stds[j];
        }
    }
    let y: Vec<f64> = labels.iter().map(|&l| if l { 1.0 } else { -1.0 }).collect();

    let mut w = vec![0.0f64; d];
    let mut b = 0.0f64;
    let mut step = 1.0f64;
    let (mut loss, mut grad_w, mut grad_b) = logistic_value_grad(&design, &y, n, d, &w, b, l2);
    for epoch in 0..options.max_epochs {
        let grad_inf = grad_w.iter().fold(grad_b.abs(), |m, g| m.max(g.abs()));
        if grad_inf < options.tolerance {
            break;
        }
        let grad_sq = grad_w.iter().map(|g| g * g).sum::<f64>() + grad_b * grad_b;
        step = (step * 2.0).min(1e6);
        let (next_w, next_b) = loop {
            let cand_w: Vec<f64> = w
                .iter()
                .zip(&grad_w)
                .map(|(wi, gi)| wi - step * gi)
                .collect();
            let cand_b = b - step * grad_b;
            let cand_loss = logistic_value(&design, &y, n, d, &cand_w, cand_b, l2);
            // Armijo sufficient decrease along the steepest descent direction.
            if cand_loss <= loss - 1e-4 * step * grad_sq {
                break (cand_w, cand_b);
            }
            step *= 0.5;
            if step < 1e-20 {
                return Err(Error::NoProgress { epoch });
            }
        };
        w = next_w;
        b = next_b;
        let next = logistic_value_grad(&design, &y, n, d, &w, b, l2);
        loss = next.0;
        grad_w = next.1;
        grad_b = next.2;
    }

    Ok(LinearModel {
        weights: w,
        bias: b,
        feature_means: means,
        feature_stds: stds,
        selector: None,
        l2,
        seed,
    })
}

/// Draws `m` ids without replacement, keeping the original relative order.
pub fn balanced_subsample(ids: &[String], m: usize, rng: &mut ChaCha8Rng) -> Vec<String> {
    debug_assert!(m <= ids.len());
    let mut picked = rand::seq::index::sample(rng, ids.len(), m).into_vec();
    picked.sort_unstable();
    picked.into_iter().map(|i| ids[i].clone()).collect()
}

fn build_design(
    matrix: &ActivationMatrix,
    pos_ids: &[String],
    neg_ids: &[String],
    selector: Option<&[usize]>,
) -> Result<(Vec<f64>, Vec<bool>, usize)> {
    let d = selector.map_or(matrix.unit_count(), <[usize]>::len);
    let mut x = Vec::with_capacity((pos_ids.len() + neg_ids.len()) * d);
    let mut labels = Vec::with_capacity(pos_ids.len() + neg_ids.len());
    for (ids, label) in [(pos_ids, true), (neg_ids, false)] {
        for id in ids {
            x.extend_from_slice(&raw_features(matrix, id, selector)?);
            labels.push(label);
        }
    }
    Ok((x, labels, d))
}

/// Stage one: balanced seeded subsample of the weak partition, prime-unit
/// columns as features.
pub fn train_initial(
    matrix: &ActivationMatrix,
    part: &DatasetPartition,
    prime: &PrimeUnitSet,
    l2: f64,
    seed: u64,
) -> Result<LinearModel> {
    if prime.units.is_empty() {
        return Err(Error::EmptyInput {
            what: "prime units",
        });
    }
    if part.positive_ids.is_empty() {
        return Err(Error::SingleClass { class: "negative" });
    }
    if part.negative_ids.is_empty() {
        return Err(Error::SingleClass { class: "positive" });
    }
    let m = part.positive_ids.len().min(part.negative_ids.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pos = balanced_subsample(&part.positive_ids, m, &mut rng);
    let neg = balanced_subsample(&part.negative_ids, m, &mut rng);
    let selector: Vec<usize> = prime.units.iter().map(|u| u.flat_index).collect();
    let (x, labels, d) = build_design(matrix, &pos, &neg, Some(&selector))?;
    let mut model = train_logistic(&x, &labels, d, l2, seed, TrainOptions::default())?;
    model.selector = Some(selector);
    Ok(model)
}

/// One scored image in a resampled training pool.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedSample {
    pub image_id: String,
    pub confidence: f64,
    /// The weak label the image carried into ranking.
    pub weak_positive: bool,
}

/// The label-noise-reduced training pool for stage two.
#[derive(Debug, Clone, PartialEq)]
pub struct ResampleOutcome {
    pub word: String,
    /// Positives ranked by confidence descending; the retained top slice.
    pub positives: Vec<RankedSample>,
    /// Negatives ranked by confidence ascending; the retained bottom slice.
    pub negatives: Vec<RankedSample>,
}

impl ResampleOutcome {
    pub fn positive_ids(&self) -> Vec<String> {
        self.positives.iter().map(|s| s.image_id.clone()).collect()
    }

    pub fn negative_ids(&self) -> Vec<String> {
        self.negatives.iter().map(|s| s.image_id.clone()).collect()
    }
}

/// Scores the partition with the initial model and keeps the
/// `ceil(fraction * min(|pos|, |neg|))` most confident positives and least
/// confident negatives. Ties break on image id so the outcome is
/// deterministic.
pub fn rank_and_resample(
    model: &LinearModel,
    matrix: &ActivationMatrix,
    part: &DatasetPartition,
    fraction: f64,
) -> Result<ResampleOutcome> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidInput(format!(
            "resample fraction must be in (0, 1], got {fraction}"
        )));
    }
    if part.positive_ids.is_empty() || part.negative_ids.is_empty() {
        return Err(Error::SingleClass {
            class: if part.positive_ids.is_empty() {
                "negative"
            } else {
                "positive"
            },
        });
    }
    let score = |ids: &[String], weak_positive: bool| -> Result<Vec<RankedSample>> {
        ids.iter()
            .map(|id| {
                Ok(RankedSample {
                    image_id: id.clone(),
                    confidence: model.confidence_for(matrix, id)?,
                    weak_positive,
                })
            })
            .collect()
    };
    let mut positives = score(&part.positive_ids, true)?;
    let mut negatives = score(&part.negative_ids, false)?;
    positives.sort_by(|a, b| {
        b.confidence
            .total_cmp(&a.confidence)
            .then_with(|| a.image_id.cmp(&b.image_id))
    });
    negatives.sort_by(|a, b| {
        a.confidence
            .total_cmp(&b.confidence)
            .then_with(|| a.image_id.cmp(&b.image_id))
    });
    let m_base = positives.len().min(negatives.len());
    let m = ((fraction * m_base as f64).ceil() as usize).clamp(1, m_base);
    positives.truncate(m);
    negatives.truncate(m);
    Ok(ResampleOutcome {
        word: part.word.clone(),
        positives,
        negatives,
    })
}

/// Stage two: retrains on the resampled pool with every unit as a feature.
pub fn train_full(
    matrix: &ActivationMatrix,
    pos_ids: &[String],
    neg_ids: &[String],
    l2: f64,
    seed: u64,
) -> Result<LinearModel> {
    if pos_ids.is_empty() {
        return Err(Error::SingleClass { class: "negative" });
    }
    if neg_ids.is_empty() {
        return Err(Error::SingleClass { class: "positive" });
    }
    let (x, labels, d) = build_design(matrix, pos_ids, neg_ids, None)?;
    train_logistic(&x, &labels, d, l2, seed, TrainOptions::default())
}

/// Balanced held-out accuracy of one model for one word.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VisualnessReport {
    pub word: String,
    pub stage: Stage,
    /// Mean of positive and negative recall on a balanced seeded subsample
    /// of the evaluation split; 0.5 is chance.
    pub visualness: f64,
    pub n_pos: usize,
    pub n_neg: usize,
    pub seed: u64,
}

/// Evaluates balanced accuracy on `part` (typically the test split). The ids
/// in `train_ids` must be disjoint from the evaluation split; any overlap is
/// an error rather than a silently optimistic score.
pub fn visualness(
    model: &LinearModel,
    matrix: &ActivationMatrix,
    part: &DatasetPartition,
    stage: Stage,
    seed: u64,
    train_ids: &HashSet<String>,
) -> Result<VisualnessReport> {
    for id in part.positive_ids.iter().chain(part.negative_ids.iter()) {
        if train_ids.contains(id) {
            return Err(Error::TrainTestOverlap { id: id.clone() });
        }
    }
    if part.positive_ids.is_empty() || part.negative_ids.is_empty() {
        return Err(Error::SingleClass {
            class: if part.positive_ids.is_empty() {
                "negative"
            } else {
                "positive"
            },
        });
    }
    let m = part.positive_ids.len().min(part.negative_ids.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pos = balanced_subsample(&part.positive_ids, m, &mut rng);
    let neg = balanced_subsample(&part.negative_ids, m, &mut rng);
    let recall = |ids: &[String], want_positive: bool| -> Result<f64> {
        let mut hits = 0usize;
        for id in ids {
            let predicted_positive = model.confidence_for(matrix, id)? >= 0.5;
            if predicted_positive == want_positive {
                hits += 1;
            }
        }
        Ok(hits as f64 / ids.len() as f64)
    };
    let visualness = 0.5 * (recall(&pos, true)? + recall(&neg, false)?);
    Ok(VisualnessReport {
        word: part.word.clone(),
        stage,
        visualness,
        n_pos: m,
        n_neg: m,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::actstore::UnitAddress;
    use crate::actstore::{LayerKind, LayerSchema};
    use crate::corpus::Split;
    use rand::Rng;

    fn tight() -> TrainOptions {
        TrainOptions {
            max_epochs: 50_000,
            tolerance: 1e-12,
        }
    }

    #[test]
    fn gradient_matches_central_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (n, d) = (12, 4);
        let x: Vec<f64> = (0..n * d).map(|_| rng.random_range(-2.0..2.0)).collect();
        let y: Vec<f64> = (0..n)
            .map(|_| {
                if rng.random_range(0.0..1.0) < 0.5 {
                    1.0
                } else {
                    -1.0
                }
            })
            .collect();
        let w: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b = 0.3;
        let l2 = 1.0;
        let (_, grad_w, grad_b) = logistic_value_grad(&x, &y, n, d, &w, b, l2);

        let h = 1e-6;
        for j in 0..d {
            let mut w_plus = w.clone();
            let mut w_minus = w.clone();
            w_plus[j] += h;
            w_minus[j] -= h;
            let fd = (logistic_value(&x, &y, n, d, &w_plus, b, l2)
                - logistic_value(&x, &y, n, d, &w_minus, b, l2))
                / (2.0 * h);
            let rel = (grad_w[j] - fd).abs() / fd.abs().max(1e-8);
            assert!(rel < 1e-5, "weight {j}: analytic {} vs fd {fd}", grad_w[j]);
        }
        let fd_b = (logistic_value(&x, &y, n, d, &w, b + h, l2)
            - logistic_value(&x, &y, n, d, &w, b - h, l2))
            / (2.0 * h);
        assert!((grad_b - fd_b).abs() / fd_b.abs().max(1e-8) < 1e-5);
    }

    #[test]
    fn separable_one_dimensional_data_is_classified_perfectly() {
        let x = vec![1.0, 1.2, 0.9, -1.0, -1.1, -0.8];
        let labels = vec![true, true, true, false, false, false];
        let model = train_logistic(&x, &labels, 1, DEFAULT_L2, 0, TrainOptions::default()).unwrap();
        assert!(model.weights[0] > 0.0);
        for (i, &label) in labels.iter().enumerate() {
            let conf = model.confidence(&x[i..=i]).unwrap();
            assert_eq!(conf >= 0.5, label, "sample {i} confidence {conf}");
        }
    }

    #[test]
    fn noise_labels_score_near_chance_on_held_out_data() {
        // Labels independent of features: mean held-out accuracy over ten
        // seeds stays near 0.5.
        let mut total = 0.0;
        for seed in 0..10u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (n_train, n_test, d) = (120, 120, 3);
            let sample = |rng: &mut ChaCha8Rng, n: usize| -> (Vec<f64>, Vec<bool>) {
                let x = (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect();
                let y = (0..n).map(|i| i % 2 == 0).collect();
                (x, y)
            };
            let (x_train, y_train) = sample(&mut rng, n_train);
            let (x_test, y_test) = sample(&mut rng, n_test);
            let model = train_logistic(
                &x_train,
                &y_train,
                d,
                DEFAULT_L2,
                seed,
                TrainOptions::default(),
            )
            .unwrap();
            let mut hits = 0;
            for i in 0..n_test {
                let conf = model.confidence(&x_test[i * d..(i + 1) * d]).unwrap();
                if (conf >= 0.5) == y_test[i] {
                    hits += 1;
                }
            }
            total += hits as f64 / n_test as f64;
        }
        let mean = total / 10.0;
        assert!((mean - 0.5).abs() < 0.1, "mean held-out accuracy {mean}");
    }

    #[test]
    fn column_scaling_leaves_predictions_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (n, d) = (40, 2);
        let x: Vec<f64> = (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let labels: Vec<bool> = (0..n)
            .map(|i| x[i * d] + 0.3 * x[i * d + 1] > 0.1)
            .collect();
        let scaled: Vec<f64> = x
            .iter()
            .enumerate()
            .map(|(k, &v)| if k % d == 1 { v * 1000.0 } else { v })
            .collect();
        let base = train_logistic(&x, &labels, d, DEFAULT_L2, 0, TrainOptions::default()).unwrap();
        let big =
            train_logistic(&scaled, &labels, d, DEFAULT_L2, 0, TrainOptions::default()).unwrap();
        for i in 0..n {
            let a = base.confidence(&x[i * d..(i + 1) * d]).unwrap();
            let b = big.confidence(&scaled[i * d..(i + 1) * d]).unwrap();
            assert!((a - b).abs() < 1e-6, "sample {i}: {a} vs {b}");
        }
    }

    #[test]
    fn duplicated_column_splits_weight_and_keeps_predictions() {
        // Without regularization the optimum depends only on the summed
        // weight of identical columns, so predictions match the
        // single-column model; symmetry forces an even split.
        let x1 = vec![1.0, 0.6, -0.2, 0.4, -0.8, -1.1, 0.3, -0.5];
        let labels = vec![true, true, false, true, false, false, true, false];
        let x2: Vec<f64> = x1.iter().flat_map(|&v| [v, v]).collect();
        let single = train_logistic(&x1, &labels, 1, 0.0, 0, tight()).unwrap();
        let double = train_logistic(&x2, &labels, 2, 0.0, 0, tight()).unwrap();
        assert_eq!(double.weights[0], double.weights[1]);
        for i in 0..labels.len() {
            let a = single.confidence(&x1[i..=i]).unwrap();
            let b = double.confidence(&x2[i * 2..(i + 1) * 2]).unwrap();
            assert!((a - b).abs() < 1e-6, "sample {i}: {a} vs {b}");
        }
    }

    #[test]
    fn zero_variance_column_keeps_zero_weight() {
        let x = vec![
            1.0, 7.0, //
            0.8, 7.0, //
            -0.9, 7.0, //
            -1.2, 7.0,
        ];
        let labels = vec![true, true, false, false];
        let model = train_logistic(&x, &labels, 2, DEFAULT_L2, 0, TrainOptions::default()).unwrap();
        assert_eq!(model.weights[1], 0.0);
        assert_eq!(model.feature_stds[1], 1.0);
    }

    #[test]
    fn single_class_and_shape_errors() {
        assert!(matches!(
            train_logistic(
                &[1.0, 2.0],
                &[true, true],
                1,
                1.0,
                0,
                TrainOptions::default()
            )
            .unwrap_err(),
            Error::SingleClass { class: "positive" }
        ));
        assert!(matches!(
            train_logistic(&[1.0], &[true, false], 1, 1.0, 0, TrainOptions::default()).unwrap_err(),
            Error::DimensionMismatch { .. }
        ));
        let model = train_logistic(
            &[1.0, -1.0],
            &[true, false],
            1,
            1.0,
            0,
            TrainOptions::default(),
        )
        .unwrap();
        assert!(model.confidence(&[1.0, 2.0]).is_err());
    }

    #[test]
    fn balanced_subsample_is_seeded_and_ordered() {
        let ids: Vec<String> = (0..20).map(|i| format!("img{i:02}")).collect();
        let mut rng_a = ChaCha8Rng::seed_from_u64(9);
        let mut rng_b = ChaCha8Rng::seed_from_u64(9);
        let a = balanced_subsample(&ids, 8, &mut rng_a);
        let b = balanced_subsample(&ids, 8, &mut rng_b);
        assert_eq!(a, b);
        assert_eq!(a.len(), 8);
        let mut sorted = a.clone();
        sorted.sort();
        assert_eq!(a, sorted, "subsample preserves original order");
    }

    fn feature_matrix(n: usize, seed: u64, signal: f64) -> (ActivationMatrix, Vec<bool>) {
        // Units 0..2 carry the signal for true labels; 3..5 are noise.
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = vec![LayerSchema {
            name: "conv1".into(),
            unit_count: 6,
            kind: LayerKind::Conv,
        }];
        let mut ids = Vec::new();
        let mut values = Vec::new();
        let mut truth = Vec::new();
        for i in 0..n {
            let positive = i % 2 == 0;
            ids.push(format!("img{i:04}"));
            truth.push(positive);
            for unit in 0..6 {
                let mut v: f64 = rng.random_range(-1.0..1.0);
                if unit < 3 && positive {
                    v += signal;
                }
                values.push(v as f32);
            }
        }
        (ActivationMatrix::new(ids, layers, values).unwrap(), truth)
    }

    fn prime_set(flats: &[usize]) -> PrimeUnitSet {
        PrimeUnitSet {
            word: "w".into(),
            units: flats
                .iter()
                .map(|&f| UnitAddress {
                    layer_index: 0,
                    unit_index: f,
                    flat_index: f,
                })
                .collect(),
            scores: flats.iter().map(|_| 1.0).collect(),
        }
    }

    #[test]
    fn two_stage_training_recovers_from_label_noise() {
        let (matrix, truth) = feature_matrix(400, 17, 2.5);
        let ids = matrix.image_ids().to_vec();
        // Corrupt 25% of the weak labels deterministically.
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let weak: Vec<bool> = truth
            .iter()
            .map(|&t| {
                if rng.random_range(0.0..1.0) < 0.25 {
                    !t
                } else {
                    t
                }
            })
            .collect();
        let (train_pos, train_neg): (Vec<String>, Vec<String>) = {
            let mut pos = Vec::new();
            let mut neg = Vec::new();
            for (id, &w) in ids.iter().take(300).zip(&weak) {
                if w {
                    pos.push(id.clone());
                } else {
                    neg.push(id.clone());
                }
            }
            (pos, neg)
        };
        let part = DatasetPartition::from_ids("w", Split::Train, train_pos, train_neg);
        let initial = train_initial(&matrix, &part, &prime_set(&[0, 1, 2]), DEFAULT_L2, 7).unwrap();
        let resampled = rank_and_resample(&initial, &matrix, &part, 0.5).unwrap();

        // Resampling should lower the label error of the kept pool.
        let noisy = |samples: &[RankedSample]| {
            samples
                .iter()
                .filter(|s| {
                    let idx: usize = s.image_id[3..].parse().unwrap();
                    truth[idx] != s.weak_positive
                })
                .count()
        };
        let kept = resampled.positives.len() + resampled.negatives.len();
        let kept_noise =
            (noisy(&resampled.positives) + noisy(&resampled.negatives)) as f64 / kept as f64;
        assert!(kept_noise < 0.25, "resampled pool noise {kept_noise}");

        let full = train_full(
            &matrix,
            &resampled.positive_ids(),
            &resampled.negative_ids(),
            DEFAULT_L2,
            7,
        )
        .unwrap();

        // Evaluate both stages on the clean held-out tail.
        let test_pos: Vec<String> = ids[300..]
            .iter()
            .enumerate()
            .filter(|(k, _)| truth[300 + k])
            .map(|(_, id)| id.clone())
            .collect();
        let test_neg: Vec<String> = ids[300..]
            .iter()
            .enumerate()
            .filter(|(k, _)| !truth[300 + k])
            .map(|(_, id)| id.clone())
            .collect();
        let test = DatasetPartition::from_ids("w", Split::Test, test_pos, test_neg);
        let train_ids: HashSet<String> = ids[..300].iter().cloned().collect();
        let init_report =
            visualness(&initial, &matrix, &test, Stage::Initial, 5, &train_ids).unwrap();
        let full_report =
            visualness(&full, &matrix, &test, Stage::Resampled, 5, &train_ids).unwrap();
        assert!(
            init_report.visualness > 0.9,
            "initial {}",
            init_report.visualness
        );
        assert!(
            full_report.visualness >= init_report.visualness - 0.05,
            "full {} vs initial {}",
            full_report.visualness,
            init_report.visualness
        );
    }

    #[test]
    fn resample_size_uses_ceiling_and_orders_by_confidence() {
        let (matrix, _) = feature_matrix(10, 3, 2.0);
        let ids = matrix.image_ids().to_vec();
        let part =
            DatasetPartition::from_ids("w", Split::Train, ids[..5].to_vec(), ids[5..].to_vec());
        let initial = train_initial(&matrix, &part, &prime_set(&[0, 1, 2]), DEFAULT_L2, 7).unwrap();
        let out = rank_and_resample(&initial, &matrix, &part, 0.5).unwrap();
        // ceil(0.5 * 5) = 3.
        assert_eq!(out.positives.len(), 3);
        assert_eq!(out.negatives.len(), 3);
        for pair in out.positives.windows(2) {
            assert!(pair[0].confidence >= pair[1].confidence);
        }
        for pair in out.negatives.windows(2) {
            assert!(pair[0].confidence <= pair[1].confidence);
        }
        assert!(rank_and_resample(&initial, &matrix, &part, 0.0).is_err());
        assert!(rank_and_resample(&initial, &matrix, &part, 1.5).is_err());
    }

    #[test]
    fn visualness_rejects_train_test_overlap() {
        let (matrix, _) = feature_matrix(8, 3, 2.0);
        let ids = matrix.image_ids().to_vec();
        let part =
            DatasetPartition::from_ids("w", Split::Test, ids[..4].to_vec(), ids[4..].to_vec());
        let model = train_full(&matrix, &ids[..4], &ids[4..], 1.0, 0).unwrap();
        let train_ids: HashSet<String> = [ids[1].clone()].into();
        assert!(matches!(
            visualness(&model, &matrix, &part, Stage::Initial, 0, &train_ids).unwrap_err(),
            Error::TrainTestOverlap { .. }
        ));
    }

    #[test]
    fn model_file_round_trip_is_bit_exact() {
        let x = vec![1.0, 0.5, -1.0, 2.0, 0.1, -0.3, -1.4, 0.8];
        let labels = vec![true, false, true, false];
        let mut model =
            train_logistic(&x, &labels, 2, DEFAULT_L2, 99, TrainOptions::default()).unwrap();
        model.selector = Some(vec![4, 7]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.alrm");
        model.write(&path).unwrap();
        let loaded = LinearModel::read(&path).unwrap();
        assert_eq!(loaded, model);

        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        assert!(LinearModel::read(&path).is_err());

        let mut truncated = std::fs::read(&path).unwrap();
        truncated[0] = b'A';
        truncated.pop();
        std::fs::write(&path, &truncated).unwrap();
        assert!(LinearModel::read(&path).is_err());
    }
}

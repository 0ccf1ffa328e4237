//! A deterministic reference network and a synthetic corpus generator with
//! known ground truth.
//!
//! The network is a small fixed-weight CNN: weights are drawn once from a
//! seeded generator and never trained. It exists to give the pipeline a
//! cheap, fully reproducible activation source whose units genuinely react
//! to visual structure. Recorded activations follow the store convention:
//! conv layers record one spatial maximum per channel, fc layers record
//! every unit.
//!
//! The generator plants visual patterns (color patches, stripes) in fixed
//! regions and attaches their words with calibrated reliability, alongside
//! distractor words with no visual counterpart, then corrupts the training
//! and validation labels with a known flip rate. Test-split labels are left
//! clean so held-out accuracy measures the detector, not the noise.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::actstore::{spatial_max_pool, ActivationMatrix, LayerKind, LayerSchema};
use crate::corpus::{assign_splits, CorpusManifest, ImageRecord, Split};
use crate::error::{Error, Result};
use crate::image::{Rect, RgbImage};
use crate::saliency::ActivationProvider;
use crate::util::derive_seed;

/// One convolution block: valid padding, stride 1, ReLU, then an optional
/// non-overlapping max pool of factor `pool` (1 = none).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub name: String,
    pub out_channels: usize,
    pub kernel: usize,
    pub pool: usize,
}

/// One fully connected block with ReLU.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FcSpec {
    pub name: String,
    pub units: usize,
}

/// Architecture plus the weight seed. Two nets built from equal specs are
/// identical functions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RefNetSpec {
    pub seed: u64,
    pub input_side: usize,
    pub conv: Vec<ConvSpec>,
    pub fc: Vec<FcSpec>,
}

impl Default for RefNetSpec {
    fn default() -> Self {
        let conv = |name: &str, out_channels: usize, kernel: usize, pool: usize| ConvSpec {
            name: name.into(),
            out_channels,
            kernel,
            pool,
        };
        RefNetSpec {
            seed: 42,
            input_side: 64,
            conv: vec![
                conv("conv1", 12, 5, 2),
                conv("conv2", 16, 5, 2),
                conv("conv3", 24, 3, 1),
                conv("conv4", 32, 3, 2),
                conv("conv5", 40, 3, 1),
            ],
            fc: vec![
                FcSpec {
                    name: "fc6".into(),
                    units: 64,
                },
                FcSpec {
                    name: "fc7".into(),
                    units: 48,
                },
            ],
        }
    }
}

impl RefNetSpec {
    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("spec serializes")
    }

    pub fn from_toml_str(text: &str) -> Result<RefNetSpec> {
        toml::from_str(text).map_err(|e| Error::Config(format!("reference net spec: {e}")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::util::atomic_write(path, self.to_toml_string().as_bytes())
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<RefNetSpec> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RefNetSpec::from_toml_str(&text)
    }

    /// Walks the architecture and returns each conv stage's output side
    /// (after pooling) plus the flattened dimension feeding the first fc
    /// layer. Fails when any stage would collapse below one pixel.
    fn trace_dims(&self) -> Result<(Vec<usize>, usize)> {
        if self.input_side == 0 {
            return Err(Error::Config("input side must be positive".into()));
        }
        if self.conv.is_empty() || self.fc.is_empty() {
            return Err(Error::Config(
                "reference net needs at least one conv and one fc layer".into(),
            ));
        }
        let mut side = self.input_side;
        let mut sides = Vec::with_capacity(self.conv.len());
        let mut channels = 3usize;
        for conv in &self.conv {
            if conv.kernel == 0 || conv.out_channels == 0 || conv.pool == 0 {
                return Err(Error::Config(format!(
                    "conv layer {:?} has a zero dimension",
                    conv.name
                )));
            }
            if side < conv.kernel {
                return Err(Error::Config(format!(
                    "conv layer {:?}: kernel {} exceeds input side {side}",
                    conv.name, conv.kernel
                )));
            }
            side = side - conv.kernel + 1;
            side /= conv.pool;
            if side == 0 {
                return Err(Error::Config(format!(
                    "conv layer {:?} pools the map away",
                    conv.name
                )));
            }
            channels = conv.out_channels;
            sides.push(side);
        }
        for fc in &self.fc {
            if fc.units == 0 {
                return Err(Error::Config(format!(
                    "fc layer {:?} has zero units",
                    fc.name
                )));
            }
        }
        Ok((sides, channels * side * side))
    }
}

/// The instantiated network.
#[derive(Debug, Clone)]
pub struct RefNet {
    spec: RefNetSpec,
    schema: Vec<LayerSchema>,
    /// Per conv layer, `[oc][ic][ky][kx]` flattened.
    conv_weights: Vec<Vec<f32>>,
    conv_bias: Vec<Vec<f32>>,
    /// Per fc layer, `[unit][input]` flattened.
    fc_weights: Vec<Vec<f32>>,
    fc_bias: Vec<Vec<f32>>,
}

impl RefNet {
    /// Builds the net, drawing weights uniformly from
    /// `(-sqrt(6/fan_in), sqrt(6/fan_in))` and biases from `(0, 0.1)` in a
    /// fixed layer order, all from one stream seeded by `spec.seed`.
    pub fn new(spec: RefNetSpec) -> Result<RefNet> {
        spec.trace_dims()?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, "refnet-weights"));
        fn draw(rng: &mut ChaCha8Rng, count: usize, lo: f64, hi: f64) -> Vec<f32> {
            (0..count)
                .map(|_| rng.random_range(lo..hi) as f32)
                .collect()
        }

        let mut conv_weights = Vec::with_capacity(spec.conv.len());
        let mut conv_bias = Vec::with_capacity(spec.conv.len());
        let mut channels = 3usize;
        for conv in &spec.conv {
            let fan_in = channels * conv.kernel * conv.kernel;
            let bound = (6.0 / fan_in as f64).sqrt();
            conv_weights.push(draw(&mut rng, conv.out_channels * fan_in, -bound, bound));
            conv_bias.push(draw(&mut rng, conv.out_channels, 0.0, 0.1));
            channels = conv.out_channels;
        }
        let (_, mut in_dim) = spec.trace_dims()?;
        let mut fc_weights = Vec::with_capacity(spec.fc.len());
        let mut fc_bias = Vec::with_capacity(spec.fc.len());
        for fc in &spec.fc {
            let bound = (6.0 / in_dim as f64).sqrt();
            fc_weights.push(draw(&mut rng, fc.units * in_dim, -bound, bound));
            fc_bias.push(draw(&mut rng, fc.units, 0.0, 0.1));
            in_dim = fc.units;
        }

        let schema = spec
            .conv
            .iter()
            .map(|c| LayerSchema {
                name: c.name.clone(),
                unit_count: c.out_channels,
                kind: LayerKind::Conv,
            })
            .chain(spec.fc.iter().map(|f| LayerSchema {
                name: f.name.clone(),
                unit_count: f.units,
                kind: LayerKind::Fc,
            }))
            .collect();

        Ok(RefNet {
            spec,
            schema,
            conv_weights,
            conv_bias,
            fc_weights,
            fc_bias,
        })
    }

    pub fn spec(&self) -> &RefNetSpec {
        &self.spec
    }

    pub fn schema(&self) -> &[LayerSchema] {
        &self.schema
    }

    pub fn recorded_units(&self) -> usize {
        self.schema.iter().map(|l| l.unit_count).sum()
    }

    /// Runs the network and records one activation vector: per conv layer
    /// the post-ReLU spatial maximum of each channel, per fc layer every
    /// post-ReLU unit, concatenated in layer order.
    pub fn activations(&self, image: &RgbImage) -> Result<Vec<f32>> {
        if image.side() != self.spec.input_side {
            return Err(Error::DimensionMismatch {
                what: "input image side",
                expected: self.spec.input_side,
                actual: image.side(),
            });
        }
        let mut dim = self.spec.input_side;
        let mut channels = 3usize;
        // Channel-major planes, pixels centered to [-0.5, 0.5].
        let mut x = vec![0.0f32; 3 * dim * dim];
        for y in 0..dim {
            for xx in 0..dim {
                let px = image.pixel(xx, y);
                for c in 0..3 {
                    x[c * dim * dim + y * dim + xx] = f32::from(px[c]) / 255.0 - 0.5;
                }
            }
        }

        let mut recorded = Vec::with_capacity(self.recorded_units());
        for (li, conv) in self.spec.conv.iter().enumerate() {
            let k = conv.kernel;
            let out_dim = dim - k + 1;
            let plane = dim * dim;
            let out_plane = out_dim * out_dim;
            let mut out = vec![0.0f32; conv.out_channels * out_plane];
            let weights = &self.conv_weights[li];
            for oc in 0..conv.out_channels {
                let w_oc = &weights[oc * channels * k * k..(oc + 1) * channels * k * k];
                let bias = self.conv_bias[li][oc];
                for oy in 0..out_dim {
                    for ox in 0..out_dim {
                        let mut acc = bias;
                        for ic in 0..channels {
                            let w_ic = &w_oc[ic * k * k..(ic + 1) * k * k];
                            let base = ic * plane + oy * dim + ox;
                            for ky in 0..k {
                                let row = &x[base + ky * dim..base + ky * dim + k];
                                let w_row = &w_ic[ky * k..ky * k + k];
                                for kx in 0..k {
                                    acc += row[kx] * w_row[kx];
                                }
                            }
                        }
                        out[oc * out_plane + oy * out_dim + ox] = acc.max(0.0);
                    }
                }
            }
            recorded.extend(spatial_max_pool(conv.out_channels, out_dim, out_dim, &out)?);

            if conv.pool > 1 {
                let p = conv.pool;
                let pooled_dim = out_dim / p;
                let pooled_plane = pooled_dim * pooled_dim;
                let mut pooled = vec![0.0f32; conv.out_channels * pooled_plane];
                for oc in 0..conv.out_channels {
                    for py in 0..pooled_dim {
                        for px_ in 0..pooled_dim {
                            let mut best = f32::NEG_INFINITY;
                            for wy in 0..p {
                                for wx in 0..p {
                                    best = best.max(
                                        out[oc * out_plane
                                            + (py * p + wy) * out_dim
                                            + px_ * p
                                            + wx],
                                    );
                                }
                            }
                            pooled[oc * pooled_plane + py * pooled_dim + px_] = best;
                        }
                    }
                }
                x = pooled;
                dim = pooled_dim;
            } else {
                x = out;
                dim = out_dim;
            }
            channels = conv.out_channels;
        }

        let mut vec_in = x;
        for (li, fc) in self.spec.fc.iter().enumerate() {
            let in_dim = vec_in.len();
            let weights = &self.fc_weights[li];
            let mut out = vec![0.0f32; fc.units];
            for u in 0..fc.units {
                let row = &weights[u * in_dim..(u + 1) * in_dim];
                let mut acc = self.fc_bias[li][u];
                for j in 0..in_dim {
                    acc += row[j] * vec_in[j];
                }
                out[u] = acc.max(0.0);
            }
            recorded.extend_from_slice(&out);
            vec_in = out;
        }
        Ok(recorded)
    }
}

impl ActivationProvider for RefNet {
    fn input_side(&self) -> usize {
        self.spec.input_side
    }

    fn unit_count(&self) -> usize {
        self.recorded_units()
    }

    fn forward(&self, image: &RgbImage) -> Result<Vec<f32>> {
        self.activations(image)
    }
}

/// Visual pattern a planted word draws when rendered.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatternKind {
    ColorPatch {
        rgb: [u8; 3],
    },
    Stripes {
        rgb_a: [u8; 3],
        rgb_b: [u8; 3],
        period: usize,
    },
    /// A "planted" word with no visual counterpart; behaves as a distractor.
    None,
}

/// One word with a visual pattern. `presence_prob` is how often the word is
/// attached; `render_prob` is how often an attached word actually draws its
/// pattern, which caps the achievable held-out balanced accuracy at
/// `(1 + render_prob) / 2` and thereby fixes the word's true visualness.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedWordSpec {
    pub word: String,
    pub pattern: PatternKind,
    pub region: Rect,
    pub render_prob: f64,
    pub presence_prob: f64,
}

/// A word with no visual counterpart, attached at random.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistractorSpec {
    pub word: String,
    pub attach_prob: f64,
}

/// Full recipe for a synthetic corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticCorpusSpec {
    pub n_images: usize,
    pub image_side: usize,
    /// Probability of inverting a planted word's label on train and
    /// validation records. Test labels stay clean.
    pub label_flip_rate: f64,
    pub seed: u64,
    pub planted: Vec<PlantedWordSpec>,
    pub distractors: Vec<DistractorSpec>,
}

impl SyntheticCorpusSpec {
    /// The standard benchmark corpus: five planted words with graded
    /// reliability (visualness ceilings 1.0 down to 0.88) in disjoint
    /// regions, five distractors, 20% label noise.
    pub fn default_acceptance() -> SyntheticCorpusSpec {
        let patch = |word: &str, rgb: [u8; 3], region: Rect, render_prob: f64| PlantedWordSpec {
            word: word.into(),
            pattern: PatternKind::ColorPatch { rgb },
            region,
            render_prob,
            presence_prob: 0.5,
        };
        SyntheticCorpusSpec {
            n_images: 2000,
            image_side: 64,
            label_flip_rate: 0.2,
            seed: 42,
            planted: vec![
                patch("red", [229, 30, 30], Rect::new(20, 20, 44, 44), 1.0),
                patch("blue", [30, 60, 229], Rect::new(2, 2, 20, 20), 0.94),
                patch("green", [30, 190, 40], Rect::new(44, 2, 62, 20), 0.88),
                patch("yellow", [235, 220, 40], Rect::new(2, 44, 20, 62), 0.82),
                PlantedWordSpec {
                    word: "striped".into(),
                    pattern: PatternKind::Stripes {
                        rgb_a: [235, 235, 235],
                        rgb_b: [20, 20, 20],
                        period: 5,
                    },
                    region: Rect::new(44, 44, 62, 62),
                    render_prob: 0.76,
                    presence_prob: 0.5,
                },
            ],
            distractors: ["classic", "gift", "handmade", "new", "popular"]
                .iter()
                .map(|&word| DistractorSpec {
                    word: word.into(),
                    attach_prob: 0.5,
                })
                .collect(),
        }
    }

    /// A reduced corpus for fast end-to-end runs: two planted words, two
    /// distractors, 240 images.
    pub fn small() -> SyntheticCorpusSpec {
        let mut spec = SyntheticCorpusSpec::default_acceptance();
        spec.n_images = 240;
        spec.planted.truncate(2);
        spec.distractors.truncate(2);
        spec
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("spec serializes")
    }

    pub fn from_toml_str(text: &str) -> Result<SyntheticCorpusSpec> {
        toml::from_str(text).map_err(|e| Error::Config(format!("synthetic corpus spec: {e}")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::util::atomic_write(path, self.to_toml_string().as_bytes())
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<SyntheticCorpusSpec> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        SyntheticCorpusSpec::from_toml_str(&text)
    }

    fn validate(&self, net: &RefNet) -> Result<()> {
        if self.n_images < 8 {
            return Err(Error::Config(format!(
                "need at least 8 images for meaningful splits, got {}",
                self.n_images
            )));
        }
        if self.image_side != net.input_side() {
            return Err(Error::Config(format!(
                "corpus side {} does not match the net input side {}",
                self.image_side,
                net.input_side()
            )));
        }
        if !(0.0..=1.0).contains(&self.label_flip_rate) {
            return Err(Error::Config(format!(
                "label flip rate {} outside [0, 1]",
                self.label_flip_rate
            )));
        }
        let mut words = std::collections::HashSet::new();
        for planted in &self.planted {
            if !words.insert(planted.word.as_str()) {
                return Err(Error::Config(format!(
                    "word {:?} defined twice",
                    planted.word
                )));
            }
            planted.region.validate_within(self.image_side)?;
            for (name, p) in [
                ("render_prob", planted.render_prob),
                ("presence_prob", planted.presence_prob),
            ] {
                if !(0.0..=1.0).contains(&p) {
                    return Err(Error::Config(format!(
                        "{name} {p} of {:?} outside [0, 1]",
                        planted.word
                    )));
                }
            }
            if let PatternKind::Stripes { period, .. } = planted.pattern {
                if period == 0 || period > self.image_side {
                    return Err(Error::Config(format!(
                        "stripe period {period} of {:?} does not fit the canvas",
                        planted.word
                    )));
                }
            }
        }
        for distractor in &self.distractors {
            if !words.insert(distractor.word.as_str()) {
                return Err(Error::Config(format!(
                    "word {:?} defined twice",
                    distractor.word
                )));
            }
            if !(0.0..=1.0).contains(&distractor.attach_prob) {
                return Err(Error::Config(format!(
                    "attach_prob {} of {:?} outside [0, 1]",
                    distractor.attach_prob, distractor.word
                )));
            }
        }
        if self.planted.is_empty() {
            return Err(Error::Config("need at least one planted word".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum WordKind {
    Planted,
    Distractor,
}

/// Ground truth about one vocabulary word.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WordTruth {
    pub word: String,
    pub kind: WordKind,
    pub region: Option<Rect>,
    pub render_prob: f64,
    /// The held-out balanced accuracy an ideal detector can reach:
    /// `(1 + render_prob) / 2` for visual words, 0.5 otherwise.
    pub true_visualness: f64,
}

/// Ground truth about one record's words.
#[derive(Debug, Clone, PartialEq)]
pub struct RecordTruth {
    pub id: String,
    pub split: Split,
    /// Planted words whose pattern was actually drawn.
    pub rendered: BTreeMap<String, bool>,
    /// The weak label each word carries in the manifest (post flip).
    pub labeled: BTreeMap<String, bool>,
    /// Planted words whose label was inverted. Always false on test records.
    pub flipped: BTreeMap<String, bool>,
}

/// A generated corpus held in memory.
#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub spec: SyntheticCorpusSpec,
    pub net_spec: RefNetSpec,
    pub manifest: CorpusManifest,
    /// Images aligned with the manifest records.
    pub images: Vec<RgbImage>,
    pub matrix: ActivationMatrix,
    pub word_truth: Vec<WordTruth>,
    pub record_truth: Vec<RecordTruth>,
}

fn clamp_channel(base: i32, jitter: i32) -> u8 {
    (base + jitter).clamp(0, 255) as u8
}

/// Generates images, weak labels, ground truth, and activations. Every
/// record is derived from its own seeded stream, so the corpus is identical
/// across runs and thread counts.
pub fn generate_corpus(spec: &SyntheticCorpusSpec, net: &RefNet) -> Result<SyntheticCorpus> {
    spec.validate(net)?;
    let splits = assign_splits(spec.n_images, spec.seed);

    struct Generated {
        record: ImageRecord,
        truth: RecordTruth,
        image: RgbImage,
    }

    let generated: Vec<Generated> = (0..spec.n_images)
        .into_par_iter()
        .map(|i| {
            let id = format!("img{i:05}");
            let split = splits[i];
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &format!("image/{id}")));

            // Coins first, in a fixed order, then pixels.
            let mut presence = Vec::with_capacity(spec.planted.len());
            let mut rendered_flags = Vec::with_capacity(spec.planted.len());
            for planted in &spec.planted {
                let present = rng.random_bool(planted.presence_prob);
                let rendered = present
                    && planted.pattern != PatternKind::None
                    && rng.random_bool(planted.render_prob);
                presence.push(present);
                rendered_flags.push(rendered);
            }
            let attached: Vec<bool> = spec
                .distractors
                .iter()
                .map(|d| rng.random_bool(d.attach_prob))
                .collect();
            let flips: Vec<bool> = spec
                .planted
                .iter()
                .map(|_| rng.random_bool(spec.label_flip_rate) && split != Split::Test)
                .collect();

            let side = spec.image_side;
            let base_gray = rng.random_range(100..=160i32);
            let mut data = Vec::with_capacity(side * side * 3);
            for _ in 0..side * side {
                for _ in 0..3 {
                    data.push(clamp_channel(base_gray, rng.random_range(-12..=12)));
                }
            }
            let mut image = RgbImage::new(side, data).expect("sized buffer");

            for (planted, &rendered) in spec.planted.iter().zip(&rendered_flags) {
                if !rendered {
                    continue;
                }
                let region = planted.region;
                match &planted.pattern {
                    PatternKind::ColorPatch { rgb } => {
                        for y in region.y0..region.y1 {
                            for x in region.x0..region.x1 {
                                let px = [
                                    clamp_channel(i32::from(rgb[0]), rng.random_range(-14..=14)),
                                    clamp_channel(i32::from(rgb[1]), rng.random_range(-14..=14)),
                                    clamp_channel(i32::from(rgb[2]), rng.random_range(-14..=14)),
                                ];
                                image.set_pixel(x, y, px);
                            }
                        }
                    }
                    PatternKind::Stripes {
                        rgb_a,
                        rgb_b,
                        period,
                    } => {
                        for y in region.y0..region.y1 {
                            let band = ((y - region.y0) / period) % 2;
                            let rgb = if band == 0 { rgb_a } else { rgb_b };
                            for x in region.x0..region.x1 {
                                let px = [
                                    clamp_channel(i32::from(rgb[0]), rng.random_range(-14..=14)),
                                    clamp_channel(i32::from(rgb[1]), rng.random_range(-14..=14)),
                                    clamp_channel(i32::from(rgb[2]), rng.random_range(-14..=14)),
                                ];
                                image.set_pixel(x, y, px);
                            }
                        }
                    }
                    PatternKind::None => unreachable!("never rendered"),
                }
            }

            let mut rendered = BTreeMap::new();
            let mut labeled = BTreeMap::new();
            let mut flipped = BTreeMap::new();
            let mut candidate_words = Vec::new();
            for (k, planted) in spec.planted.iter().enumerate() {
                let label = presence[k] != flips[k];
                rendered.insert(planted.word.clone(), rendered_flags[k]);
                labeled.insert(planted.word.clone(), label);
                flipped.insert(planted.word.clone(), flips[k]);
                if label {
                    candidate_words.push(planted.word.clone());
                }
            }
            for (k, distractor) in spec.distractors.iter().enumerate() {
                labeled.insert(distractor.word.clone(), attached[k]);
                if attached[k] {
                    candidate_words.push(distractor.word.clone());
                }
            }

            let record = ImageRecord {
                id: id.clone(),
                shop_id: None,
                title_tokens: {
                    let mut t = candidate_words.clone();
                    t.push("item".into());
                    t
                },
                description_tokens: vec!["synthetic".into(), "listing".into()],
                candidate_words,
                category: None,
                image_path: Some(format!("images/{id}.ppm").into()),
                split,
            };
            Generated {
                record,
                truth: RecordTruth {
                    id,
                    split,
                    rendered,
                    labeled,
                    flipped,
                },
                image,
            }
        })
        .collect();

    let mut values = Vec::with_capacity(spec.n_images * net.recorded_units());
    let rows: Vec<Vec<f32>> = generated
        .par_iter()
        .map(|g| net.activations(&g.image))
        .collect::<Result<_>>()?;
    for row in &rows {
        values.extend_from_slice(row);
    }

    let mut records = Vec::with_capacity(spec.n_images);
    let mut images = Vec::with_capacity(spec.n_images);
    let mut record_truth = Vec::with_capacity(spec.n_images);
    let mut ids = Vec::with_capacity(spec.n_images);
    for g in generated {
        ids.push(g.record.id.clone());
        records.push(g.record);
        images.push(g.image);
        record_truth.push(g.truth);
    }

    let word_truth = spec
        .planted
        .iter()
        .map(|p| WordTruth {
            word: p.word.clone(),
            kind: WordKind::Planted,
            region: Some(p.region),
            render_prob: p.render_prob,
            true_visualness: if p.pattern == PatternKind::None {
                0.5
            } else {
                (1.0 + p.render_prob) / 2.0
            },
        })
        .chain(spec.distractors.iter().map(|d| WordTruth {
            word: d.word.clone(),
            kind: WordKind::Distractor,
            region: None,
            render_prob: 0.0,
            true_visualness: 0.5,
        }))
        .collect();

    Ok(SyntheticCorpus {
        spec: spec.clone(),
        net_spec: net.spec().clone(),
        manifest: CorpusManifest::from_records(records)?,
        images,
        matrix: ActivationMatrix::new(ids, net.schema().to_vec(), values)?,
        word_truth,
        record_truth,
    })
}

/// Writes a generated corpus to `dir`: `manifest.jsonl`, `images/*.ppm`,
/// `activations.actv`, the two spec TOMLs, and the ground truth tables.
pub fn write_corpus(corpus: &SyntheticCorpus, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir.join("images")).map_err(|e| Error::io(dir, e))?;
    corpus.manifest.write(&dir.join("manifest.jsonl"))?;
    corpus.matrix.write(&dir.join("activations.actv"))?;
    corpus.spec.save(&dir.join("synth_spec.toml"))?;
    corpus.net_spec.save(&dir.join("refnet.toml"))?;
    for (record, image) in corpus.manifest.records().iter().zip(&corpus.images) {
        image.write_ppm(&dir.join(format!("images/{}.ppm", record.id)))?;
    }

    let mut words = String::from("word,kind,region,render_prob,true_visualness\n");
    for truth in &corpus.word_truth {
        let kind = match truth.kind {
            WordKind::Planted => "planted",
            WordKind::Distractor => "distractor",
        };
        let region = truth
            .region
            .map(|r| format!("{};{};{};{}", r.x0, r.y0, r.x1, r.y1))
            .unwrap_or_default();
        words.push_str(&format!(
            "{},{kind},{region},{:.6},{:.6}\n",
            truth.word, truth.render_prob, truth.true_visualness
        ));
    }
    crate::util::atomic_write(&dir.join("truth_words.csv"), words.as_bytes())
        .map_err(|e| Error::io(dir, e))?;

    let mut rows = String::from("id,split,word,rendered,labeled,flipped\n");
    for truth in &corpus.record_truth {
        for (word, &labeled) in &truth.labeled {
            let rendered = truth.rendered.get(word).copied().unwrap_or(false);
            let flipped = truth.flipped.get(word).copied().unwrap_or(false);
            rows.push_str(&format!(
                "{},{},{word},{},{},{}\n",
                truth.id,
                truth.split,
                u8::from(rendered),
                u8::from(labeled),
                u8::from(flipped)
            ));
        }
    }
    crate::util::atomic_write(&dir.join("truth_records.csv"), rows.as_bytes())
        .map_err(|e| Error::io(dir, e))
}

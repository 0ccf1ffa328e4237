//! Stage orchestration: runs the discovery pipeline over a corpus directory
//! and writes every artifact with a config fingerprint header.
//!
//! Stages communicate through files so each can also run standalone from
//! the command line. All text artifacts except JSONL manifests start with
//! `# attrscope config=<hash> seed=<seed>`; the hash fingerprints the
//! canonical TOML serialization of [`PipelineConfig`], so artifacts from
//! different configurations are never mistaken for each other. The
//! fingerprint identifies, it does not authenticate.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::actstore::ActivationMatrix;
use crate::classify::{
    rank_and_resample, train_full, train_initial, visualness, LinearModel, ResampleOutcome, Stage,
    VisualnessReport,
};
use crate::corpus::{
    build_vocabulary, dedup_manifest, default_stop_words, partition, CorpusManifest,
    DuplicateClustering, MergeMap, Split, VocabEntry,
};
use crate::divergence::{
    average_layer_magnitude, divergence_profile, layer_profile, salient_words, select_prime_units,
    LayerDivergenceProfile, PrimeUnitSet, UnitDivergence,
};
use crate::error::{Error, Result};
use crate::image::{mean_image, RgbImage};
use crate::perception::{correlation_report, human_visualness_all, load_votes};
use crate::refnet::{
    generate_corpus, write_corpus, PatternKind, RefNet, RefNetSpec, SyntheticCorpus,
    SyntheticCorpusSpec,
};
use crate::saliency::{
    accumulate, bilinear_upsample, build_ground_truth, evaluate_saliency, load_annotations,
    occlusion_responses, otsu_threshold, unit_response_maps, write_pgm, ActivationProvider,
    GroundTruthMask, OccluderFill, OcclusionConfig, SaliencyMap,
};
use crate::util::{atomic_write, derive_seed, fnv1a64};

/// All pipeline tunables. Serialized canonically to TOML; the FNV-1a hash
/// of that serialization stamps every report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub seed: u64,
    /// Histogram bins per unit for the divergence score.
    pub bins: usize,
    /// Units kept as classifier features in stage one.
    pub prime_k: usize,
    /// Fraction of each class retained by confidence resampling.
    pub resample_fraction: f64,
    pub l2: f64,
    /// Vote threshold for human visualness (strictly more than theta).
    pub theta: u32,
    pub top_vocab: usize,
    pub dedup_threshold: f64,
    pub occluder_sizes: Vec<usize>,
    pub occluder_stride: usize,
    /// Accumulation depths; one saliency map per depth.
    pub accumulate_k: Vec<usize>,
    /// Words to map; empty means every word with ranked units.
    pub saliency_words: Vec<String>,
    /// Held-out positives mapped per word.
    pub saliency_images: usize,
    /// Distinct annotators that must cover a pixel for ground truth.
    pub min_votes: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 42,
            bins: crate::divergence::DEFAULT_BINS,
            prime_k: crate::divergence::DEFAULT_PRIME_K,
            resample_fraction: crate::classify::DEFAULT_RESAMPLE_FRACTION,
            l2: crate::classify::DEFAULT_L2,
            theta: crate::perception::DEFAULT_THETA,
            top_vocab: crate::corpus::DEFAULT_TOP_VOCAB,
            dedup_threshold: crate::corpus::DEFAULT_DEDUP_THRESHOLD,
            occluder_sizes: vec![24, 48, 96],
            occluder_stride: 4,
            accumulate_k: vec![1, 8, 64],
            saliency_words: Vec::new(),
            saliency_images: 10,
            min_votes: 2,
        }
    }
}

impl PipelineConfig {
    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn from_toml_str(text: &str) -> Result<PipelineConfig> {
        toml::from_str(text).map_err(|e| Error::Config(format!("pipeline config: {e}")))
    }

    pub fn load(path: &Path) -> Result<PipelineConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        PipelineConfig::from_toml_str(&text)
    }

    /// Identity stamp of this configuration.
    pub fn fingerprint(&self) -> u64 {
        fnv1a64(self.to_toml_string().as_bytes())
    }

    fn header(&self) -> String {
        format!(
            "# attrscope config={:016x} seed={}\n",
            self.fingerprint(),
            self.seed
        )
    }
}

/// Writes text reports under one output directory, prefixed with the config
/// header.
pub struct Reports<'a> {
    dir: &'a Path,
    header: String,
}

impl<'a> Reports<'a> {
    pub fn new(dir: &'a Path, config: &PipelineConfig) -> Reports<'a> {
        Reports {
            dir,
            header: config.header(),
        }
    }

    pub fn dir(&self) -> &Path {
        self.dir
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    pub fn write(&self, rel: &str, body: &str) -> Result<PathBuf> {
        let path = self.path(rel);
        let mut text = self.header.clone();
        text.push_str(body);
        atomic_write(&path, text.as_bytes()).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

/// Strips the config header and comment lines from a report body.
fn report_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
}

/// Builds the global thread pool with `jobs` workers (0 keeps the default).
/// Calling it twice is harmless.
pub fn init_thread_pool(jobs: usize) -> Result<()> {
    if jobs == 0 {
        return Ok(());
    }
    match rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build_global()
    {
        Ok(()) => Ok(()),
        // Already built: keep the existing pool.
        Err(_) => Ok(()),
    }
}

/// Removes near-duplicate listings per shop and writes the deduplicated
/// manifest plus the cluster table.
pub fn stage_dedup(
    config: &PipelineConfig,
    manifest: &CorpusManifest,
    out_dir: &Path,
) -> Result<(CorpusManifest, Vec<DuplicateClustering>)> {
    let reports = Reports::new(out_dir, config);
    let stop = default_stop_words();
    let (deduped, clusterings) =
        dedup_manifest(manifest, &stop, config.dedup_threshold, config.seed)?;
    deduped.write(&reports.path("manifest.dedup.jsonl"))?;

    let mut csv = String::from("shop_id,cluster_index,image_id,representative\n");
    for clustering in &clusterings {
        for (index, cluster) in clustering.clusters.iter().enumerate() {
            for id in cluster {
                let _ = writeln!(
                    csv,
                    "{},{},{},{}",
                    clustering.shop_id,
                    index,
                    id,
                    u8::from(clustering.representatives[index] == *id)
                );
            }
        }
    }
    reports.write("dedup_clusters.csv", &csv)?;
    Ok((deduped, clusterings))
}

/// Ranks candidate words by document frequency, optionally after folding
/// variants together, and writes the vocabulary table. Returns the manifest
/// the downstream stages should use (merged when a map was given).
pub fn stage_vocabulary(
    config: &PipelineConfig,
    manifest: &CorpusManifest,
    merge: Option<&MergeMap>,
    out_dir: &Path,
) -> Result<(CorpusManifest, Vec<VocabEntry>)> {
    let reports = Reports::new(out_dir, config);
    let working = match merge {
        Some(map) if !map.is_empty() => {
            let merged = manifest.apply_merge(map);
            merged.write(&reports.path("manifest.merged.jsonl"))?;
            merged
        }
        _ => manifest.clone(),
    };
    let vocab = build_vocabulary(&working, config.top_vocab, None)?;
    let mut csv = String::from("word,frequency,rank\n");
    for entry in &vocab {
        let _ = writeln!(csv, "{},{},{}", entry.word, entry.frequency, entry.rank);
    }
    reports.write("vocabulary.csv", &csv)?;
    Ok((working, vocab))
}

/// Reads `vocabulary.csv` back in rank order.
pub fn read_vocabulary(path: &Path) -> Result<Vec<VocabEntry>> {
    if !path.exists() {
        return Err(Error::MissingStageInput {
            path: path.to_path_buf(),
            remedy: "run the vocab stage into this output directory first".into(),
        });
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut entries = Vec::new();
    for (line_no, line) in report_lines(&text) {
        if line == "word,frequency,rank" {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 3 {
            return Err(Error::TableParse {
                path: path.to_path_buf(),
                line: line_no,
                message: format!("expected 3 fields, got {}", fields.len()),
            });
        }
        let parse_err = |what: &str| Error::TableParse {
            path: path.to_path_buf(),
            line: line_no,
            message: format!("bad {what}"),
        };
        entries.push(VocabEntry {
            word: fields[0].to_string(),
            frequency: fields[1].parse().map_err(|_| parse_err("frequency"))?,
            rank: fields[2].parse().map_err(|_| parse_err("rank"))?,
        });
    }
    entries.sort_by_key(|e| e.rank);
    Ok(entries)
}

/// Train and test partitions of one word.
#[derive(Debug, Clone)]
pub struct WordPartitions {
    pub word: String,
    pub train: crate::corpus::DatasetPartition,
    pub test: crate::corpus::DatasetPartition,
}

impl WordPartitions {
    /// True when both splits carry both classes.
    pub fn two_class(&self) -> bool {
        !self.train.positive_ids.is_empty()
            && !self.train.negative_ids.is_empty()
            && !self.test.positive_ids.is_empty()
            && !self.test.negative_ids.is_empty()
    }
}

/// Partitions every word on the train and test splits and writes the
/// assignment table.
pub fn stage_partitions(
    config: &PipelineConfig,
    manifest: &CorpusManifest,
    words: &[String],
    out_dir: &Path,
) -> Result<Vec<WordPartitions>> {
    let reports = Reports::new(out_dir, config);
    let mut partitions = Vec::with_capacity(words.len());
    let mut csv = String::from("word,split,role,image_id\n");
    for word in words {
        let train = partition(manifest, word, Split::Train)?;
        let test = partition(manifest, word, Split::Test)?;
        for (part, split) in [(&train, "train"), (&test, "test")] {
            for (ids, role) in [
                (&part.positive_ids, "positive"),
                (&part.negative_ids, "negative"),
            ] {
                for id in ids {
                    let _ = writeln!(csv, "{word},{split},{role},{id}");
                }
            }
        }
        partitions.push(WordPartitions {
            word: word.clone(),
            train,
            test,
        });
    }
    reports.write("partitions.csv", &csv)?;
    Ok(partitions)
}

/// Per-word divergence profiles and ranked unit sets.
#[derive(Debug, Clone)]
pub struct DivergenceOutput {
    /// `(word, per-unit scores in flat order)`.
    pub profiles: Vec<(String, Vec<UnitDivergence>)>,
    pub prime: Vec<PrimeUnitSet>,
}

/// Scores every unit per word on the train split and writes the unit tables
/// plus the ranked prime unit list.
pub fn stage_divergence(
    config: &PipelineConfig,
    matrix: &ActivationMatrix,
    partitions: &[WordPartitions],
    out_dir: &Path,
) -> Result<DivergenceOutput> {
    let reports = Reports::new(out_dir, config);
    let mut profiles = Vec::with_capacity(partitions.len());
    let mut prime = Vec::with_capacity(partitions.len());
    let mut prime_csv = String::from("word,rank,flat_index,layer,unit,score\n");
    for wp in partitions {
        let profile = divergence_profile(matrix, &wp.train, config.bins)?;
        let mut unit_csv = String::from("flat_index,layer,unit,score\n");
        for ud in &profile {
            let _ = writeln!(
                unit_csv,
                "{},{},{},{}",
                ud.unit.flat_index,
                matrix.layers()[ud.unit.layer_index].name,
                ud.unit.unit_index,
                ud.score
            );
        }
        reports.write(&format!("divergence/units_{}.csv", wp.word), &unit_csv)?;

        let set = select_prime_units(&wp.word, &profile, config.prime_k)?;
        for (rank, (unit, score)) in set.units.iter().zip(&set.scores).enumerate() {
            let _ = writeln!(
                prime_csv,
                "{},{},{},{},{},{}",
                wp.word,
                rank + 1,
                unit.flat_index,
                matrix.layers()[unit.layer_index].name,
                unit.unit_index,
                score
            );
        }
        profiles.push((wp.word.clone(), profile));
        prime.push(set);
    }
    reports.write("prime_units.csv", &prime_csv)?;
    Ok(DivergenceOutput { profiles, prime })
}

/// Collapses divergence profiles into layer depth reports: per-word layer
/// shares, corpus-level layer magnitudes, and per-layer word rankings.
pub fn stage_layers(
    config: &PipelineConfig,
    matrix: &ActivationMatrix,
    divergence: &DivergenceOutput,
    out_dir: &Path,
) -> Result<Vec<LayerDivergenceProfile>> {
    let reports = Reports::new(out_dir, config);
    let layers = matrix.layers();

    let mut layer_profiles = Vec::with_capacity(divergence.profiles.len());
    let mut profile_csv = String::from("word,layer,max_divergence,share\n");
    for (word, profile) in &divergence.profiles {
        let lp = layer_profile(word, profile, layers)?;
        for (li, layer) in layers.iter().enumerate() {
            let _ = writeln!(
                profile_csv,
                "{},{},{},{:.6}",
                word, layer.name, lp.per_layer_max[li], lp.normalized[li]
            );
        }
        layer_profiles.push(lp);
    }
    reports.write("layer_profiles.csv", &profile_csv)?;

    let refs: Vec<&[UnitDivergence]> = divergence
        .profiles
        .iter()
        .map(|(_, p)| p.as_slice())
        .collect();
    let magnitude = average_layer_magnitude(&refs, layers)?;
    let mut magnitude_csv = String::from("layer,sum_variant,max_variant\n");
    for (li, layer) in magnitude.layers.iter().enumerate() {
        let _ = writeln!(
            magnitude_csv,
            "{},{:.6},{:.6}",
            layer, magnitude.sum_variant[li], magnitude.max_variant[li]
        );
    }
    reports.write("layer_magnitude.csv", &magnitude_csv)?;

    let mut ranking_csv = String::from("layer,rank,word,share\n");
    let mut ranking_txt = String::new();
    for (li, layer) in layers.iter().enumerate() {
        let table = salient_words(&layer_profiles, layers, li)?;
        for (rank, (word, share)) in table.ranked_words.iter().zip(&table.shares).enumerate() {
            let _ = writeln!(
                ranking_csv,
                "{},{},{},{:.6}",
                layer.name,
                rank + 1,
                word,
                share
            );
        }
        let top: Vec<String> = table
            .ranked_words
            .iter()
            .zip(&table.shares)
            .take(5)
            .map(|(w, s)| format!("{w} ({s:.3})"))
            .collect();
        let _ = writeln!(ranking_txt, "{}: {}", layer.name, top.join(", "));
    }
    reports.write("salient_words.csv", &ranking_csv)?;
    reports.write("salient_words.txt", &ranking_txt)?;
    Ok(layer_profiles)
}

/// Everything the two-stage classifier produced for one word.
#[derive(Debug, Clone)]
pub struct WordModels {
    pub word: String,
    pub initial: LinearModel,
    pub full: LinearModel,
    pub resample: ResampleOutcome,
    pub reports: Vec<VisualnessReport>,
}

/// Trains the two-stage classifier per word and writes visualness scores,
/// models, and resampled pools. Words with a single-class partition are
/// skipped and listed in `visualness_skipped.csv`.
pub fn stage_visualness(
    config: &PipelineConfig,
    matrix: &ActivationMatrix,
    partitions: &[WordPartitions],
    prime: &[PrimeUnitSet],
    out_dir: &Path,
) -> Result<Vec<WordModels>> {
    let reports = Reports::new(out_dir, config);
    let prime_by_word: BTreeMap<&str, &PrimeUnitSet> =
        prime.iter().map(|p| (p.word.as_str(), p)).collect();

    let mut models = Vec::new();
    let mut skipped = String::from("word,reason\n");
    let mut visualness_csv = String::from("word,stage,visualness,n_pos,n_neg,seed\n");

    for wp in partitions {
        if !wp.two_class() {
            let _ = writeln!(skipped, "{},single class in train or test split", wp.word);
            continue;
        }
        let set = prime_by_word
            .get(wp.word.as_str())
            .ok_or_else(|| Error::MissingStageInput {
                path: reports.path("prime_units.csv"),
                remedy: format!(
                    "no ranked units for {:?}; run the divergence stage over the same word list",
                    wp.word
                ),
            })?;
        let train_ids: HashSet<String> = wp
            .train
            .positive_ids
            .iter()
            .chain(wp.train.negative_ids.iter())
            .cloned()
            .collect();

        let initial = train_initial(
            matrix,
            &wp.train,
            set,
            config.l2,
            derive_seed(config.seed, &format!("train-initial/{}", wp.word)),
        )?;
        let initial_report = visualness(
            &initial,
            matrix,
            &wp.test,
            Stage::Initial,
            derive_seed(config.seed, &format!("visualness/initial/{}", wp.word)),
            &train_ids,
        )?;
        let resample = rank_and_resample(&initial, matrix, &wp.train, config.resample_fraction)?;
        let full = train_full(
            matrix,
            &resample.positive_ids(),
            &resample.negative_ids(),
            config.l2,
            derive_seed(config.seed, &format!("train-full/{}", wp.word)),
        )?;
        let full_report = visualness(
            &full,
            matrix,
            &wp.test,
            Stage::Resampled,
            derive_seed(config.seed, &format!("visualness/resampled/{}", wp.word)),
            &train_ids,
        )?;

        initial.write(&reports.path(&format!("models/{}.initial.alrm", wp.word)))?;
        full.write(&reports.path(&format!("models/{}.full.alrm", wp.word)))?;

        let mut pool_csv = String::from("image_id,confidence,weak_positive,role\n");
        for (samples, role) in [
            (&resample.positives, "positive"),
            (&resample.negatives, "negative"),
        ] {
            for s in samples {
                let _ = writeln!(
                    pool_csv,
                    "{},{:.6},{},{role}",
                    s.image_id,
                    s.confidence,
                    u8::from(s.weak_positive)
                );
            }
        }
        reports.write(&format!("resample/{}.csv", wp.word), &pool_csv)?;

        for report in [&initial_report, &full_report] {
            let _ = writeln!(
                visualness_csv,
                "{},{},{:.6},{},{},{}",
                report.word,
                report.stage.as_str(),
                report.visualness,
                report.n_pos,
                report.n_neg,
                report.seed
            );
        }
        models.push(WordModels {
            word: wp.word.clone(),
            initial,
            full,
            resample,
            reports: vec![initial_report, full_report],
        });
    }
    reports.write("visualness.csv", &visualness_csv)?;
    reports.write("visualness_skipped.csv", &skipped)?;
    Ok(models)
}

/// One row of `prime_units.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct PrimeUnitRow {
    pub word: String,
    pub rank: usize,
    pub flat_index: usize,
    pub layer: String,
    pub unit: usize,
    pub score: f64,
}

/// Reads `prime_units.csv` back. Missing file maps to a stage-order error.
pub fn read_prime_units(path: &Path) -> Result<Vec<PrimeUnitRow>> {
    if !path.exists() {
        return Err(Error::MissingStageInput {
            path: path.to_path_buf(),
            remedy: "run the divergence stage into this output directory first".into(),
        });
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for (line_no, line) in report_lines(&text) {
        if line == "word,rank,flat_index,layer,unit,score" {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 6 {
            return Err(Error::TableParse {
                path: path.to_path_buf(),
                line: line_no,
                message: format!("expected 6 fields, got {}", fields.len()),
            });
        }
        let parse_err = |what: &str| Error::TableParse {
            path: path.to_path_buf(),
            line: line_no,
            message: format!("bad {what}"),
        };
        rows.push(PrimeUnitRow {
            word: fields[0].to_string(),
            rank: fields[1].parse().map_err(|_| parse_err("rank"))?,
            flat_index: fields[2].parse().map_err(|_| parse_err("flat_index"))?,
            layer: fields[3].to_string(),
            unit: fields[4].parse().map_err(|_| parse_err("unit"))?,
            score: fields[5].parse().map_err(|_| parse_err("score"))?,
        });
    }
    Ok(rows)
}

/// Groups prime unit rows per word into `(flat indices, scores)` sorted by
/// rank.
pub fn ranked_units_by_word(rows: &[PrimeUnitRow]) -> BTreeMap<String, (Vec<usize>, Vec<f64>)> {
    let mut grouped: BTreeMap<String, Vec<&PrimeUnitRow>> = BTreeMap::new();
    for row in rows {
        grouped.entry(row.word.clone()).or_default().push(row);
    }
    grouped
        .into_iter()
        .map(|(word, mut rows)| {
            rows.sort_by_key(|r| r.rank);
            let flats = rows.iter().map(|r| r.flat_index).collect();
            let scores = rows.iter().map(|r| r.score).collect();
            (word, (flats, scores))
        })
        .collect()
}

/// Rebuilds full [`PrimeUnitSet`]s from prime unit rows, resolving flat
/// indices against the matrix schema. Words keep their first-occurrence
/// order from the table so downstream stages see the same sequence the
/// divergence stage produced.
pub fn prime_sets_from_rows(
    rows: &[PrimeUnitRow],
    matrix: &ActivationMatrix,
) -> Result<Vec<PrimeUnitSet>> {
    let mut order: Vec<&str> = Vec::new();
    for row in rows {
        if !order.contains(&row.word.as_str()) {
            order.push(&row.word);
        }
    }
    let ranked = ranked_units_by_word(rows);
    let mut sets = Vec::with_capacity(order.len());
    for word in order {
        let (flats, scores) = &ranked[word];
        let units = flats
            .iter()
            .map(|&flat| matrix.address_of(flat))
            .collect::<Result<Vec<_>>>()?;
        sets.push(PrimeUnitSet {
            word: word.to_string(),
            units,
            scores: scores.clone(),
        });
    }
    Ok(sets)
}

/// Reads one `divergence/units_<word>.csv` table back into flat unit order.
pub fn read_unit_divergences(
    path: &Path,
    matrix: &ActivationMatrix,
) -> Result<Vec<UnitDivergence>> {
    if !path.exists() {
        return Err(Error::MissingStageInput {
            path: path.to_path_buf(),
            remedy: "run the divergence stage into this output directory first".into(),
        });
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut profile = Vec::new();
    for (line_no, line) in report_lines(&text) {
        if line == "flat_index,layer,unit,score" {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(Error::TableParse {
                path: path.to_path_buf(),
                line: line_no,
                message: format!("expected 4 fields, got {}", fields.len()),
            });
        }
        let parse_err = |what: &str| Error::TableParse {
            path: path.to_path_buf(),
            line: line_no,
            message: format!("bad {what}"),
        };
        let flat: usize = fields[0].parse().map_err(|_| parse_err("flat_index"))?;
        let score: f64 = fields[3].parse().map_err(|_| parse_err("score"))?;
        profile.push(UnitDivergence {
            unit: matrix.address_of(flat)?,
            score,
        });
    }
    if profile.len() != matrix.unit_count() {
        return Err(Error::DimensionMismatch {
            what: "unit divergence rows",
            expected: matrix.unit_count(),
            actual: profile.len(),
        });
    }
    Ok(profile)
}

/// One saliency map on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyIndexRow {
    pub word: String,
    pub image_id: String,
    pub k: usize,
    pub normalizer: f64,
    /// Lattice CSV path relative to the output directory.
    pub lattice: String,
    /// Upsampled PGM path relative to the output directory.
    pub pixels: String,
}

/// Reads `saliency_index.csv` back.
pub fn read_saliency_index(path: &Path) -> Result<Vec<SaliencyIndexRow>> {
    if !path.exists() {
        return Err(Error::MissingStageInput {
            path: path.to_path_buf(),
            remedy: "run the saliency stage into this output directory first".into(),
        });
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for (line_no, line) in report_lines(&text) {
        if line == "word,image_id,k,normalizer,lattice,pixels" {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 6 {
            return Err(Error::TableParse {
                path: path.to_path_buf(),
                line: line_no,
                message: format!("expected 6 fields, got {}", fields.len()),
            });
        }
        let parse_err = |what: &str| Error::TableParse {
            path: path.to_path_buf(),
            line: line_no,
            message: format!("bad {what}"),
        };
        rows.push(SaliencyIndexRow {
            word: fields[0].to_string(),
            image_id: fields[1].to_string(),
            k: fields[2].parse().map_err(|_| parse_err("k"))?,
            normalizer: fields[3].parse().map_err(|_| parse_err("normalizer"))?,
            lattice: fields[4].to_string(),
            pixels: fields[5].to_string(),
        });
    }
    Ok(rows)
}

/// Picks the held-out images to map for one word: test-split records whose
/// candidate list carries the word and that have an image file, in manifest
/// order.
pub fn saliency_image_ids(manifest: &CorpusManifest, word: &str, limit: usize) -> Vec<String> {
    manifest
        .records()
        .iter()
        .filter(|r| {
            r.split == Split::Test
                && r.image_path.is_some()
                && r.candidate_words.iter().any(|w| w == word)
        })
        .take(limit)
        .map(|r| r.id.clone())
        .collect()
}

/// Computes occlusion saliency maps for the configured words over their
/// held-out positives and writes lattice CSVs, pixel PGMs, and the index.
///
/// Occlusion responses cover every unit at once, so each distinct image is
/// probed exactly once and shared across words and depths.
pub fn stage_saliency(
    config: &PipelineConfig,
    provider: &dyn ActivationProvider,
    manifest: &CorpusManifest,
    corpus_dir: &Path,
    ranked: &BTreeMap<String, (Vec<usize>, Vec<f64>)>,
    out_dir: &Path,
) -> Result<Vec<SaliencyIndexRow>> {
    let reports = Reports::new(out_dir, config);
    let words: Vec<String> = if config.saliency_words.is_empty() {
        ranked.keys().cloned().collect()
    } else {
        config.saliency_words.clone()
    };
    for word in &words {
        if !ranked.contains_key(word) {
            return Err(Error::UnknownWord { word: word.clone() });
        }
    }

    // One image list per word, then the distinct union to probe.
    let mut per_word_images: BTreeMap<&str, Vec<String>> = BTreeMap::new();
    let mut distinct: BTreeSet<String> = BTreeSet::new();
    for word in &words {
        let ids = saliency_image_ids(manifest, word, config.saliency_images);
        distinct.extend(ids.iter().cloned());
        per_word_images.insert(word, ids);
    }

    let load_image = |id: &str| -> Result<RgbImage> {
        let record = manifest
            .get(id)
            .ok_or_else(|| Error::UnknownImageId { id: id.to_string() })?;
        let rel = record
            .image_path
            .as_ref()
            .ok_or_else(|| Error::Config(format!("record {id} has no image path")))?;
        RgbImage::read_ppm(&corpus_dir.join(rel))
    };

    // Occluder fill: mean of the train-split images.
    let train_images: Vec<RgbImage> = manifest
        .records()
        .iter()
        .filter(|r| r.split == Split::Train && r.image_path.is_some())
        .map(|r| load_image(&r.id))
        .collect::<Result<_>>()?;
    let fill = OccluderFill::Mean(mean_image(train_images.iter())?);
    drop(train_images);

    let occlusion = OcclusionConfig::new(config.occluder_sizes.clone(), config.occluder_stride);

    let mut index = Vec::new();
    let mut index_csv = String::from("word,image_id,k,normalizer,lattice,pixels\n");
    let mut unit_maps: BTreeMap<String, Vec<crate::saliency::Grid>> = BTreeMap::new();
    for id in &distinct {
        let image = load_image(id)?;
        let responses = occlusion_responses(provider, id, &image, &fill, &occlusion)?;
        unit_maps.insert(id.clone(), unit_response_maps(&responses)?);
    }

    for word in &words {
        let (flats, scores) = &ranked[word];
        for id in &per_word_images[word.as_str()] {
            let maps = &unit_maps[id];
            for &flat in flats {
                if flat >= maps.len() {
                    return Err(Error::AddressOutOfRange {
                        what: "ranked unit flat index",
                        index: flat,
                        limit: maps.len(),
                    });
                }
            }
            let selected: Vec<&crate::saliency::Grid> = flats.iter().map(|&f| &maps[f]).collect();
            for &k in &config.accumulate_k {
                let map = accumulate(word, id, &selected, scores, k)?;
                let lattice_rel = format!("saliency/{word}/{id}.k{k}.csv");
                let pixels_rel = format!("saliency/{word}/{id}.k{k}.pgm");
                map.write_csv(&reports.path(&lattice_rel))?;
                let pixels = bilinear_upsample(&map.grid, config.occluder_stride);
                write_pgm(&pixels, &reports.path(&pixels_rel))?;
                let _ = writeln!(
                    index_csv,
                    "{},{},{},{:.9},{},{}",
                    word, id, map.k, map.normalizer, lattice_rel, pixels_rel
                );
                index.push(SaliencyIndexRow {
                    word: word.clone(),
                    image_id: id.clone(),
                    k: map.k,
                    normalizer: map.normalizer,
                    lattice: lattice_rel,
                    pixels: pixels_rel,
                });
            }
        }
    }
    reports.write("saliency_index.csv", &index_csv)?;
    Ok(index)
}

/// One evaluated saliency map.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyEvalRow {
    pub word: String,
    pub image_id: String,
    pub k: usize,
    pub average_precision: f64,
    pub otsu_threshold: f64,
    pub iou_at_otsu: f64,
}

/// Evaluates every indexed saliency map that has a consensus mask: average
/// precision plus IoU at the map's own Otsu threshold.
pub fn stage_eval_saliency(
    config: &PipelineConfig,
    index: &[SaliencyIndexRow],
    annotations_path: &Path,
    input_side: usize,
    out_dir: &Path,
) -> Result<Vec<SaliencyEvalRow>> {
    let reports = Reports::new(out_dir, config);
    let boxes = load_annotations(annotations_path)?;
    let masks = build_ground_truth(&boxes, input_side, config.min_votes)?;
    let mask_by_key: BTreeMap<(String, String), &GroundTruthMask> = masks
        .iter()
        .map(|m| ((m.image_id.clone(), m.word.clone()), m))
        .collect();

    let mut rows = Vec::new();
    let mut csv = String::from("word,image_id,k,average_precision,otsu_threshold,iou_at_otsu\n");
    for entry in index {
        let Some(mask) = mask_by_key.get(&(entry.image_id.clone(), entry.word.clone())) else {
            continue;
        };
        let map = SaliencyMap::read_csv(&reports.path(&entry.lattice))?;
        if !input_side.is_multiple_of(map.grid.width()) {
            return Err(Error::DimensionMismatch {
                what: "lattice width dividing the input side",
                expected: input_side,
                actual: map.grid.width(),
            });
        }
        let stride = input_side / map.grid.width();
        let pixels = bilinear_upsample(&map.grid, stride);
        let threshold = otsu_threshold(pixels.data())?;
        let eval = evaluate_saliency(&entry.word, &pixels, mask, &[threshold])?;
        let row = SaliencyEvalRow {
            word: entry.word.clone(),
            image_id: entry.image_id.clone(),
            k: entry.k,
            average_precision: eval.average_precision,
            otsu_threshold: threshold,
            iou_at_otsu: eval.iou[0].iou,
        };
        let _ = writeln!(
            csv,
            "{},{},{},{:.6},{:.6},{:.6}",
            row.word,
            row.image_id,
            row.k,
            row.average_precision,
            row.otsu_threshold,
            row.iou_at_otsu
        );
        rows.push(row);
    }
    reports.write("saliency_eval.csv", &csv)?;
    Ok(rows)
}

/// Correlation of machine visualness with human pair votes.
#[derive(Debug, Clone)]
pub struct HumanEvalOutput {
    pub human: BTreeMap<String, crate::perception::HumanVisualness>,
    pub report: crate::perception::CorrelationReport,
}

/// Scores human visualness from a vote table and correlates it with the
/// machine scores.
pub fn stage_eval_human(
    config: &PipelineConfig,
    machine: &BTreeMap<String, f64>,
    votes_path: &Path,
    out_dir: &Path,
) -> Result<HumanEvalOutput> {
    let reports = Reports::new(out_dir, config);
    let votes = load_votes(votes_path)?;
    let human = human_visualness_all(&votes, config.theta)?;

    let mut human_csv = String::from("word,score,n_pairs,theta\n");
    for hv in human.values() {
        let _ = writeln!(
            human_csv,
            "{},{:.6},{},{}",
            hv.word, hv.score, hv.n_pairs, hv.theta
        );
    }
    reports.write("human_visualness.csv", &human_csv)?;

    let human_scores: BTreeMap<String, f64> =
        human.iter().map(|(w, hv)| (w.clone(), hv.score)).collect();
    let report = correlation_report(machine, &human_scores)?;

    let mut corr_csv = String::from("n,pearson,spearman\n");
    let _ = writeln!(
        corr_csv,
        "{},{:.6},{:.6}",
        report.n, report.pearson, report.spearman
    );
    reports.write("correlation.csv", &corr_csv)?;

    let mut txt = format!(
        "machine vs human visualness over {} words\npearson  {:.4}\nspearman {:.4}\nwords: {}\n",
        report.n,
        report.pearson,
        report.spearman,
        report.words.join(", ")
    );
    txt.push_str("\nhuman scores:\n");
    for hv in human.values() {
        let _ = writeln!(
            txt,
            "  {:<16} {:.3} ({} pairs)",
            hv.word, hv.score, hv.n_pairs
        );
    }
    reports.write("correlation.txt", &txt)?;
    Ok(HumanEvalOutput { human, report })
}

/// Reads `visualness.csv` back as `word -> score` for one stage.
pub fn read_visualness(path: &Path, stage: Stage) -> Result<BTreeMap<String, f64>> {
    if !path.exists() {
        return Err(Error::MissingStageInput {
            path: path.to_path_buf(),
            remedy: "run the visualness stage into this output directory first".into(),
        });
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut scores = BTreeMap::new();
    for (line_no, line) in report_lines(&text) {
        if line == "word,stage,visualness,n_pos,n_neg,seed" {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 6 {
            return Err(Error::TableParse {
                path: path.to_path_buf(),
                line: line_no,
                message: format!("expected 6 fields, got {}", fields.len()),
            });
        }
        if fields[1] != stage.as_str() {
            continue;
        }
        let score: f64 = fields[2].parse().map_err(|_| Error::TableParse {
            path: path.to_path_buf(),
            line: line_no,
            message: "bad visualness".into(),
        })?;
        scores.insert(fields[0].to_string(), score);
    }
    Ok(scores)
}

/// Writes the synthetic benchmark fixture: corpus, activations, ground
/// truth, plus derived annotator boxes and pair votes so the evaluation
/// stages have inputs. Returns the in-memory corpus.
pub fn write_synthetic_fixture(
    spec: &SyntheticCorpusSpec,
    net_spec: &RefNetSpec,
    annotation_images: usize,
    dir: &Path,
) -> Result<SyntheticCorpus> {
    let net = RefNet::new(net_spec.clone())?;
    let corpus = generate_corpus(spec, &net)?;
    write_corpus(&corpus, dir)?;

    // Three deterministic annotators per planted word: the exact region,
    // grown by two pixels, shrunk by one. With two votes required the
    // consensus mask is exactly the planted region.
    let mut annotations = String::from("image_id,word,annotator,x0,y0,x1,y1\n");
    for planted in &spec.planted {
        if planted.pattern == PatternKind::None {
            continue;
        }
        let region = planted.region;
        let grown = crate::image::Rect::new(
            region.x0.saturating_sub(2),
            region.y0.saturating_sub(2),
            (region.x1 + 2).min(spec.image_side),
            (region.y1 + 2).min(spec.image_side),
        );
        let shrunk =
            crate::image::Rect::new(region.x0 + 1, region.y0 + 1, region.x1 - 1, region.y1 - 1);
        let mut taken = 0usize;
        for truth in &corpus.record_truth {
            if taken >= annotation_images {
                break;
            }
            if truth.split != Split::Test || !truth.rendered[&planted.word] {
                continue;
            }
            for (annotator, rect) in [("a1", region), ("a2", grown), ("a3", shrunk)] {
                let _ = writeln!(
                    annotations,
                    "{},{},{annotator},{},{},{},{}",
                    truth.id, planted.word, rect.x0, rect.y0, rect.x1, rect.y1
                );
            }
            taken += 1;
        }
    }
    atomic_write(&dir.join("annotations.csv"), annotations.as_bytes())
        .map_err(|e| Error::io(dir, e))?;

    // Pair votes whose strict->theta fraction lands near each word's true
    // visualness: out of 50 pairs, floor(truth * 50) get five votes.
    let mut votes = String::from("word,pair_index,positive_votes,annotators\n");
    for truth in &corpus.word_truth {
        let positive_pairs = (truth.true_visualness * 50.0).floor() as u32;
        for pair in 0..50u32 {
            let v = if pair < positive_pairs { 5 } else { 0 };
            let _ = writeln!(votes, "{},{},{},5", truth.word, pair, v);
        }
    }
    atomic_write(&dir.join("votes.csv"), votes.as_bytes()).map_err(|e| Error::io(dir, e))?;
    Ok(corpus)
}

/// What `run_all` produced.
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub words: usize,
    pub modeled_words: usize,
    pub saliency_maps: usize,
    pub evaluated_maps: usize,
    pub correlation: Option<(f64, f64)>,
}

/// Runs every stage over a corpus directory containing `manifest.jsonl` and
/// `activations.actv`. Optional inputs extend the run: `merge_map.tsv`
/// folds word variants, `refnet.toml` plus `images/` enables saliency,
/// `votes.csv` and `annotations.csv` enable the evaluation stages.
pub fn run_all(config: &PipelineConfig, corpus_dir: &Path, out_dir: &Path) -> Result<RunSummary> {
    let reports = Reports::new(out_dir, config);
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    atomic_write(
        &out_dir.join("config.toml"),
        config.to_toml_string().as_bytes(),
    )
    .map_err(|e| Error::io(out_dir, e))?;

    let manifest_path = corpus_dir.join("manifest.jsonl");
    if !manifest_path.exists() {
        return Err(Error::MissingStageInput {
            path: manifest_path,
            remedy: "point the run at a corpus directory with manifest.jsonl".into(),
        });
    }
    let activations_path = corpus_dir.join("activations.actv");
    if !activations_path.exists() {
        return Err(Error::MissingStageInput {
            path: activations_path,
            remedy: "record activations into activations.actv before running".into(),
        });
    }
    let manifest = CorpusManifest::load(&manifest_path, config.seed)?;
    let matrix = ActivationMatrix::read(&activations_path)?;

    let (manifest, _clusterings) = stage_dedup(config, &manifest, out_dir)?;

    let merge_path = corpus_dir.join("merge_map.tsv");
    let merge = if merge_path.exists() {
        Some(MergeMap::load_tsv(&merge_path)?)
    } else {
        None
    };
    let (manifest, vocab) = stage_vocabulary(config, &manifest, merge.as_ref(), out_dir)?;
    let words: Vec<String> = vocab.iter().map(|e| e.word.clone()).collect();

    let partitions = stage_partitions(config, &manifest, &words, out_dir)?;
    let two_class: Vec<WordPartitions> = partitions
        .iter()
        .filter(|wp| wp.two_class())
        .cloned()
        .collect();
    let divergence = stage_divergence(config, &matrix, &two_class, out_dir)?;
    stage_layers(config, &matrix, &divergence, out_dir)?;
    let models = stage_visualness(config, &matrix, &two_class, &divergence.prime, out_dir)?;

    let refnet_path = corpus_dir.join("refnet.toml");
    let saliency_index = if refnet_path.exists() {
        let net = RefNet::new(RefNetSpec::load(&refnet_path)?)?;
        let ranked = ranked_units_by_word(&read_prime_units(&reports.path("prime_units.csv"))?);
        stage_saliency(config, &net, &manifest, corpus_dir, &ranked, out_dir)?
    } else {
        Vec::new()
    };

    let annotations_path = corpus_dir.join("annotations.csv");
    let eval_rows = if annotations_path.exists() && !saliency_index.is_empty() {
        let net_spec = RefNetSpec::load(&refnet_path)?;
        stage_eval_saliency(
            config,
            &saliency_index,
            &annotations_path,
            net_spec.input_side,
            out_dir,
        )?
    } else {
        Vec::new()
    };

    let votes_path = corpus_dir.join("votes.csv");
    let correlation = if votes_path.exists() {
        // Read the scores back from the report rather than reusing the
        // in-memory values, so a staged rerun of this stage sees the same
        // (six-decimal) inputs and reproduces the correlation byte for byte.
        let machine = read_visualness(&reports.path("visualness.csv"), Stage::Resampled)?;
        let output = stage_eval_human(config, &machine, &votes_path, out_dir)?;
        Some((output.report.pearson, output.report.spearman))
    } else {
        None
    };

    let summary = RunSummary {
        words: words.len(),
        modeled_words: models.len(),
        saliency_maps: saliency_index.len(),
        evaluated_maps: eval_rows.len(),
        correlation,
    };
    let mut txt = format!(
        "words ranked        {}\nwords modeled       {}\nsaliency maps       {}\nevaluated maps      {}\n",
        summary.words, summary.modeled_words, summary.saliency_maps, summary.evaluated_maps
    );
    if let Some((pearson, spearman)) = summary.correlation {
        let _ = writeln!(
            txt,
            "human correlation   pearson {pearson:.4} spearman {spearman:.4}"
        );
    }
    reports.write("summary.txt", &txt)?;
    Ok(summary)
}

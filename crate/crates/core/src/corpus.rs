//! Corpus ingestion: manifest parsing, split assignment, bag-of-words
//! near-duplicate removal, vocabulary construction, and pos/neg partitions.
//!
//! The corpus is weakly annotated: a word attached to an image means a seller
//! mentioned it, not that the image depicts it. Everything downstream treats
//! these labels as noisy, so this module only has to be faithful about
//! bookkeeping: which records exist, which split they belong to, and which
//! candidate words each record carries.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util::{derive_seed, fnv1a64};

/// Cosine distance below which two listings of one shop count as duplicates.
pub const DEFAULT_DEDUP_THRESHOLD: f64 = 0.1;
/// Vocabulary size kept by frequency ranking.
pub const DEFAULT_TOP_VOCAB: usize = 250;

const STOPWORDS_EN: &str = include_str!("../resources/stopwords_en.txt");

/// Dataset split. Assigned 50/25/25 when the manifest does not carry one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
    Validation,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
            Split::Validation => "validation",
        }
    }

    pub fn parse(value: &str) -> Option<Split> {
        match value {
            "train" => Some(Split::Train),
            "test" => Some(Split::Test),
            "validation" => Some(Split::Validation),
            _ => None,
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One image with its listing text, already tokenized upstream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ImageRecord {
    pub id: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub shop_id: Option<String>,
    pub title_tokens: Vec<String>,
    pub description_tokens: Vec<String>,
    pub candidate_words: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub category: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub image_path: Option<PathBuf>,
    pub split: Split,
}

/// Wire format of one manifest line. `split` stays a raw string here so a bad
/// value can be reported with its line number instead of a serde blurb.
#[derive(Deserialize)]
struct RawRecord {
    id: String,
    #[serde(default)]
    shop_id: Option<String>,
    title_tokens: Vec<String>,
    description_tokens: Vec<String>,
    candidate_words: Vec<String>,
    #[serde(default)]
    category: Option<String>,
    #[serde(default)]
    image_path: Option<PathBuf>,
    #[serde(default)]
    split: Option<String>,
}

/// An ordered collection of [`ImageRecord`]s with unique ids.
#[derive(Debug, Clone)]
pub struct CorpusManifest {
    records: Vec<ImageRecord>,
    index: HashMap<String, usize>,
}

impl CorpusManifest {
    /// Loads a JSONL manifest. Unknown fields are ignored; missing required
    /// fields, malformed JSON, duplicate ids, and unknown split names are
    /// errors. When no record carries a split, a 50/25/25
    /// train/test/validation assignment is drawn from `seed`; when only some
    /// records carry one, the manifest is rejected as ambiguous.
    pub fn load(path: &Path, seed: u64) -> Result<CorpusManifest> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut raw = Vec::new();
        for (idx, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let record: RawRecord =
                serde_json::from_str(line).map_err(|e| Error::ManifestParse {
                    path: path.to_path_buf(),
                    line: idx + 1,
                    message: e.to_string(),
                })?;
            if let Some(value) = &record.split {
                if Split::parse(value).is_none() {
                    return Err(Error::UnknownSplit {
                        path: path.to_path_buf(),
                        line: idx + 1,
                        value: value.clone(),
                    });
                }
            }
            raw.push(record);
        }

        let assigned = raw.iter().filter(|r| r.split.is_some()).count();
        if assigned != 0 && assigned != raw.len() {
            return Err(Error::MixedSplitAssignment {
                assigned,
                unassigned: raw.len() - assigned,
            });
        }

        let splits: Vec<Split> = if assigned == raw.len() && !raw.is_empty() {
            raw.iter()
                .map(|r| Split::parse(r.split.as_deref().unwrap()).unwrap())
                .collect()
        } else {
            assign_splits(raw.len(), seed)
        };

        let records = raw
            .into_iter()
            .zip(splits)
            .map(|(r, split)| ImageRecord {
                id: r.id,
                shop_id: r.shop_id,
                title_tokens: r.title_tokens,
                description_tokens: r.description_tokens,
                candidate_words: r.candidate_words,
                category: r.category,
                image_path: r.image_path,
                split,
            })
            .collect();
        CorpusManifest::from_records(records)
    }

    /// Builds a manifest from in-memory records, checking id uniqueness.
    pub fn from_records(records: Vec<ImageRecord>) -> Result<CorpusManifest> {
        let mut index = HashMap::with_capacity(records.len());
        for (i, record) in records.iter().enumerate() {
            if index.insert(record.id.clone(), i).is_some() {
                return Err(Error::DuplicateImageId {
                    id: record.id.clone(),
                });
            }
        }
        Ok(CorpusManifest { records, index })
    }

    /// Serializes back to JSONL, one record per line, split always present.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for record in &self.records {
            out.push_str(&serde_json::to_string(record).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        crate::util::atomic_write(path, self.to_jsonl().as_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn records(&self) -> &[ImageRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&ImageRecord> {
        self.index.get(id).map(|&i| &self.records[i])
    }

    pub fn ids_in_split(&self, split: Split) -> Vec<&str> {
        self.records
            .iter()
            .filter(|r| r.split == split)
            .map(|r| r.id.as_str())
            .collect()
    }

    /// Keeps only the records whose id is in `keep`, preserving order.
    pub fn retain_ids(&self, keep: &HashSet<String>) -> CorpusManifest {
        let records = self
            .records
            .iter()
            .filter(|r| keep.contains(&r.id))
            .cloned()
            .collect();
        CorpusManifest::from_records(records).expect("subset of unique ids stays unique")
    }

    /// Rewrites candidate words through `merge`, dropping duplicates that the
    /// mapping creates while keeping first-occurrence order.
    pub fn apply_merge(&self, merge: &MergeMap) -> CorpusManifest {
        let records = self
            .records
            .iter()
            .map(|r| {
                let mut seen = HashSet::new();
                let mut words = Vec::with_capacity(r.candidate_words.len());
                for w in &r.candidate_words {
                    let canonical = merge.canonical(w).to_string();
                    if seen.insert(canonical.clone()) {
                        words.push(canonical);
                    }
                }
                ImageRecord {
                    candidate_words: words,
                    ..r.clone()
                }
            })
            .collect();
        CorpusManifest::from_records(records).expect("ids unchanged")
    }
}

/// Draws a 50/25/25 split assignment for `n` records: a seeded shuffle of the
/// record positions, first half train, next quarter test, remainder
/// validation.
pub fn assign_splits(n: usize, seed: u64) -> Vec<Split> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "split-assignment"));
    order.shuffle(&mut rng);
    let n_train = n / 2;
    let n_test = n / 4;
    let mut splits = vec![Split::Validation; n];
    for (rank, &pos) in order.iter().enumerate() {
        splits[pos] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_test {
            Split::Test
        } else {
            Split::Validation
        };
    }
    splits
}

/// Sparse term-count vector over listing text.
pub type TermCounts = BTreeMap<String, u32>;

/// Counts title and description tokens, skipping stop words.
pub fn bag_of_words(record: &ImageRecord, stop_words: &HashSet<String>) -> TermCounts {
    let mut counts = TermCounts::new();
    for token in record
        .title_tokens
        .iter()
        .chain(record.description_tokens.iter())
    {
        if !stop_words.contains(token) {
            *counts.entry(token.clone()).or_insert(0) += 1;
        }
    }
    counts
}

/// Cosine distance `1 - cos(a, b)` between two term-count vectors, clamped to
/// `[0, 1]`. An empty bag is at distance 1 from everything, including another
/// empty bag.
pub fn cosine_distance(a: &TermCounts, b: &TermCounts) -> f64 {
    let (small, large) = if a.len() <= b.len() { (a, b) } else { (b, a) };
    let mut dot = 0.0f64;
    for (term, &count) in small {
        if let Some(&other) = large.get(term) {
            dot += f64::from(count) * f64::from(other);
        }
    }
    let norm = |v: &TermCounts| {
        v.values()
            .map(|&c| f64::from(c) * f64::from(c))
            .sum::<f64>()
            .sqrt()
    };
    let na = norm(a);
    let nb = norm(b);
    if na == 0.0 || nb == 0.0 {
        return 1.0;
    }
    (1.0 - dot / (na * nb)).clamp(0.0, 1.0)
}

/// Near-duplicate clusters of one shop's records.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DuplicateClustering {
    pub shop_id: String,
    /// Clusters partition the shop's record ids. Members are sorted by id and
    /// clusters by their first member.
    pub clusters: Vec<Vec<String>>,
    /// One seeded uniform draw per cluster, aligned with `clusters`.
    pub representatives: Vec<String>,
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        UnionFind {
            parent: (0..n).collect(),
        }
    }

    fn find(&mut self, i: usize) -> usize {
        if self.parent[i] != i {
            let root = self.find(self.parent[i]);
            self.parent[i] = root;
        }
        self.parent[i]
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            // Smaller root wins so cluster identity is order-independent.
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.parent[hi] = lo;
        }
    }
}

/// Single-linkage agglomerative clustering of one shop's records: any pair at
/// bag-of-words cosine distance strictly below `threshold` is linked, and
/// linkage is transitive. The representative of each cluster is a uniform
/// seeded draw; the per-shop RNG stream is derived from `seed` and the shop
/// id, so other shops' draws never shift it.
pub fn dedup_shop(
    records: &[&ImageRecord],
    stop_words: &HashSet<String>,
    threshold: f64,
    seed: u64,
) -> Result<DuplicateClustering> {
    if records.is_empty() {
        return Err(Error::EmptyInput {
            what: "dedup_shop records",
        });
    }
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(Error::InvalidInput(format!(
            "dedup threshold must be in (0, 1], got {threshold}"
        )));
    }
    let shop_id = records[0]
        .shop_id
        .clone()
        .ok_or_else(|| Error::InvalidInput(format!("record {:?} has no shop_id", records[0].id)))?;
    for r in records {
        if r.shop_id.as_deref() != Some(shop_id.as_str()) {
            return Err(Error::InvalidInput(format!(
                "dedup_shop got records from shops {:?} and {:?}",
                shop_id, r.shop_id
            )));
        }
    }

    let bags: Vec<TermCounts> = records
        .iter()
        .map(|r| bag_of_words(r, stop_words))
        .collect();
    let mut uf = UnionFind::new(records.len());
    for i in 0..records.len() {
        for j in (i + 1)..records.len() {
            if cosine_distance(&bags[i], &bags[j]) < threshold {
                uf.union(i, j);
            }
        }
    }

    let mut groups: BTreeMap<usize, Vec<String>> = BTreeMap::new();
    for (i, record) in records.iter().enumerate() {
        let root = uf.find(i);
        groups.entry(root).or_default().push(record.id.clone());
    }
    let mut clusters: Vec<Vec<String>> = groups
        .into_values()
        .map(|mut members| {
            members.sort();
            members
        })
        .collect();
    clusters.sort_by(|a, b| a[0].cmp(&b[0]));

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("dedup/{shop_id}")));
    let representatives = clusters
        .iter()
        .map(|members| members[rng.random_range(0..members.len())].clone())
        .collect();

    Ok(DuplicateClustering {
        shop_id,
        clusters,
        representatives,
    })
}

/// Runs [`dedup_shop`] over every shop of the manifest and keeps one
/// representative per cluster. Records without a shop id are kept untouched.
/// Returns the filtered manifest (original record order) and the per-shop
/// clusterings sorted by shop id.
pub fn dedup_manifest(
    manifest: &CorpusManifest,
    stop_words: &HashSet<String>,
    threshold: f64,
    seed: u64,
) -> Result<(CorpusManifest, Vec<DuplicateClustering>)> {
    let mut by_shop: BTreeMap<&str, Vec<&ImageRecord>> = BTreeMap::new();
    let mut keep: HashSet<String> = HashSet::new();
    for record in manifest.records() {
        match &record.shop_id {
            Some(shop) => by_shop.entry(shop.as_str()).or_default().push(record),
            None => {
                keep.insert(record.id.clone());
            }
        }
    }
    let mut clusterings = Vec::with_capacity(by_shop.len());
    for records in by_shop.values() {
        let clustering = dedup_shop(records, stop_words, threshold, seed)?;
        keep.extend(clustering.representatives.iter().cloned());
        clusterings.push(clustering);
    }
    Ok((manifest.retain_ids(&keep), clusterings))
}

/// Maps word variants onto canonical forms ("handmade" <- "hand_made").
#[derive(Debug, Clone, Default)]
pub struct MergeMap {
    map: BTreeMap<String, String>,
}

impl MergeMap {
    /// Builds a merge map, rejecting chains: a target must not itself be
    /// remapped, so lookups never need to iterate. Identity pairs are
    /// dropped; conflicting duplicates are an error.
    pub fn from_pairs<I>(pairs: I) -> Result<MergeMap>
    where
        I: IntoIterator<Item = (String, String)>,
    {
        let mut map = BTreeMap::new();
        for (variant, target) in pairs {
            if variant == target {
                continue;
            }
            if let Some(previous) = map.get(&variant) {
                if previous != &target {
                    return Err(Error::InvalidInput(format!(
                        "merge map sends {variant:?} to both {previous:?} and {target:?}"
                    )));
                }
                continue;
            }
            map.insert(variant, target);
        }
        for (variant, target) in &map {
            if map.contains_key(target) {
                return Err(Error::MergeMapChain {
                    variant: variant.clone(),
                    target: target.clone(),
                });
            }
        }
        Ok(MergeMap { map })
    }

    /// Parses a two-column TSV of `variant<TAB>canonical` rows. Blank lines
    /// and `#` comments are skipped.
    pub fn load_tsv(path: &Path) -> Result<MergeMap> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut pairs = Vec::new();
        for (idx, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut fields = line.split('\t');
            let (variant, target) = match (fields.next(), fields.next(), fields.next()) {
                (Some(v), Some(t), None) if !v.is_empty() && !t.is_empty() => (v, t),
                _ => {
                    return Err(Error::TableParse {
                        path: path.to_path_buf(),
                        line: idx + 1,
                        message: "expected exactly two tab-separated words".into(),
                    })
                }
            };
            pairs.push((variant.to_string(), target.to_string()));
        }
        MergeMap::from_pairs(pairs)
    }

    pub fn canonical<'a>(&'a self, word: &'a str) -> &'a str {
        self.map.get(word).map(String::as_str).unwrap_or(word)
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

/// One vocabulary row: document frequency over candidate words.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabEntry {
    pub word: String,
    /// Number of records whose candidate list contains the word.
    pub frequency: usize,
    /// 1-based position after sorting by frequency desc, word asc.
    pub rank: usize,
}

/// Ranks candidate words by document frequency and keeps the top `top_k`.
/// Ties break lexicographically, so {red: 5, blue: 5} with `top_k = 1` keeps
/// "blue". An optional merge map folds variant counts together first.
pub fn build_vocabulary(
    manifest: &CorpusManifest,
    top_k: usize,
    merge: Option<&MergeMap>,
) -> Result<Vec<VocabEntry>> {
    if top_k == 0 {
        return Err(Error::InvalidInput("top_k must be at least 1".into()));
    }
    let mut frequency: BTreeMap<String, usize> = BTreeMap::new();
    for record in manifest.records() {
        let mut seen: BTreeSet<&str> = BTreeSet::new();
        for word in &record.candidate_words {
            let canonical = merge.map(|m| m.canonical(word)).unwrap_or(word);
            seen.insert(canonical);
        }
        for word in seen {
            *frequency.entry(word.to_string()).or_insert(0) += 1;
        }
    }
    let mut entries: Vec<(String, usize)> = frequency.into_iter().collect();
    entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    entries.truncate(top_k);
    Ok(entries
        .into_iter()
        .enumerate()
        .map(|(i, (word, frequency))| VocabEntry {
            word,
            frequency,
            rank: i + 1,
        })
        .collect())
}

/// Weakly labeled positive/negative image ids for one word in one split.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetPartition {
    pub word: String,
    pub split: Split,
    /// Ids whose candidate list contains the word, in manifest order.
    pub positive_ids: Vec<String>,
    /// The remaining ids of the split, in manifest order.
    pub negative_ids: Vec<String>,
}

impl DatasetPartition {
    pub fn from_ids(
        word: impl Into<String>,
        split: Split,
        positive_ids: Vec<String>,
        negative_ids: Vec<String>,
    ) -> Self {
        DatasetPartition {
            word: word.into(),
            split,
            positive_ids,
            negative_ids,
        }
    }
}

/// Splits one split's records into weak positives (word present in the
/// candidate list) and negatives (absent). A word that never occurs anywhere
/// in the corpus is rejected; a word that merely misses this split yields an
/// empty positive set.
pub fn partition(manifest: &CorpusManifest, word: &str, split: Split) -> Result<DatasetPartition> {
    let mut known = false;
    let mut positive_ids = Vec::new();
    let mut negative_ids = Vec::new();
    for record in manifest.records() {
        let has_word = record.candidate_words.iter().any(|w| w == word);
        known |= has_word;
        if record.split != split {
            continue;
        }
        if has_word {
            positive_ids.push(record.id.clone());
        } else {
            negative_ids.push(record.id.clone());
        }
    }
    if !known {
        return Err(Error::UnknownWord { word: word.into() });
    }
    Ok(DatasetPartition {
        word: word.to_string(),
        split,
        positive_ids,
        negative_ids,
    })
}

fn parse_stop_words(text: &str) -> HashSet<String> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_string)
        .collect()
}

/// The built-in English stop word list.
pub fn default_stop_words() -> HashSet<String> {
    parse_stop_words(STOPWORDS_EN)
}

/// Loads a newline-delimited stop word file (blank lines and `#` comments
/// ignored).
pub fn load_stop_words(path: &Path) -> Result<HashSet<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(parse_stop_words(&text))
}

/// Derives a stable per-word seed for downstream stages.
pub fn word_seed(base: u64, word: &str) -> u64 {
    base ^ fnv1a64(word.as_bytes())
}

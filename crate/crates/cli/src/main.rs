//! Command line front end for the attrscope pipeline. Every subcommand maps
//! onto one pipeline stage; `run` chains them all over a corpus directory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use attrscope::actstore::ActivationMatrix;
use attrscope::classify::Stage;
use attrscope::corpus::{CorpusManifest, MergeMap};
use attrscope::pipeline::{self, init_thread_pool, PipelineConfig};
use attrscope::refnet::{RefNet, RefNetSpec, SyntheticCorpusSpec};

#[derive(Parser)]
#[command(
    name = "attrscope",
    version,
    about = "Discovers visual attribute words in weakly annotated image corpora"
)]
struct Cli {
    /// Worker threads; 0 keeps one per core.
    #[arg(long, global = true, default_value_t = 0)]
    jobs: usize,
    /// Pipeline config TOML. Command flags override individual fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Base seed, overriding the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct OutArg {
    /// Output directory for reports and artifacts.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic benchmark corpus with known ground truth.
    Synth {
        #[command(flatten)]
        out: OutArg,
        /// Corpus recipe TOML; omit for the standard benchmark.
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Reference net TOML; omit for the default architecture.
        #[arg(long)]
        net: Option<PathBuf>,
        /// Use the reduced fixture (240 images, two planted words).
        #[arg(long, conflicts_with = "spec")]
        small: bool,
        /// Annotated held-out images per planted word.
        #[arg(long, default_value_t = 10)]
        annotation_images: usize,
    },
    /// Run every stage over a corpus directory.
    Run {
        /// Corpus directory with manifest.jsonl and activations.actv.
        #[arg(long)]
        corpus: PathBuf,
        #[command(flatten)]
        out: OutArg,
    },
    /// Collapse near-duplicate listings per shop.
    Dedup {
        #[arg(long)]
        manifest: PathBuf,
        #[command(flatten)]
        out: OutArg,
        /// Cosine distance below which two listings are duplicates.
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Rank candidate words by document frequency.
    Vocab {
        #[arg(long)]
        manifest: PathBuf,
        #[command(flatten)]
        out: OutArg,
        /// TSV mapping word variants onto canonical forms.
        #[arg(long)]
        merge_map: Option<PathBuf>,
        #[arg(long)]
        top_vocab: Option<usize>,
    },
    /// Partition splits into weak positives and negatives per word.
    Partition {
        #[arg(long)]
        manifest: PathBuf,
        #[command(flatten)]
        out: OutArg,
        /// Comma-separated words; omit to use vocabulary.csv from --out.
        #[arg(long, value_delimiter = ',')]
        words: Vec<String>,
    },
    /// Score every unit's activation divergence per word.
    Divergence {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        activations: PathBuf,
        #[command(flatten)]
        out: OutArg,
        #[arg(long, value_delimiter = ',')]
        words: Vec<String>,
        #[arg(long)]
        bins: Option<usize>,
        #[arg(long)]
        prime_k: Option<usize>,
    },
    /// Train the two-stage classifiers and score visualness.
    Visualness {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        activations: PathBuf,
        #[command(flatten)]
        out: OutArg,
        #[arg(long)]
        l2: Option<f64>,
        #[arg(long)]
        resample_fraction: Option<f64>,
    },
    /// Collapse divergence profiles into layer depth reports.
    Layers {
        #[arg(long)]
        activations: PathBuf,
        #[command(flatten)]
        out: OutArg,
    },
    /// Compute occlusion saliency maps for ranked words.
    Saliency {
        #[arg(long)]
        manifest: PathBuf,
        /// Corpus directory holding the image files.
        #[arg(long)]
        corpus: PathBuf,
        /// Reference net spec TOML used as the activation provider.
        #[arg(long)]
        refnet: PathBuf,
        #[command(flatten)]
        out: OutArg,
        /// Comma-separated words; omit to map every ranked word.
        #[arg(long, value_delimiter = ',')]
        words: Vec<String>,
        #[arg(long, value_delimiter = ',')]
        occluder_sizes: Vec<usize>,
        #[arg(long)]
        stride: Option<usize>,
        /// Comma-separated accumulation depths.
        #[arg(long, value_delimiter = ',')]
        accumulate_k: Vec<usize>,
        /// Held-out positives to map per word.
        #[arg(long)]
        images: Option<usize>,
    },
    /// Score saliency maps against annotator boxes.
    EvalSaliency {
        #[arg(long)]
        annotations: PathBuf,
        /// Reference net spec TOML (for the pixel resolution).
        #[arg(long)]
        refnet: PathBuf,
        #[command(flatten)]
        out: OutArg,
        #[arg(long)]
        min_votes: Option<usize>,
    },
    /// Correlate machine visualness with human pair votes.
    EvalHuman {
        #[arg(long)]
        votes: PathBuf,
        #[command(flatten)]
        out: OutArg,
        #[arg(long)]
        theta: Option<u32>,
    },
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut config = match &cli.config {
        Some(path) => PipelineConfig::load(path)
            .with_context(|| format!("loading config {}", path.display()))?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    Ok(config)
}

fn load_manifest(path: &Path, config: &PipelineConfig) -> Result<CorpusManifest> {
    CorpusManifest::load(path, config.seed)
        .with_context(|| format!("loading manifest {}", path.display()))
}

fn load_matrix(path: &Path) -> Result<ActivationMatrix> {
    ActivationMatrix::read(path).with_context(|| format!("loading activations {}", path.display()))
}

fn words_or_vocab(words: Vec<String>, out_dir: &Path) -> Result<Vec<String>> {
    if !words.is_empty() {
        return Ok(words);
    }
    let vocab = pipeline::read_vocabulary(&out_dir.join("vocabulary.csv"))?;
    Ok(vocab.into_iter().map(|e| e.word).collect())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    init_thread_pool(cli.jobs)?;
    let mut config = load_config(&cli)?;

    match cli.command {
        Command::Synth {
            out,
            spec,
            net,
            small,
            annotation_images,
        } => {
            let corpus_spec = match (&spec, small) {
                (Some(path), _) => SyntheticCorpusSpec::load(path)
                    .with_context(|| format!("loading corpus spec {}", path.display()))?,
                (None, true) => SyntheticCorpusSpec::small(),
                (None, false) => SyntheticCorpusSpec::default_acceptance(),
            };
            let net_spec = match &net {
                Some(path) => RefNetSpec::load(path)
                    .with_context(|| format!("loading net spec {}", path.display()))?,
                None => RefNetSpec::default(),
            };
            let corpus = pipeline::write_synthetic_fixture(
                &corpus_spec,
                &net_spec,
                annotation_images,
                &out.out,
            )?;
            println!(
                "wrote {} images, {} planted and {} distractor words to {}",
                corpus.manifest.len(),
                corpus.spec.planted.len(),
                corpus.spec.distractors.len(),
                out.out.display()
            );
        }
        Command::Run { corpus, out } => {
            let summary = pipeline::run_all(&config, &corpus, &out.out)?;
            println!(
                "ranked {} words, modeled {}, wrote {} saliency maps ({} evaluated)",
                summary.words, summary.modeled_words, summary.saliency_maps, summary.evaluated_maps
            );
            if let Some((pearson, spearman)) = summary.correlation {
                println!("human correlation: pearson {pearson:.4}, spearman {spearman:.4}");
            }
            println!("reports in {}", out.out.display());
        }
        Command::Dedup {
            manifest,
            out,
            threshold,
        } => {
            if let Some(t) = threshold {
                config.dedup_threshold = t;
            }
            let manifest = load_manifest(&manifest, &config)?;
            let before = manifest.len();
            let (deduped, clusterings) = pipeline::stage_dedup(&config, &manifest, &out.out)?;
            println!(
                "kept {} of {} records across {} shops",
                deduped.len(),
                before,
                clusterings.len()
            );
        }
        Command::Vocab {
            manifest,
            out,
            merge_map,
            top_vocab,
        } => {
            if let Some(k) = top_vocab {
                config.top_vocab = k;
            }
            let manifest = load_manifest(&manifest, &config)?;
            let merge = merge_map
                .as_deref()
                .map(MergeMap::load_tsv)
                .transpose()
                .context("loading merge map")?;
            let (_, vocab) =
                pipeline::stage_vocabulary(&config, &manifest, merge.as_ref(), &out.out)?;
            println!("ranked {} words", vocab.len());
        }
        Command::Partition {
            manifest,
            out,
            words,
        } => {
            let manifest = load_manifest(&manifest, &config)?;
            let words = words_or_vocab(words, &out.out)?;
            let partitions = pipeline::stage_partitions(&config, &manifest, &words, &out.out)?;
            let usable = partitions.iter().filter(|wp| wp.two_class()).count();
            println!(
                "partitioned {} words ({} with both classes in both splits)",
                partitions.len(),
                usable
            );
        }
        Command::Divergence {
            manifest,
            activations,
            out,
            words,
            bins,
            prime_k,
        } => {
            if let Some(b) = bins {
                config.bins = b;
            }
            if let Some(k) = prime_k {
                config.prime_k = k;
            }
            let manifest = load_manifest(&manifest, &config)?;
            let matrix = load_matrix(&activations)?;
            let words = words_or_vocab(words, &out.out)?;
            let partitions = pipeline::stage_partitions(&config, &manifest, &words, &out.out)?;
            let two_class: Vec<_> = partitions.into_iter().filter(|wp| wp.two_class()).collect();
            if two_class.is_empty() {
                bail!("no word has both classes in both splits");
            }
            let output = pipeline::stage_divergence(&config, &matrix, &two_class, &out.out)?;
            println!(
                "scored {} units for {} words",
                matrix.unit_count(),
                output.profiles.len()
            );
        }
        Command::Visualness {
            manifest,
            activations,
            out,
            l2,
            resample_fraction,
        } => {
            if let Some(l) = l2 {
                config.l2 = l;
            }
            if let Some(f) = resample_fraction {
                config.resample_fraction = f;
            }
            let manifest = load_manifest(&manifest, &config)?;
            let matrix = load_matrix(&activations)?;
            let rows = pipeline::read_prime_units(&out.out.join("prime_units.csv"))?;
            let prime = pipeline::prime_sets_from_rows(&rows, &matrix)?;
            let words: Vec<String> = prime.iter().map(|p| p.word.clone()).collect();
            let partitions = pipeline::stage_partitions(&config, &manifest, &words, &out.out)?;
            let models =
                pipeline::stage_visualness(&config, &matrix, &partitions, &prime, &out.out)?;
            for m in &models {
                for r in &m.reports {
                    println!("{:<16} {:<9} {:.4}", r.word, r.stage.as_str(), r.visualness);
                }
            }
        }
        Command::Layers { activations, out } => {
            let matrix = load_matrix(&activations)?;
            let rows = pipeline::read_prime_units(&out.out.join("prime_units.csv"))?;
            let prime = pipeline::prime_sets_from_rows(&rows, &matrix)?;
            let mut profiles = Vec::with_capacity(prime.len());
            for set in &prime {
                let profile = pipeline::read_unit_divergences(
                    &out.out.join(format!("divergence/units_{}.csv", set.word)),
                    &matrix,
                )?;
                profiles.push((set.word.clone(), profile));
            }
            let count = prime.len();
            let divergence = pipeline::DivergenceOutput { profiles, prime };
            pipeline::stage_layers(&config, &matrix, &divergence, &out.out)?;
            println!("wrote layer reports for {count} words");
        }
        Command::Saliency {
            manifest,
            corpus,
            refnet,
            out,
            words,
            occluder_sizes,
            stride,
            accumulate_k,
            images,
        } => {
            if !occluder_sizes.is_empty() {
                config.occluder_sizes = occluder_sizes;
            }
            if let Some(s) = stride {
                config.occluder_stride = s;
            }
            if !accumulate_k.is_empty() {
                config.accumulate_k = accumulate_k;
            }
            if let Some(n) = images {
                config.saliency_images = n;
            }
            if !words.is_empty() {
                config.saliency_words = words;
            }
            let manifest = load_manifest(&manifest, &config)?;
            let net = RefNet::new(
                RefNetSpec::load(&refnet)
                    .with_context(|| format!("loading net spec {}", refnet.display()))?,
            )?;
            let rows = pipeline::read_prime_units(&out.out.join("prime_units.csv"))?;
            let ranked = pipeline::ranked_units_by_word(&rows);
            let index =
                pipeline::stage_saliency(&config, &net, &manifest, &corpus, &ranked, &out.out)?;
            println!("wrote {} saliency maps", index.len());
        }
        Command::EvalSaliency {
            annotations,
            refnet,
            out,
            min_votes,
        } => {
            if let Some(v) = min_votes {
                config.min_votes = v;
            }
            let net_spec = RefNetSpec::load(&refnet)
                .with_context(|| format!("loading net spec {}", refnet.display()))?;
            let index = pipeline::read_saliency_index(&out.out.join("saliency_index.csv"))?;
            let rows = pipeline::stage_eval_saliency(
                &config,
                &index,
                &annotations,
                net_spec.input_side,
                &out.out,
            )?;
            for row in &rows {
                println!(
                    "{:<12} {:<10} k={:<4} ap {:.3} iou {:.3}",
                    row.word, row.image_id, row.k, row.average_precision, row.iou_at_otsu
                );
            }
            println!("evaluated {} maps", rows.len());
        }
        Command::EvalHuman { votes, out, theta } => {
            if let Some(t) = theta {
                config.theta = t;
            }
            let machine: BTreeMap<String, f64> =
                pipeline::read_visualness(&out.out.join("visualness.csv"), Stage::Resampled)?;
            let output = pipeline::stage_eval_human(&config, &machine, &votes, &out.out)?;
            println!(
                "correlated {} words: pearson {:.4}, spearman {:.4}",
                output.report.n, output.report.pearson, output.report.spearman
            );
        }
    }
    Ok(())
}

//! End-to-end tests that drive the compiled `attrscope` binary: a synthetic
//! corpus is generated, the full pipeline runs over it, and the staged
//! subcommands must reproduce the `run` artifacts byte for byte.

use std::path::Path;
use std::process::{Command, Output};

use attrscope::image::Rect;
use attrscope::pipeline::PipelineConfig;
use attrscope::refnet::{
    ConvSpec, DistractorSpec, FcSpec, PatternKind, PlantedWordSpec, RefNetSpec, SyntheticCorpusSpec,
};
use attrscope::util::dir_digest;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_attrscope"))
}

fn run_ok(args: &[&str], cwd: &Path) -> Output {
    let output = bin()
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs");
    assert!(
        output.status.success(),
        "`attrscope {}` failed:\nstdout: {}\nstderr: {}",
        args.join(" "),
        String::from_utf8_lossy(&output.stdout),
        String::from_utf8_lossy(&output.stderr),
    );
    output
}

fn stdout_of(output: &Output) -> String {
    String::from_utf8_lossy(&output.stdout).into_owned()
}

fn tiny_net_spec() -> RefNetSpec {
    RefNetSpec {
        seed: 7,
        input_side: 16,
        conv: vec![ConvSpec {
            name: "conv1".into(),
            out_channels: 6,
            kernel: 3,
            pool: 2,
        }],
        fc: vec![FcSpec {
            name: "fc2".into(),
            units: 8,
        }],
    }
}

fn tiny_corpus_spec() -> SyntheticCorpusSpec {
    SyntheticCorpusSpec {
        n_images: 120,
        image_side: 16,
        label_flip_rate: 0.1,
        seed: 11,
        planted: vec![PlantedWordSpec {
            word: "red".into(),
            pattern: PatternKind::ColorPatch { rgb: [220, 20, 20] },
            region: Rect::new(4, 4, 12, 12),
            render_prob: 1.0,
            presence_prob: 0.5,
        }],
        distractors: vec![
            DistractorSpec {
                word: "gift".into(),
                attach_prob: 0.5,
            },
            DistractorSpec {
                word: "new".into(),
                attach_prob: 0.5,
            },
        ],
    }
}

fn test_config() -> PipelineConfig {
    PipelineConfig {
        seed: 11,
        bins: 16,
        prime_k: 6,
        top_vocab: 10,
        occluder_sizes: vec![4, 8],
        occluder_stride: 4,
        accumulate_k: vec![1, 4],
        saliency_words: vec!["red".into()],
        saliency_images: 2,
        ..PipelineConfig::default()
    }
}

/// Writes the fixture files and returns the workspace root.
fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    tiny_corpus_spec()
        .save(&dir.path().join("spec.toml"))
        .unwrap();
    tiny_net_spec().save(&dir.path().join("net.toml")).unwrap();
    std::fs::write(
        dir.path().join("config.toml"),
        test_config().to_toml_string(),
    )
    .unwrap();
    dir
}

#[test]
fn help_lists_every_subcommand() {
    let output = run_ok(&["--help"], Path::new("."));
    let text = stdout_of(&output);
    for name in [
        "synth",
        "run",
        "dedup",
        "vocab",
        "partition",
        "divergence",
        "visualness",
        "layers",
        "saliency",
        "eval-saliency",
        "eval-human",
    ] {
        assert!(text.contains(name), "--help does not mention `{name}`");
    }
}

#[test]
fn synth_then_run_produces_reports() {
    let dir = setup();
    let root = dir.path();

    let output = run_ok(
        &[
            "synth",
            "--out",
            "corpus",
            "--spec",
            "spec.toml",
            "--net",
            "net.toml",
            "--annotation-images",
            "3",
        ],
        root,
    );
    assert!(stdout_of(&output).contains("120 images"));
    for file in [
        "manifest.jsonl",
        "activations.actv",
        "refnet.toml",
        "synth_spec.toml",
        "annotations.csv",
        "votes.csv",
        "truth_words.csv",
    ] {
        assert!(
            root.join("corpus").join(file).exists(),
            "synth did not write {file}"
        );
    }

    let output = run_ok(
        &[
            "--config",
            "config.toml",
            "run",
            "--corpus",
            "corpus",
            "--out",
            "full",
        ],
        root,
    );
    let text = stdout_of(&output);
    assert!(text.contains("ranked 3 words"), "stdout was: {text}");
    assert!(text.contains("human correlation"), "stdout was: {text}");
    for file in [
        "summary.txt",
        "visualness.csv",
        "prime_units.csv",
        "saliency_index.csv",
        "saliency_eval.csv",
        "correlation.csv",
    ] {
        assert!(
            root.join("full").join(file).exists(),
            "run did not write {file}"
        );
    }
}

#[test]
fn staged_subcommands_reproduce_the_full_run() {
    let dir = setup();
    let root = dir.path();
    run_ok(
        &[
            "synth",
            "--out",
            "corpus",
            "--spec",
            "spec.toml",
            "--net",
            "net.toml",
            "--annotation-images",
            "3",
        ],
        root,
    );
    run_ok(
        &[
            "--config",
            "config.toml",
            "run",
            "--corpus",
            "corpus",
            "--out",
            "full",
        ],
        root,
    );

    let cfg = ["--config", "config.toml"];
    let staged: &[&[&str]] = &[
        &[
            "dedup",
            "--manifest",
            "corpus/manifest.jsonl",
            "--out",
            "staged",
        ],
        &[
            "vocab",
            "--manifest",
            "staged/manifest.dedup.jsonl",
            "--out",
            "staged",
        ],
        &[
            "partition",
            "--manifest",
            "staged/manifest.dedup.jsonl",
            "--out",
            "staged",
        ],
        &[
            "divergence",
            "--manifest",
            "staged/manifest.dedup.jsonl",
            "--activations",
            "corpus/activations.actv",
            "--out",
            "staged",
        ],
        &[
            "visualness",
            "--manifest",
            "staged/manifest.dedup.jsonl",
            "--activations",
            "corpus/activations.actv",
            "--out",
            "staged",
        ],
        &[
            "layers",
            "--activations",
            "corpus/activations.actv",
            "--out",
            "staged",
        ],
        &[
            "saliency",
            "--manifest",
            "staged/manifest.dedup.jsonl",
            "--corpus",
            "corpus",
            "--refnet",
            "corpus/refnet.toml",
            "--out",
            "staged",
            "--words",
            "red",
        ],
        &[
            "eval-saliency",
            "--annotations",
            "corpus/annotations.csv",
            "--refnet",
            "corpus/refnet.toml",
            "--out",
            "staged",
        ],
        &[
            "eval-human",
            "--votes",
            "corpus/votes.csv",
            "--out",
            "staged",
        ],
    ];
    for args in staged {
        let full: Vec<&str> = cfg.iter().chain(args.iter()).copied().collect();
        run_ok(&full, root);
    }

    // Every artifact the staged flow writes must match the `run` output
    // byte for byte; `run` additionally writes config.toml and summary.txt.
    for file in [
        "manifest.dedup.jsonl",
        "dedup_clusters.csv",
        "vocabulary.csv",
        "partitions.csv",
        "prime_units.csv",
        "visualness.csv",
        "layer_profiles.csv",
        "layer_magnitude.csv",
        "salient_words.csv",
        "salient_words.txt",
        "saliency_index.csv",
        "saliency_eval.csv",
        "human_visualness.csv",
        "correlation.csv",
        "correlation.txt",
    ] {
        let a = std::fs::read(root.join("full").join(file)).unwrap();
        let b = std::fs::read(root.join("staged").join(file)).unwrap();
        assert_eq!(a, b, "staged `{file}` differs from the full run");
    }
    assert_eq!(
        dir_digest(&root.join("full").join("saliency")).unwrap(),
        dir_digest(&root.join("staged").join("saliency")).unwrap(),
        "staged saliency maps differ from the full run"
    );
    assert_eq!(
        dir_digest(&root.join("full").join("divergence")).unwrap(),
        dir_digest(&root.join("staged").join("divergence")).unwrap(),
        "staged divergence tables differ from the full run"
    );
}

#[test]
fn missing_stage_inputs_name_the_remedy() {
    let dir = setup();
    let root = dir.path();
    run_ok(
        &[
            "synth",
            "--out",
            "corpus",
            "--spec",
            "spec.toml",
            "--net",
            "net.toml",
            "--annotation-images",
            "0",
        ],
        root,
    );
    std::fs::create_dir(root.join("empty")).unwrap();

    let output = bin()
        .args([
            "visualness",
            "--manifest",
            "corpus/manifest.jsonl",
            "--activations",
            "corpus/activations.actv",
            "--out",
            "empty",
        ])
        .current_dir(root)
        .output()
        .unwrap();
    assert!(!output.status.success());
    let err = String::from_utf8_lossy(&output.stderr);
    assert!(
        err.contains("divergence stage"),
        "stderr does not name the missing stage: {err}"
    );

    let output = bin()
        .args(["run", "--corpus", "empty", "--out", "out"])
        .current_dir(root)
        .output()
        .unwrap();
    assert!(!output.status.success());
    let err = String::from_utf8_lossy(&output.stderr);
    assert!(
        err.contains("manifest.jsonl"),
        "stderr does not name the missing manifest: {err}"
    );
}

#[test]
fn seed_flag_overrides_the_config() {
    let dir = setup();
    let root = dir.path();
    run_ok(
        &[
            "synth",
            "--out",
            "corpus",
            "--spec",
            "spec.toml",
            "--net",
            "net.toml",
            "--annotation-images",
            "0",
        ],
        root,
    );
    for (out, seed) in [("a", "11"), ("b", "11"), ("c", "12")] {
        run_ok(
            &[
                "--config",
                "config.toml",
                "--seed",
                seed,
                "run",
                "--corpus",
                "corpus",
                "--out",
                out,
            ],
            root,
        );
    }
    let digest = |name: &str| dir_digest(&root.join(name)).unwrap();
    assert_eq!(digest("a"), digest("b"), "same seed must reproduce bytes");
    assert_ne!(digest("a"), digest("c"), "seed must steer the pipeline");
}

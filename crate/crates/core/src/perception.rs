//! Human visualness from pairwise annotation votes, and agreement between
//! machine and human scores.
//!
//! Each annotation pair shows one word with two images; `positive_votes` of
//! the `annotators` judges said the word is depicted. A pair counts as
//! visual when strictly more than `theta` judges agreed, and a word's human
//! visualness is the fraction of its pairs that count.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Majority threshold: a pair is visual when votes exceed this.
pub const DEFAULT_THETA: u32 = 3;

/// One annotated pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairVote {
    pub word: String,
    pub pair_index: u32,
    pub positive_votes: u32,
    pub annotators: u32,
}

/// Human visualness of one word.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HumanVisualness {
    pub word: String,
    /// Fraction of pairs with `positive_votes > theta`.
    pub score: f64,
    pub n_pairs: usize,
    pub theta: u32,
}

/// Parses a vote table: CSV rows `word,pair_index,positive_votes,annotators`
/// with an optional header. Blank lines and `#` comments are skipped.
pub fn load_votes(path: &Path) -> Result<Vec<PairVote>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut votes = Vec::new();
    let parse_err = |line: usize, message: String| Error::TableParse {
        path: path.to_path_buf(),
        line,
        message,
    };
    for (idx, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if idx == 0 && line == "word,pair_index,positive_votes,annotators" {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(parse_err(
                idx + 1,
                format!("expected 4 comma-separated fields, got {}", fields.len()),
            ));
        }
        let number = |field: &str, name: &str| -> Result<u32> {
            field.trim().parse().map_err(|_| {
                parse_err(
                    idx + 1,
                    format!("{name} is not a non-negative integer: {field:?}"),
                )
            })
        };
        votes.push(PairVote {
            word: fields[0].trim().to_string(),
            pair_index: number(fields[1], "pair_index")?,
            positive_votes: number(fields[2], "positive_votes")?,
            annotators: number(fields[3], "annotators")?,
        });
    }
    Ok(votes)
}

/// Scores one word's pairs. All votes must belong to the same word, pair
/// indices must be unique, and no pair may have more positive votes than
/// annotators.
pub fn human_visualness(votes: &[PairVote], theta: u32) -> Result<HumanVisualness> {
    if votes.is_empty() {
        return Err(Error::EmptyInput { what: "pair votes" });
    }
    let word = &votes[0].word;
    let mut seen = BTreeSet::new();
    let mut visual = 0usize;
    for vote in votes {
        if &vote.word != word {
            return Err(Error::InvalidInput(format!(
                "human_visualness got votes for both {word:?} and {:?}",
                vote.word
            )));
        }
        if vote.annotators == 0 {
            return Err(Error::InvalidInput(format!(
                "pair {} of {word:?} has zero annotators",
                vote.pair_index
            )));
        }
        if vote.positive_votes > vote.annotators {
            return Err(Error::VotesExceedAnnotators {
                word: word.clone(),
                pair_index: vote.pair_index,
                votes: vote.positive_votes,
                annotators: vote.annotators,
            });
        }
        if !seen.insert(vote.pair_index) {
            return Err(Error::InvalidInput(format!(
                "duplicate pair index {} for {word:?}",
                vote.pair_index
            )));
        }
        if vote.positive_votes > theta {
            visual += 1;
        }
    }
    Ok(HumanVisualness {
        word: word.clone(),
        score: visual as f64 / votes.len() as f64,
        n_pairs: votes.len(),
        theta,
    })
}

/// Groups a vote table by word and scores each.
pub fn human_visualness_all(
    votes: &[PairVote],
    theta: u32,
) -> Result<BTreeMap<String, HumanVisualness>> {
    let mut by_word: BTreeMap<&str, Vec<PairVote>> = BTreeMap::new();
    for vote in votes {
        by_word.entry(&vote.word).or_default().push(vote.clone());
    }
    by_word
        .into_values()
        .map(|group| {
            let scored = human_visualness(&group, theta)?;
            Ok((scored.word.clone(), scored))
        })
        .collect()
}

fn check_sample(x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch {
            what: "correlation samples",
            expected: x.len(),
            actual: y.len(),
        });
    }
    if x.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "correlation needs at least 2 points, got {}",
            x.len()
        )));
    }
    if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            context: "correlation sample".into(),
        });
    }
    Ok(())
}

/// Pearson product-moment correlation. Constant input is an error, not NaN.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    check_sample(x, y)?;
    let n = x.len() as f64;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / n;
    let (mx, my) = (mean(x), mean(y));
    let mut cov = 0.0;
    let mut var_x = 0.0;
    let mut var_y = 0.0;
    for i in 0..x.len() {
        let dx = x[i] - mx;
        let dy = y[i] - my;
        cov += dx * dy;
        var_x += dx * dx;
        var_y += dy * dy;
    }
    if var_x == 0.0 {
        return Err(Error::ConstantInput { what: "x" });
    }
    if var_y == 0.0 {
        return Err(Error::ConstantInput { what: "y" });
    }
    Ok((cov / (var_x * var_y).sqrt()).clamp(-1.0, 1.0))
}

/// 1-based ranks with ties receiving the average of the positions they span.
pub fn fractional_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        // Positions i..=j (0-based) share the average 1-based rank.
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation: Pearson over fractional ranks.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    check_sample(x, y)?;
    pearson(&fractional_ranks(x), &fractional_ranks(y))
}

/// Agreement between machine and human scores over their shared words.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorrelationReport {
    pub n: usize,
    pub pearson: f64,
    pub spearman: f64,
    /// Shared words in the order the correlation consumed them.
    pub words: Vec<String>,
}

/// Joins the two score maps on word and correlates. Fewer than 3 shared
/// words is an error that names the words present on only one side.
pub fn correlation_report(
    machine: &BTreeMap<String, f64>,
    human: &BTreeMap<String, f64>,
) -> Result<CorrelationReport> {
    let mut words = Vec::new();
    let mut x = Vec::new();
    let mut y = Vec::new();
    for (word, &m) in machine {
        if let Some(&h) = human.get(word) {
            words.push(word.clone());
            x.push(m);
            y.push(h);
        }
    }
    if words.len() < 3 {
        let machine_words: BTreeSet<&String> = machine.keys().collect();
        let human_words: BTreeSet<&String> = human.keys().collect();
        let missing = machine_words
            .symmetric_difference(&human_words)
            .map(|w| w.to_string())
            .collect();
        return Err(Error::InsufficientOverlap {
            needed: 3,
            got: words.len(),
            missing,
        });
    }
    Ok(CorrelationReport {
        n: words.len(),
        pearson: pearson(&x, &y)?,
        spearman: spearman(&x, &y)?,
        words,
    })
}

//! Human review of novel generated labels: candidate extraction, judgment
//! bookkeeping, summary statistics and vocabulary export.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::decoding::Prediction;
use crate::error::{Error, Result};
use crate::metrics::Matcher;

/// A predicted label outside the training vocabulary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NovelCandidate {
    pub instance_id: String,
    pub label: String,
    /// 1-based position in the instance's ranking.
    pub rank: usize,
    pub score: f64,
    /// Whether some gold label of the instance matches semantically; `None`
    /// without embeddings.
    pub semantic_match: Option<bool>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictionCategory {
    Correct,
    IncorrectKnown,
    Novel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoldLabel {
    pub label: String,
    pub unseen: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictedLabel {
    pub label: String,
    pub score: f64,
    pub category: PredictionCategory,
}

/// Everything a reviewer sees for one instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewItem {
    pub id: String,
    pub text: String,
    pub gold: Vec<GoldLabel>,
    pub predicted: Vec<PredictedLabel>,
    pub candidates: Vec<NovelCandidate>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReviewRecord {
    pub instance_id: String,
    pub label: String,
    pub sensible: bool,
    pub informative: bool,
    pub reviewer: String,
    /// Seconds since the Unix epoch.
    pub timestamp: u64,
}

/// Builds review items for instances with at least one novel prediction,
/// keyed (and therefore ordered) by instance id. `semantic` decides the
/// `semantic_match` flag when given.
pub fn build_review_items(
    predictions: &[Prediction],
    test: &Corpus,
    seen: &BTreeSet<String>,
    semantic: Option<&Matcher<'_>>,
) -> Result<BTreeMap<String, ReviewItem>> {
    let mut out = BTreeMap::new();
    for p in predictions {
        let inst = test.get(&p.id).ok_or_else(|| Error::UnknownInstance(p.id.clone()))?;
        let mut candidates = Vec::new();
        let mut predicted = Vec::with_capacity(p.predicted.len());
        for (i, s) in p.predicted.iter().enumerate() {
            let category = if inst.has_label(&s.label) {
                PredictionCategory::Correct
            } else if seen.contains(&s.label) {
                PredictionCategory::IncorrectKnown
            } else {
                PredictionCategory::Novel
            };
            predicted.push(PredictedLabel {
                label: s.label.clone(),
                score: s.score,
                category,
            });
            if !seen.contains(&s.label) {
                candidates.push(NovelCandidate {
                    instance_id: p.id.clone(),
                    label: s.label.clone(),
                    rank: i + 1,
                    score: s.score,
                    semantic_match: semantic.map(|m| inst.labels.iter().any(|g| m.soft_match(&s.label, g))),
                });
            }
        }
        if candidates.is_empty() {
            continue;
        }
        let gold = inst
            .labels
            .iter()
            .map(|l| GoldLabel {
                label: l.clone(),
                unseen: !seen.contains(l),
            })
            .collect();
        out.insert(
            p.id.clone(),
            ReviewItem {
                id: p.id.clone(),
                text: inst.text.clone(),
                gold,
                predicted,
                candidates,
            },
        );
    }
    Ok(out)
}

type ReviewKey = (String, String, String);

/// Latest judgment per (reviewer, instance, label).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ReviewBook {
    latest: BTreeMap<ReviewKey, ReviewRecord>,
}

impl ReviewBook {
    pub fn apply(&mut self, record: ReviewRecord) {
        let key = (record.reviewer.clone(), record.instance_id.clone(), record.label.clone());
        self.latest.insert(key, record);
    }

    pub fn records(&self) -> impl Iterator<Item = &ReviewRecord> {
        self.latest.values()
    }

    pub fn len(&self) -> usize {
        self.latest.len()
    }

    pub fn is_empty(&self) -> bool {
        self.latest.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsRow {
    /// `"yes"`, `"no"` or `"total"`.
    pub semantic_match: String,
    /// Reviewed candidates in this row.
    pub n_labels: usize,
    /// Judgments counted (one per reviewer per candidate).
    pub judgments: usize,
    pub sensible: usize,
    pub informative: usize,
    pub sensible_fraction: Option<f64>,
    pub informative_fraction: Option<f64>,
    pub sensible_pct: Option<u32>,
    pub informative_pct: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Coverage {
    pub reviewed: usize,
    pub total: usize,
    pub fraction: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewStats {
    pub rows: Vec<StatsRow>,
    pub coverage: Coverage,
}

fn stats_row(name: &str, judged: &[(&NovelCandidate, &ReviewRecord)]) -> StatsRow {
    let n_labels = judged
        .iter()
        .map(|(c, _)| (&c.instance_id, &c.label))
        .collect::<BTreeSet<_>>()
        .len();
    let judgments = judged.len();
    let sensible = judged.iter().filter(|(_, r)| r.sensible).count();
    let informative = judged.iter().filter(|(_, r)| r.informative).count();
    let fraction = |k: usize| (judgments > 0).then(|| k as f64 / judgments as f64);
    let pct = |f: Option<f64>| f.map(|f| (f * 100.0).round() as u32);
    StatsRow {
        semantic_match: name.into(),
        n_labels,
        judgments,
        sensible,
        informative,
        sensible_fraction: fraction(sensible),
        informative_fraction: fraction(informative),
        sensible_pct: pct(fraction(sensible)),
        informative_pct: pct(fraction(informative)),
    }
}

/// Sensible / informative rates over reviewed candidates, split by
/// semantic match when any candidate carries that flag.
pub fn review_stats(items: &BTreeMap<String, ReviewItem>, book: &ReviewBook) -> ReviewStats {
    let candidates: BTreeMap<(&str, &str), &NovelCandidate> = items
        .values()
        .flat_map(|it| it.candidates.iter())
        .map(|c| ((c.instance_id.as_str(), c.label.as_str()), c))
        .collect();
    let judged: Vec<(&NovelCandidate, &ReviewRecord)> = book
        .records()
        .filter_map(|r| candidates.get(&(r.instance_id.as_str(), r.label.as_str())).map(|c| (*c, r)))
        .collect();
    let mut rows = Vec::new();
    if candidates.values().any(|c| c.semantic_match.is_some()) {
        for (name, flag) in [("yes", true), ("no", false)] {
            let part: Vec<_> = judged.iter().copied().filter(|(c, _)| c.semantic_match == Some(flag)).collect();
            rows.push(stats_row(name, &part));
        }
    }
    let total = stats_row("total", &judged);
    let coverage = Coverage {
        reviewed: total.n_labels,
        total: candidates.len(),
        fraction: (!candidates.is_empty()).then(|| total.n_labels as f64 / candidates.len() as f64),
    };
    rows.push(total);
    ReviewStats { rows, coverage }
}

/// Labels judged sensible by at least one reviewer, deduplicated and sorted.
pub fn export_accepted(book: &ReviewBook) -> Vec<String> {
    book.records()
        .filter(|r| r.sensible)
        .map(|r| r.label.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect()
}

/// Checks that a record refers to a served candidate.
pub fn validate_record(items: &BTreeMap<String, ReviewItem>, record: &ReviewRecord) -> Result<()> {
    let known = items
        .get(&record.instance_id)
        .is_some_and(|it| it.candidates.iter().any(|c| c.label == record.label));
    if known {
        Ok(())
    } else {
        Err(Error::UnknownInstance(format!(
            "no novel candidate {:?} for instance {:?}",
            record.label, record.instance_id
        )))
    }
}

/// Append-only JSON-lines store of review records.
#[derive(Debug)]
pub struct ReviewStore {
    path: PathBuf,
    file: File,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ReplayStats {
    pub applied: usize,
    /// Records whose candidate no longer exists.
    pub skipped: usize,
}

impl ReviewStore {
    /// Opens (creating if needed) the store and replays it into a book.
    pub fn open(path: impl AsRef<Path>, items: &BTreeMap<String, ReviewItem>) -> Result<(Self, ReviewBook, ReplayStats)> {
        let path = path.as_ref().to_path_buf();
        let mut book = ReviewBook::default();
        let mut stats = ReplayStats::default();
        if path.exists() {
            for (i, line) in BufReader::new(File::open(&path)?).lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let record: ReviewRecord = serde_json::from_str(&line).map_err(|e| Error::MalformedRecord {
                    path: path.clone(),
                    line: i + 1,
                    reason: e.to_string(),
                })?;
                if validate_record(items, &record).is_ok() {
                    book.apply(record);
                    stats.applied += 1;
                } else {
                    stats.skipped += 1;
                }
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        Ok((ReviewStore { path, file }, book, stats))
    }

    pub fn append(&mut self, record: &ReviewRecord) -> Result<()> {
        let mut line = serde_json::to_vec(record)?;
        line.push(b'\n');
        self.file.write_all(&line)?;
        self.file.flush()?;
        Ok(())
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

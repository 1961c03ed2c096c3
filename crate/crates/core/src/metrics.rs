//! Ranking metrics over predictions: P@K, R@K, PSP@K, unseen-label P/R@K,
//! NLSR@K, and soft lexical / semantic matching.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::{self, Write as _};
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering as AtomicOrdering};

use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Instance};
use crate::decoding::Prediction;
use crate::error::{Error, Result};
use crate::exec::Exec;

pub const DEFAULT_DF: f64 = 10.0;
pub const DEFAULT_SEMANTIC_THRESHOLD: f64 = 0.94;
pub const DEFAULT_PROPENSITY_A: f64 = 0.55;
pub const DEFAULT_PROPENSITY_B: f64 = 1.5;
pub const DEFAULT_KS: [usize; 3] = [1, 3, 5];

/// Unit-cost edit distance over Unicode scalar values.
pub fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Source of label vectors for semantic matching.
pub trait EmbeddingProvider: Sync {
    fn embedding(&self, label: &str) -> Option<&[f64]>;
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Embeddings {
    vectors: HashMap<String, Vec<f64>>,
    dim: usize,
}

impl Embeddings {
    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, Vec<f64>)>) -> Result<Self> {
        let mut out = Embeddings::default();
        for (label, vector) in pairs {
            out.insert(label, vector)?;
        }
        Ok(out)
    }

    fn insert(&mut self, label: String, vector: Vec<f64>) -> Result<()> {
        if vector.is_empty() || vector.iter().any(|v| !v.is_finite()) {
            return Err(Error::Embeddings(format!("vector for {label:?} is empty or non-finite")));
        }
        if self.vectors.is_empty() {
            self.dim = vector.len();
        } else if vector.len() != self.dim {
            return Err(Error::Embeddings(format!(
                "vector for {label:?} has length {}, expected {}",
                vector.len(),
                self.dim
            )));
        }
        if self.vectors.insert(label.clone(), vector).is_some() {
            return Err(Error::Embeddings(format!("duplicate label {label:?}")));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
}

impl EmbeddingProvider for Embeddings {
    fn embedding(&self, label: &str) -> Option<&[f64]> {
        self.vectors.get(label).map(Vec::as_slice)
    }
}

#[derive(Deserialize)]
struct EmbeddingRecord {
    label: String,
    vector: Vec<f64>,
}

/// Reads `{"label": ..., "vector": [...]}` lines.
pub fn load_embeddings(path: impl AsRef<Path>) -> Result<Embeddings> {
    let path = path.as_ref();
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut out = Embeddings::default();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: EmbeddingRecord = serde_json::from_str(&line).map_err(|e| Error::MalformedRecord {
            path: path.to_path_buf(),
            line: i + 1,
            reason: e.to_string(),
        })?;
        out.insert(rec.label, rec.vector)?;
    }
    Ok(out)
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MatchRule {
    Exact,
    /// Edit distance below `|pred| / df + 1`.
    Lexical { df: f64 },
    /// Cosine similarity of label embeddings at or above `threshold`.
    Semantic { threshold: f64 },
}

impl MatchRule {
    pub fn validate(&self) -> Result<()> {
        match *self {
            MatchRule::Lexical { df } if !(df > 0.0 && df.is_finite()) => {
                Err(Error::Config(format!("lexical DF must be positive, got {df}")))
            }
            MatchRule::Semantic { threshold } if !(threshold > 0.0 && threshold <= 1.0) => {
                Err(Error::Config(format!("semantic threshold must be in (0, 1], got {threshold}")))
            }
            _ => Ok(()),
        }
    }
}

impl FromStr for MatchRule {
    type Err = Error;

    /// `exact`, `lexical[:DF]` or `semantic[:THRESHOLD]`.
    fn from_str(s: &str) -> Result<Self> {
        let (kind, arg) = match s.split_once(':') {
            Some((k, a)) => (k, Some(a)),
            None => (s, None),
        };
        let number = |default: f64| -> Result<f64> {
            match arg {
                None => Ok(default),
                Some(a) => a.parse().map_err(|_| Error::Config(format!("bad number in rule {s:?}"))),
            }
        };
        let rule = match kind {
            "exact" if arg.is_none() => MatchRule::Exact,
            "lexical" => MatchRule::Lexical { df: number(DEFAULT_DF)? },
            "semantic" => MatchRule::Semantic {
                threshold: number(DEFAULT_SEMANTIC_THRESHOLD)?,
            },
            _ => return Err(Error::Config(format!("unknown match rule {s:?}"))),
        };
        rule.validate()?;
        Ok(rule)
    }
}

impl fmt::Display for MatchRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MatchRule::Exact => f.write_str("exact"),
            MatchRule::Lexical { df } => write!(f, "lexical:{df}"),
            MatchRule::Semantic { threshold } => write!(f, "semantic:{threshold}"),
        }
    }
}

/// A rule bound to its embeddings, counting label pairs that could not be
/// compared because an embedding was missing.
pub struct Matcher<'a> {
    rule: MatchRule,
    embeddings: Option<&'a dyn EmbeddingProvider>,
    misses: AtomicUsize,
}

impl<'a> Matcher<'a> {
    pub fn new(rule: MatchRule, embeddings: Option<&'a dyn EmbeddingProvider>) -> Result<Self> {
        rule.validate()?;
        if matches!(rule, MatchRule::Semantic { .. }) && embeddings.is_none() {
            return Err(Error::Embeddings(format!("rule {rule} needs an embeddings file")));
        }
        Ok(Matcher {
            rule,
            embeddings,
            misses: AtomicUsize::new(0),
        })
    }

    pub fn exact() -> Matcher<'static> {
        Matcher {
            rule: MatchRule::Exact,
            embeddings: None,
            misses: AtomicUsize::new(0),
        }
    }

    pub fn rule(&self) -> MatchRule {
        self.rule
    }

    pub fn misses(&self) -> usize {
        self.misses.load(AtomicOrdering::Relaxed)
    }

    fn similarity(&self, pred: &str, gold: &str) -> Option<f64> {
        let emb = self.embeddings?;
        match (emb.embedding(pred), emb.embedding(gold)) {
            (Some(a), Some(b)) => Some(cosine_similarity(a, b)),
            _ => {
                self.misses.fetch_add(1, AtomicOrdering::Relaxed);
                None
            }
        }
    }

    pub fn soft_match(&self, pred: &str, gold: &str) -> bool {
        if pred == gold {
            return true;
        }
        match self.rule {
            MatchRule::Exact => false,
            MatchRule::Lexical { df } => (levenshtein(pred, gold) as f64) < pred.chars().count() as f64 / df + 1.0,
            MatchRule::Semantic { threshold } => self.similarity(pred, gold).is_some_and(|s| s >= threshold),
        }
    }

    /// Among golds satisfying the rule, smaller is preferred.
    fn closeness(&self, pred: &str, gold: &str) -> f64 {
        match self.rule {
            MatchRule::Exact => 0.0,
            MatchRule::Lexical { .. } => levenshtein(pred, gold) as f64,
            MatchRule::Semantic { .. } => self
                .embeddings
                .and_then(|e| Some(-cosine_similarity(e.embedding(pred)?, e.embedding(gold)?)))
                .unwrap_or(0.0),
        }
    }
}

/// One-to-one greedy matching in rank order. Entry `i` is the index into
/// `gold` matched by `predicted[i]`. Each prediction takes an identical gold
/// label when one is free, otherwise the closest free gold label satisfying
/// the rule, ties broken lexicographically.
pub fn match_sets<S: AsRef<str>, G: AsRef<str>>(predicted: &[S], gold: &[G], matcher: &Matcher<'_>) -> Vec<Option<usize>> {
    let mut consumed = vec![false; gold.len()];
    let mut out = Vec::with_capacity(predicted.len());
    for pred in predicted {
        let pred = pred.as_ref();
        let identical = (0..gold.len()).find(|&g| !consumed[g] && gold[g].as_ref() == pred);
        let choice = identical.or_else(|| {
            (0..gold.len())
                .filter(|&g| !consumed[g] && matcher.soft_match(pred, gold[g].as_ref()))
                .map(|g| (matcher.closeness(pred, gold[g].as_ref()), g))
                .min_by(|a, b| {
                    a.0.partial_cmp(&b.0)
                        .unwrap_or(Ordering::Equal)
                        .then_with(|| gold[a.1].as_ref().cmp(gold[b.1].as_ref()))
                })
                .map(|(_, g)| g)
        });
        if let Some(g) = choice {
            consumed[g] = true;
        }
        out.push(choice);
    }
    out
}

/// `(P@K, R@K)`; recall is `None` for an empty gold set.
pub fn precision_recall_at_k<S: AsRef<str>, G: AsRef<str>>(
    predicted: &[S],
    gold: &[G],
    k: usize,
    matcher: &Matcher<'_>,
) -> Result<(f64, Option<f64>)> {
    if k == 0 {
        return Err(Error::Config("K must be at least 1".into()));
    }
    let top = &predicted[..k.min(predicted.len())];
    let hits = match_sets(top, gold, matcher).iter().filter(|m| m.is_some()).count() as f64;
    let recall = (!gold.is_empty()).then(|| hits / gold.len() as f64);
    Ok((hits / k as f64, recall))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropensityModel {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub n_train: usize,
    frequency: HashMap<String, usize>,
}

impl PropensityModel {
    /// Propensity of a label; labels absent from training count as frequency 0.
    pub fn propensity(&self, label: &str) -> f64 {
        let f = self.frequency.get(label).copied().unwrap_or(0);
        self.propensity_of_frequency(f)
    }

    pub fn propensity_of_frequency(&self, f: usize) -> f64 {
        1.0 / (1.0 + self.c * (-self.a * (f as f64 + self.b).ln()).exp())
    }
}

pub fn compute_propensities(
    train_frequency: &BTreeMap<String, usize>,
    n_train: usize,
    a: f64,
    b: f64,
) -> Result<PropensityModel> {
    if n_train == 0 {
        return Err(Error::Config("propensities need at least one training instance".into()));
    }
    // Below e training instances the formula gives C < 0 and propensities
    // above 1; clamp so every label gets propensity 1 instead.
    let c = (((n_train as f64).ln() - 1.0) * (b + 1.0).powf(a)).max(0.0);
    Ok(PropensityModel {
        a,
        b,
        c,
        n_train,
        frequency: train_frequency.iter().map(|(l, &f)| (l.clone(), f)).collect(),
    })
}

/// Propensity-scored precision at K under exact matching, normalized by the
/// best score reachable on this gold set. `None` for an empty gold set.
pub fn psp_at_k<S: AsRef<str>, G: AsRef<str>>(
    predicted: &[S],
    gold: &[G],
    prop: &PropensityModel,
    k: usize,
) -> Result<Option<f64>> {
    if k == 0 {
        return Err(Error::Config("K must be at least 1".into()));
    }
    if gold.is_empty() {
        return Ok(None);
    }
    let top = &predicted[..k.min(predicted.len())];
    let matcher = Matcher::exact();
    let numerator: f64 = match_sets(top, gold, &matcher)
        .iter()
        .zip(top)
        .filter(|(m, _)| m.is_some())
        .map(|(_, p)| 1.0 / prop.propensity(p.as_ref()))
        .sum();
    let mut inverse: Vec<f64> = gold.iter().map(|g| 1.0 / prop.propensity(g.as_ref())).collect();
    inverse.sort_by(|a, b| b.partial_cmp(a).unwrap_or(Ordering::Equal));
    let denominator: f64 = inverse.iter().take(k.min(gold.len())).sum();
    Ok(Some(numerator / denominator))
}

/// Labels not in `seen`, rank order preserved.
pub fn unseen_projection<'a, S: AsRef<str>>(labels: &'a [S], seen: &BTreeSet<String>) -> Vec<&'a str> {
    labels
        .iter()
        .map(AsRef::as_ref)
        .filter(|l| !seen.contains(*l))
        .collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct NlsrOptions {
    /// Count pooled predictions outside the gold union too (can exceed 1).
    pub raw: bool,
    /// Take each instance's top-K unseen labels in lexicographic order
    /// instead of prediction order.
    pub lexicographic: bool,
}

/// Novel label set recall: the pooled top-K unseen predictions over all
/// instances, as a fraction of the union of unseen gold labels.
pub fn nlsr_at_k<S: AsRef<str>>(
    predictions: &[Vec<S>],
    gold_unseen_union: &BTreeSet<String>,
    seen: &BTreeSet<String>,
    k: usize,
    options: NlsrOptions,
) -> Result<f64> {
    if gold_unseen_union.is_empty() {
        return Err(Error::Undefined("NLSR needs at least one unseen gold label".into()));
    }
    let mut pooled: BTreeSet<&str> = BTreeSet::new();
    for ranked in predictions {
        let mut unseen = unseen_projection(ranked, seen);
        if options.lexicographic {
            unseen.sort_unstable();
        }
        pooled.extend(unseen.into_iter().take(k));
    }
    let numerator = if options.raw {
        pooled.len()
    } else {
        pooled.iter().filter(|l| gold_unseen_union.contains(**l)).count()
    };
    Ok(numerator as f64 / gold_unseen_union.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub ks: Vec<usize>,
    pub rules: Vec<MatchRule>,
    pub propensity_a: f64,
    pub propensity_b: f64,
    pub nlsr: NlsrOptions,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            ks: DEFAULT_KS.to_vec(),
            rules: vec![MatchRule::Exact],
            propensity_a: DEFAULT_PROPENSITY_A,
            propensity_b: DEFAULT_PROPENSITY_B,
            nlsr: NlsrOptions::default(),
        }
    }
}

/// Metric values keyed by K.
pub type AtK = BTreeMap<usize, f64>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuleScores {
    pub rule: String,
    pub precision: AtK,
    pub recall: AtK,
    pub embedding_misses: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ks: Vec<usize>,
    pub instances: usize,
    /// Test instances with no prediction record, scored as empty predictions.
    pub missing_predictions: usize,
    /// Instances with empty gold sets, excluded from recall and PSP.
    pub empty_gold: usize,
    /// Instances with at least one unseen gold label; the population for
    /// unseen P/R.
    pub unseen_instances: usize,
    /// Predicted labels outside the seen set, summed over instances.
    pub novel_predictions: usize,
    pub rules: Vec<RuleScores>,
    pub psp: AtK,
    pub unseen_precision: AtK,
    pub unseen_recall: AtK,
    /// `None` when the test set has no unseen gold labels.
    pub nlsr: Option<AtK>,
}

impl EvalReport {
    pub fn rule(&self, name: &str) -> Option<&RuleScores> {
        self.rules.iter().find(|r| r.rule == name)
    }

    /// One row per metric, one column per K.
    pub fn table(&self) -> String {
        let mut out = String::new();
        let _ = write!(out, "{:<24}", "metric");
        for k in &self.ks {
            let _ = write!(out, "{:>10}", format!("@{k}"));
        }
        out.push('\n');
        let mut row = |name: String, values: &AtK| {
            let _ = write!(out, "{name:<24}");
            for k in &self.ks {
                let _ = write!(out, "{:>10.4}", values.get(k).copied().unwrap_or(f64::NAN));
            }
            out.push('\n');
        };
        for r in &self.rules {
            row(format!("P ({})", r.rule), &r.precision);
            row(format!("R ({})", r.rule), &r.recall);
        }
        row("PSP".into(), &self.psp);
        row("unseen P".into(), &self.unseen_precision);
        row("unseen R".into(), &self.unseen_recall);
        if let Some(n) = &self.nlsr {
            row("NLSR".into(), n);
        }
        out
    }
}

struct InstanceScores {
    /// Per rule, per K: (precision, recall).
    rules: Vec<Vec<(f64, Option<f64>)>>,
    psp: Vec<Option<f64>>,
    unseen: Option<Vec<(f64, f64)>>,
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Scores `predictions` against `test`. `seen` is the training label set and
/// `prop` the training propensities.
pub fn evaluate(
    predictions: &[Prediction],
    test: &Corpus,
    seen: &BTreeSet<String>,
    prop: &PropensityModel,
    config: &EvalConfig,
    embeddings: Option<&dyn EmbeddingProvider>,
    exec: Exec,
) -> Result<EvalReport> {
    if config.ks.is_empty() || config.ks.contains(&0) {
        return Err(Error::Config("K values must be at least 1".into()));
    }
    let mut by_id: HashMap<&str, Vec<&str>> = HashMap::with_capacity(predictions.len());
    for p in predictions {
        if test.get(&p.id).is_none() {
            return Err(Error::UnknownInstance(p.id.clone()));
        }
        by_id.insert(&p.id, p.labels().collect());
    }
    let matchers = config
        .rules
        .iter()
        .map(|&r| Matcher::new(r, embeddings))
        .collect::<Result<Vec<_>>>()?;
    let empty: Vec<&str> = Vec::new();
    let exact = Matcher::exact();

    let score = |inst: &Instance| -> Result<InstanceScores> {
        let ranked = by_id.get(inst.id.as_str()).unwrap_or(&empty);
        let gold = &inst.labels;
        let mut rules = Vec::with_capacity(matchers.len());
        for m in &matchers {
            rules.push(
                config
                    .ks
                    .iter()
                    .map(|&k| precision_recall_at_k(ranked, gold, k, m))
                    .collect::<Result<Vec<_>>>()?,
            );
        }
        let psp = config
            .ks
            .iter()
            .map(|&k| psp_at_k(ranked, gold, prop, k))
            .collect::<Result<Vec<_>>>()?;
        let unseen_gold = unseen_projection(gold, seen);
        let unseen = if unseen_gold.is_empty() {
            None
        } else {
            let unseen_pred = unseen_projection(ranked, seen);
            let mut v = Vec::with_capacity(config.ks.len());
            for &k in &config.ks {
                let (p, r) = precision_recall_at_k(&unseen_pred, &unseen_gold, k, &exact)?;
                v.push((p, r.unwrap_or(0.0)));
            }
            Some(v)
        };
        Ok(InstanceScores { rules, psp, unseen })
    };
    let scores = exec
        .map(&test.instances, |inst| score(inst))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;

    let column = |f: &dyn Fn(usize) -> f64| -> AtK { config.ks.iter().enumerate().map(|(i, &k)| (k, f(i))).collect() };
    let rules = matchers
        .iter()
        .enumerate()
        .map(|(r, m)| RuleScores {
            rule: m.rule().to_string(),
            precision: column(&|i| mean(scores.iter().map(|s| s.rules[r][i].0))),
            recall: column(&|i| mean(scores.iter().filter_map(|s| s.rules[r][i].1))),
            embedding_misses: m.misses(),
        })
        .collect();
    let psp = column(&|i| mean(scores.iter().filter_map(|s| s.psp[i])));
    let unseen_precision = column(&|i| mean(scores.iter().filter_map(|s| s.unseen.as_ref().map(|u| u[i].0))));
    let unseen_recall = column(&|i| mean(scores.iter().filter_map(|s| s.unseen.as_ref().map(|u| u[i].1))));

    let gold_unseen_union: BTreeSet<String> = test
        .instances
        .iter()
        .flat_map(|i| i.labels.iter())
        .filter(|l| !seen.contains(*l))
        .cloned()
        .collect();
    let nlsr = if gold_unseen_union.is_empty() {
        None
    } else {
        let ranked: Vec<Vec<&str>> = test
            .instances
            .iter()
            .map(|i| by_id.get(i.id.as_str()).cloned().unwrap_or_default())
            .collect();
        let mut at_k = AtK::new();
        for &k in &config.ks {
            at_k.insert(k, nlsr_at_k(&ranked, &gold_unseen_union, seen, k, config.nlsr)?);
        }
        Some(at_k)
    };

    Ok(EvalReport {
        ks: config.ks.clone(),
        instances: test.len(),
        missing_predictions: test.instances.iter().filter(|i| !by_id.contains_key(i.id.as_str())).count(),
        empty_gold: test.instances.iter().filter(|i| i.labels.is_empty()).count(),
        unseen_instances: scores.iter().filter(|s| s.unseen.is_some()).count(),
        novel_predictions: by_id.values().map(|r| unseen_projection(r, seen).len()).sum(),
        rules,
        psp,
        unseen_precision,
        unseen_recall,
        nlsr,
    })
}

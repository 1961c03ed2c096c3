//! Greedy and beam decoding, label splitting and marginal label scores.

use std::cmp::Ordering;
use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::Instance;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::label_trie::TokenSet;
use crate::model::{DecoderCache, EncoderState, Model, Real};
use crate::tokenizer::{decode, encode_text, is_byte, TokenId, BOS, EOS, SEP, VOCAB_SIZE};

pub const DEFAULT_BEAM_SIZE: usize = 15;

/// Tokens a decoder may emit: every byte plus SEP and EOS.
pub fn output_tokens() -> TokenSet {
    (0..256).chain([SEP, EOS]).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeOptions {
    /// Maximum number of generated tokens, EOS included. Clamped to the
    /// model's `max_output_len`.
    pub max_len: usize,
    /// Tokens outside this set get zero probability.
    pub allowed: TokenSet,
}

impl DecodeOptions {
    pub fn for_model<T: Real>(model: &Model<T>) -> Self {
        DecodeOptions {
            max_len: model.config.max_output_len,
            allowed: output_tokens(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Beam {
    pub tokens: Vec<TokenId>,
    pub log_prob: f64,
    /// Hit `max_len` without emitting EOS.
    pub truncated: bool,
}

impl Beam {
    pub fn labels(&self) -> Vec<String> {
        split_labels(&self.tokens)
    }

    /// Human-readable rendering with separators shown as `<sep>`.
    pub fn text(&self) -> String {
        let mut out = String::new();
        for seg in self.tokens.split(|&t| t == SEP).enumerate() {
            if seg.0 > 0 {
                out.push_str("<sep>");
            }
            let bytes: Vec<TokenId> = seg.1.iter().copied().filter(|&t| is_byte(t)).collect();
            out.push_str(&decode(&bytes));
        }
        out
    }
}

/// Log-softmax over the allowed tokens, in f64; disallowed ids get -inf.
fn masked_log_softmax<T: Real>(logits: &[T], allowed: &TokenSet) -> Vec<f64> {
    let mut out = vec![f64::NEG_INFINITY; VOCAB_SIZE];
    let mut max = f64::NEG_INFINITY;
    for tok in allowed.iter() {
        let v = logits[tok as usize].to_f64().unwrap_or(f64::NAN);
        out[tok as usize] = v;
        max = max.max(v);
    }
    let sum: f64 = allowed.iter().map(|t| (out[t as usize] - max).exp()).sum();
    let lse = max + sum.ln();
    for tok in allowed.iter() {
        out[tok as usize] -= lse;
    }
    out
}

fn check_options<T: Real>(model: &Model<T>, opts: &DecodeOptions) -> Result<usize> {
    if opts.allowed.is_empty() {
        return Err(Error::EmptyIndexSet);
    }
    if opts.allowed.contains(BOS) || opts.allowed.iter().any(|t| t as usize >= VOCAB_SIZE) {
        return Err(Error::Config("BOS and out-of-vocabulary ids cannot be decoded".into()));
    }
    Ok(opts.max_len.min(model.config.max_output_len))
}

/// Argmax decoding until EOS or `max_len`; ties go to the lowest token id.
pub fn greedy_decode<T: Real>(model: &Model<T>, input: &[TokenId], opts: &DecodeOptions) -> Result<Vec<TokenId>> {
    let max_len = check_options(model, opts)?;
    let enc = model.encode(input)?;
    let mut cache = model.new_decoder_cache();
    let mut out = Vec::new();
    let mut prev = BOS;
    let mut cum = 0f64;
    while out.len() < max_len {
        let logp = masked_log_softmax(&model.decode_step(&enc, &mut cache, prev)?, &opts.allowed);
        // Same arithmetic as the beam candidates so that B=1 agrees exactly.
        let mut best: Option<(f64, TokenId)> = None;
        for tok in opts.allowed.iter() {
            let score = cum + logp[tok as usize];
            if best.is_none_or(|(b, _)| score > b) {
                best = Some((score, tok));
            }
        }
        let (score, tok) = best.expect("allowed set is non-empty");
        cum = score;
        out.push(tok);
        if tok == EOS {
            break;
        }
        prev = tok;
    }
    Ok(out)
}

/// Splits a generated sequence into labels: strips EOS, splits on SEP, drops
/// empty segments and repeated labels.
pub fn split_labels(tokens: &[TokenId]) -> Vec<String> {
    let body = match tokens.iter().position(|&t| t == EOS) {
        Some(end) => &tokens[..end],
        None => tokens,
    };
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for seg in body.split(|&t| t == SEP) {
        let bytes: Vec<TokenId> = seg.iter().copied().filter(|&t| is_byte(t)).collect();
        if bytes.is_empty() {
            continue;
        }
        let label = decode(&bytes);
        if seen.insert(label.clone()) {
            out.push(label);
        }
    }
    out
}

struct Live<T> {
    tokens: Vec<TokenId>,
    log_prob: f64,
    cache: DecoderCache<T>,
}

fn finished_order(a: &Beam, b: &Beam) -> Ordering {
    b.log_prob
        .partial_cmp(&a.log_prob)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.tokens.cmp(&b.tokens))
}

/// Length-unnormalized beam search. Returns at most `beam_size` finished
/// beams sorted by log-probability, best first.
pub fn beam_search<T: Real>(
    model: &Model<T>,
    input: &[TokenId],
    beam_size: usize,
    opts: &DecodeOptions,
) -> Result<Vec<Beam>> {
    if beam_size == 0 {
        return Err(Error::Config("beam size must be at least 1".into()));
    }
    let max_len = check_options(model, opts)?;
    let enc: EncoderState<T> = model.encode(input)?;
    let mut live = vec![Live {
        tokens: Vec::new(),
        log_prob: 0.0,
        cache: model.new_decoder_cache(),
    }];
    let mut finished: Vec<Beam> = Vec::new();

    for step in 0..max_len {
        let mut candidates: Vec<(f64, usize, TokenId)> = Vec::new();
        for (rank, beam) in live.iter_mut().enumerate() {
            let prev = beam.tokens.last().copied().unwrap_or(BOS);
            let logp = masked_log_softmax(&model.decode_step(&enc, &mut beam.cache, prev)?, &opts.allowed);
            for tok in opts.allowed.iter() {
                candidates.push((beam.log_prob + logp[tok as usize], rank, tok));
            }
        }
        candidates.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap_or(Ordering::Equal)
                .then(a.1.cmp(&b.1))
                .then(a.2.cmp(&b.2))
        });

        let mut next: Vec<Live<T>> = Vec::with_capacity(beam_size);
        for (lp, rank, tok) in candidates {
            if next.len() >= beam_size {
                break;
            }
            let mut tokens = live[rank].tokens.clone();
            tokens.push(tok);
            if tok == EOS {
                finished.push(Beam { tokens, log_prob: lp, truncated: false });
            } else {
                next.push(Live {
                    tokens,
                    log_prob: lp,
                    cache: live[rank].cache.clone(),
                });
            }
        }
        live = next;

        if step + 1 == max_len {
            finished.extend(live.drain(..).map(|l| Beam {
                tokens: l.tokens,
                log_prob: l.log_prob,
                truncated: true,
            }));
        }
        if live.is_empty() {
            break;
        }
        if finished.len() >= beam_size {
            finished.sort_by(finished_order);
            let worst_kept = finished[beam_size - 1].log_prob;
            // Extending a beam can only lower its log-probability.
            if live[0].log_prob <= worst_kept {
                break;
            }
        }
    }
    finished.sort_by(finished_order);
    finished.truncate(beam_size);
    Ok(finished)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredLabel {
    pub label: String,
    pub score: f64,
}

/// Sum of beam probabilities per label, best first, ties by label. With
/// `normalize`, scores are divided by the total probability of the beams.
pub fn marginal_scores(beams: &[Beam], normalize: bool) -> Vec<ScoredLabel> {
    let mut scores: HashMap<String, f64> = HashMap::new();
    for beam in beams {
        let p = beam.log_prob.exp();
        for label in beam.labels() {
            *scores.entry(label).or_default() += p;
        }
    }
    let mass: f64 = beams.iter().map(|b| b.log_prob.exp()).sum();
    let mut out: Vec<ScoredLabel> = scores
        .into_iter()
        .map(|(label, score)| ScoredLabel {
            label,
            score: if normalize && mass > 0.0 { score / mass } else { score },
        })
        .collect();
    out.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap_or(Ordering::Equal)
            .then_with(|| a.label.cmp(&b.label))
    });
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankingMode {
    GenerationOrder,
    Marginal,
}

impl FromStr for RankingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "generation" | "generation_order" => Ok(RankingMode::GenerationOrder),
            "marginal" => Ok(RankingMode::Marginal),
            other => Err(Error::Config(format!(
                "unknown ranking mode {other:?} (expected generation or marginal)"
            ))),
        }
    }
}

impl fmt::Display for RankingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RankingMode::GenerationOrder => "generation_order",
            RankingMode::Marginal => "marginal",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeamRecord {
    pub text: String,
    pub log_prob: f64,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub truncated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub ranking_mode: RankingMode,
    pub predicted: Vec<ScoredLabel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beams: Option<Vec<BeamRecord>>,
}

impl Prediction {
    pub fn labels(&self) -> impl Iterator<Item = &str> {
        self.predicted.iter().map(|p| p.label.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictConfig {
    pub beam_size: usize,
    pub ranking_mode: RankingMode,
    pub normalize_marginals: bool,
    /// Attach the decoded beams (or the greedy sequence) to each prediction.
    pub keep_beams: bool,
}

impl Default for PredictConfig {
    fn default() -> Self {
        PredictConfig {
            beam_size: DEFAULT_BEAM_SIZE,
            ranking_mode: RankingMode::Marginal,
            normalize_marginals: false,
            keep_beams: true,
        }
    }
}

fn record(beam: &Beam) -> BeamRecord {
    BeamRecord {
        text: beam.text(),
        log_prob: beam.log_prob,
        truncated: beam.truncated,
    }
}

pub fn predict<T: Real>(
    model: &Model<T>,
    instance: &Instance,
    config: &PredictConfig,
    opts: &DecodeOptions,
) -> Result<Prediction> {
    let input = encode_text(&instance.text, model.config.max_input_len);
    let (predicted, beams) = match config.ranking_mode {
        RankingMode::GenerationOrder => {
            let tokens = greedy_decode(model, &input, opts)?;
            let ranked = split_labels(&tokens)
                .into_iter()
                .enumerate()
                .map(|(i, label)| ScoredLabel { label, score: 1.0 / (i + 1) as f64 })
                .collect();
            let truncated = tokens.last() != Some(&EOS);
            let beam = Beam { tokens, log_prob: f64::NAN, truncated };
            (ranked, vec![beam])
        }
        RankingMode::Marginal => {
            let beams = beam_search(model, &input, config.beam_size, opts)?;
            (marginal_scores(&beams, config.normalize_marginals), beams)
        }
    };
    let beams = config.keep_beams.then(|| {
        beams
            .iter()
            .filter(|b| !b.log_prob.is_nan())
            .map(record)
            .collect()
    });
    Ok(Prediction {
        id: instance.id.clone(),
        ranking_mode: config.ranking_mode,
        predicted,
        beams,
    })
}

/// Decodes every instance; output order follows the input.
pub fn predict_all<T: Real>(
    model: &Model<T>,
    instances: &[Instance],
    config: &PredictConfig,
    exec: Exec,
) -> Result<Vec<Prediction>> {
    let opts = DecodeOptions::for_model(model);
    exec.map(instances, |inst| predict(model, inst, config, &opts))
        .into_iter()
        .collect()
}

pub fn write_predictions(predictions: &[Prediction], out: &mut impl Write) -> Result<()> {
    for p in predictions {
        serde_json::to_writer(&mut *out, p)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn save_predictions(predictions: &[Prediction], path: impl AsRef<Path>) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_predictions(predictions, &mut out)?;
    out.flush()?;
    Ok(())
}

pub fn load_predictions(path: impl AsRef<Path>) -> Result<Vec<Prediction>> {
    let path = path.as_ref();
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    let mut ids = HashMap::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let p: Prediction = serde_json::from_str(&line).map_err(|e| Error::MalformedRecord {
            path: path.to_path_buf(),
            line: i + 1,
            reason: e.to_string(),
        })?;
        if let Some(first) = ids.insert(p.id.clone(), i + 1) {
            return Err(Error::DuplicateId {
                path: path.to_path_buf(),
                id: p.id,
                first,
                second: i + 1,
            });
        }
        out.push(p);
    }
    Ok(out)
}

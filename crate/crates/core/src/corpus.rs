//! Labeled corpora, open-vocabulary splits and the seen/unseen partition.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenizer::validate_label;

/// One data point: an input text and its gold label set.
///
/// `labels` has set semantics; the order of first occurrence is kept so that
/// serialization is stable.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Instance {
    pub id: String,
    pub text: String,
    pub labels: Vec<String>,
}

impl Instance {
    pub fn new(id: impl Into<String>, text: impl Into<String>, labels: Vec<String>) -> Self {
        let (labels, _) = dedup_labels(labels);
        Instance {
            id: id.into(),
            text: text.into(),
            labels,
        }
    }

    pub fn has_label(&self, label: &str) -> bool {
        self.labels.iter().any(|l| l == label)
    }
}

fn dedup_labels(labels: Vec<String>) -> (Vec<String>, usize) {
    let mut seen = HashSet::with_capacity(labels.len());
    let before = labels.len();
    let kept: Vec<String> = labels
        .into_iter()
        .filter(|l| seen.insert(l.clone()))
        .collect();
    let dropped = before - kept.len();
    (kept, dropped)
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Corpus {
    pub instances: Vec<Instance>,
    /// Number of instances carrying each label.
    pub label_frequency: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LoadStats {
    /// Duplicate labels dropped inside single records.
    pub duplicate_labels: usize,
}

impl Corpus {
    pub fn from_instances(instances: Vec<Instance>) -> Self {
        let label_frequency = count_labels(&instances);
        Corpus {
            instances,
            label_frequency,
        }
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn label_set(&self) -> BTreeSet<String> {
        self.label_frequency.keys().cloned().collect()
    }

    pub fn get(&self, id: &str) -> Option<&Instance> {
        self.instances.iter().find(|i| i.id == id)
    }

    /// Recounts label frequencies from the instances and compares.
    pub fn frequency_consistent(&self) -> bool {
        count_labels(&self.instances) == self.label_frequency
    }

    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        self.write_to(&mut out)?;
        out.flush()?;
        Ok(())
    }

    pub fn write_to(&self, out: &mut impl Write) -> Result<()> {
        for inst in &self.instances {
            serde_json::to_writer(&mut *out, inst)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

fn count_labels(instances: &[Instance]) -> BTreeMap<String, usize> {
    let mut freq = BTreeMap::new();
    for inst in instances {
        for l in &inst.labels {
            *freq.entry(l.clone()).or_insert(0) += 1;
        }
    }
    freq
}

#[derive(Deserialize)]
struct RawRecord {
    id: String,
    text: String,
    labels: Vec<String>,
}

/// Reads a JSON-lines corpus. Blank lines are ignored.
pub fn load_corpus(path: impl AsRef<Path>) -> Result<(Corpus, LoadStats)> {
    let path = path.as_ref();
    let reader = BufReader::new(File::open(path)?);
    let mut stats = LoadStats::default();
    let mut instances = Vec::new();
    let mut first_line: HashMap<String, usize> = HashMap::new();

    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let malformed = |reason: String| Error::MalformedRecord {
            path: path.to_owned(),
            line: line_no,
            reason,
        };
        let raw: RawRecord = serde_json::from_str(&line).map_err(|e| malformed(e.to_string()))?;
        for l in &raw.labels {
            validate_label(l).map_err(|e| malformed(e.to_string()))?;
        }
        if let Some(&first) = first_line.get(&raw.id) {
            return Err(Error::DuplicateId {
                path: path.to_owned(),
                id: raw.id,
                first,
                second: line_no,
            });
        }
        first_line.insert(raw.id.clone(), line_no);
        let (labels, dropped) = dedup_labels(raw.labels);
        stats.duplicate_labels += dropped;
        instances.push(Instance {
            id: raw.id,
            text: raw.text,
            labels,
        });
    }
    Ok((Corpus::from_instances(instances), stats))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OvSplit {
    pub train: Corpus,
    pub test: Corpus,
    pub removed: BTreeSet<String>,
}

impl OvSplit {
    /// Writes `train.jsonl`, `test.jsonl`, `removed_labels.txt` and
    /// `seen_labels.txt` into `dir`.
    pub fn write_to_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        self.train.write_jsonl(dir.join("train.jsonl"))?;
        self.test.write_jsonl(dir.join("test.jsonl"))?;
        write_label_list(dir.join("removed_labels.txt"), self.removed.iter())?;
        write_label_list(dir.join("seen_labels.txt"), self.train.label_frequency.keys())?;
        Ok(())
    }
}

pub fn write_label_list<'a>(
    path: impl AsRef<Path>,
    labels: impl IntoIterator<Item = &'a String>,
) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for l in labels {
        writeln!(out, "{l}")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_label_list(path: impl AsRef<Path>) -> Result<BTreeSet<String>> {
    let text = std::fs::read_to_string(path)?;
    Ok(text
        .lines()
        .filter(|l| !l.is_empty())
        .map(str::to_owned)
        .collect())
}

/// Samples `n_labels` labels uniformly without replacement from the training
/// label set and moves every training instance carrying any of them to the
/// end of the test split, preserving relative order.
pub fn build_ov_split(train: &Corpus, test: &Corpus, n_labels: usize, seed: u64) -> Result<OvSplit> {
    let candidates: Vec<&String> = train.label_frequency.keys().collect();
    if n_labels > candidates.len() {
        return Err(Error::NotEnoughLabels {
            requested: n_labels,
            available: candidates.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = index::sample(&mut rng, candidates.len(), n_labels).into_vec();
    picked.sort_unstable();
    let removed: BTreeSet<String> = picked.into_iter().map(|i| candidates[i].clone()).collect();

    let (moved, kept): (Vec<&Instance>, Vec<&Instance>) = train
        .instances
        .iter()
        .partition(|inst| inst.labels.iter().any(|l| removed.contains(l)));

    let new_train = Corpus::from_instances(kept.into_iter().cloned().collect());
    let mut test_instances = test.instances.clone();
    test_instances.extend(moved.into_iter().cloned());
    Ok(OvSplit {
        train: new_train,
        test: Corpus::from_instances(test_instances),
        removed,
    })
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LabelPartition {
    pub seen: BTreeSet<String>,
    pub unseen: BTreeSet<String>,
}

pub fn partition_labels(train: &Corpus, test: &Corpus) -> LabelPartition {
    let seen = train.label_set();
    let unseen = test
        .label_frequency
        .keys()
        .filter(|l| !seen.contains(*l))
        .cloned()
        .collect();
    LabelPartition { seen, unseen }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn inst(id: &str, labels: &[&str]) -> Instance {
        Instance::new(id, format!("text {id}"), labels.iter().map(|s| s.to_string()).collect())
    }

    fn write_tmp(lines: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(lines.as_bytes()).unwrap();
        f
    }

    #[test]
    fn load_counts_instance_level_frequency() {
        let f = write_tmp(
            "{\"id\":\"1\",\"text\":\"t\",\"labels\":[\"a\",\"b\"]}\n{\"id\":\"2\",\"text\":\"u\",\"labels\":[\"b\"]}\n",
        );
        let (c, stats) = load_corpus(f.path()).unwrap();
        assert_eq!(c.len(), 2);
        assert_eq!(c.label_frequency.get("a"), Some(&1));
        assert_eq!(c.label_frequency.get("b"), Some(&2));
        assert_eq!(stats.duplicate_labels, 0);
        assert!(c.frequency_consistent());
    }

    #[test]
    fn load_empty_file() {
        let f = write_tmp("");
        let (c, _) = load_corpus(f.path()).unwrap();
        assert!(c.is_empty());
        assert!(c.label_frequency.is_empty());
    }

    #[test]
    fn load_dedups_labels_with_counter() {
        let f = write_tmp("{\"id\":\"1\",\"text\":\"t\",\"labels\":[\"x\",\"x\"]}\n");
        let (c, stats) = load_corpus(f.path()).unwrap();
        assert_eq!(c.instances[0].labels, vec!["x"]);
        assert_eq!(stats.duplicate_labels, 1);
    }

    #[test]
    fn load_errors_name_lines() {
        let f = write_tmp("{\"id\":\"1\",\"text\":\"t\",\"labels\":[]}\nnot json\n");
        match load_corpus(f.path()) {
            Err(Error::MalformedRecord { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
        let f = write_tmp(
            "{\"id\":\"1\",\"text\":\"t\",\"labels\":[]}\n{\"id\":\"2\",\"text\":\"t\",\"labels\":[]}\n{\"id\":\"1\",\"text\":\"t\",\"labels\":[]}\n",
        );
        match load_corpus(f.path()) {
            Err(Error::DuplicateId { first, second, .. }) => assert_eq!((first, second), (1, 3)),
            other => panic!("unexpected {other:?}"),
        }
        let f = write_tmp("{\"id\":\"1\",\"text\":\"t\",\"labels\":[\"\"]}\n");
        assert!(matches!(load_corpus(f.path()), Err(Error::MalformedRecord { line: 1, .. })));
    }

    #[test]
    fn ov_split_moves_every_carrier() {
        let train = Corpus::from_instances(vec![
            inst("1", &["a"]),
            inst("2", &["a", "b"]),
            inst("3", &["b"]),
            inst("4", &["c"]),
        ]);
        let test = Corpus::from_instances(vec![inst("t1", &["c"])]);
        // Find a seed that selects "a" so the hand-enumerated outcome applies.
        let split = (0..64)
            .map(|s| build_ov_split(&train, &test, 1, s).unwrap())
            .find(|s| s.removed.contains("a"))
            .expect("some seed picks a");
        let train_ids: Vec<&str> = split.train.instances.iter().map(|i| i.id.as_str()).collect();
        let test_ids: Vec<&str> = split.test.instances.iter().map(|i| i.id.as_str()).collect();
        assert_eq!(train_ids, ["3", "4"]);
        assert_eq!(test_ids, ["t1", "1", "2"]);
        // brute-force re-scan
        for i in &split.train.instances {
            assert!(!i.has_label("a"));
        }
    }

    #[test]
    fn ov_split_zero_labels_is_identity() {
        let train = Corpus::from_instances(vec![inst("1", &["a"]), inst("2", &["b"])]);
        let test = Corpus::from_instances(vec![inst("3", &["a"])]);
        let split = build_ov_split(&train, &test, 0, 7).unwrap();
        assert_eq!(split.train, train);
        assert_eq!(split.test, test);
        assert!(split.removed.is_empty());
    }

    #[test]
    fn ov_split_rejects_too_many_labels() {
        let train = Corpus::from_instances(vec![inst("1", &["a"])]);
        assert!(matches!(
            build_ov_split(&train, &Corpus::default(), 2, 0),
            Err(Error::NotEnoughLabels { requested: 2, available: 1 })
        ));
    }

    #[test]
    fn collateral_labels_become_unseen() {
        // "b" only co-occurs with "a", so removing "a" also removes "b".
        let train = Corpus::from_instances(vec![inst("1", &["a", "b"]), inst("2", &["c"])]);
        let split = (0..64)
            .map(|s| build_ov_split(&train, &Corpus::default(), 1, s).unwrap())
            .find(|s| s.removed.contains("a"))
            .unwrap();
        let p = partition_labels(&split.train, &split.test);
        assert!(p.unseen.contains("b"));
        assert!(!split.removed.contains("b"));
    }

    #[test]
    fn partition_is_set_difference() {
        let train = Corpus::from_instances(vec![inst("1", &["a", "b"])]);
        let test = Corpus::from_instances(vec![inst("2", &["b", "c"])]);
        let p = partition_labels(&train, &test);
        assert_eq!(p.seen, ["a", "b"].iter().map(|s| s.to_string()).collect());
        assert_eq!(p.unseen, ["c".to_string()].into_iter().collect());

        let test = Corpus::from_instances(vec![inst("2", &["b"])]);
        assert!(partition_labels(&train, &test).unseen.is_empty());
    }
}

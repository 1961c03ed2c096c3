//! Synthetic compositional corpus: inputs are attribute-word lists such as
//! `"tan hat red cup"` and gold labels are `"<color> <object>"` tags.

use rand::seq::{index::sample, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{Corpus, Instance};
use crate::error::{Error, Result};

pub const COLORS: [&str; 8] = ["red", "tan", "blue", "gray", "pink", "gold", "jade", "rust"];
pub const OBJECTS: [&str; 8] = ["cup", "hat", "box", "pen", "jar", "bag", "mug", "key"];

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub instances: usize,
    pub min_labels: usize,
    pub max_labels: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            instances: 5000,
            min_labels: 1,
            max_labels: 2,
            seed: 0,
        }
    }
}

/// Every `"<color> <object>"` combination, sorted.
pub fn all_labels() -> Vec<String> {
    let mut out: Vec<String> = COLORS
        .iter()
        .flat_map(|c| OBJECTS.iter().map(move |o| format!("{c} {o}")))
        .collect();
    out.sort();
    out
}

/// Splits a label into its two parts.
pub fn label_parts(label: &str) -> Option<(&str, &str)> {
    label.split_once(' ')
}

pub fn generate(config: &SynthConfig) -> Result<Corpus> {
    if config.min_labels == 0 || config.min_labels > config.max_labels {
        return Err(Error::Config("need 1 <= min_labels <= max_labels".into()));
    }
    let labels = all_labels();
    if config.max_labels > labels.len() {
        return Err(Error::NotEnoughLabels {
            requested: config.max_labels,
            available: labels.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let width = config.instances.max(1).to_string().len();
    let instances = (0..config.instances)
        .map(|i| {
            let n = rng.gen_range(config.min_labels..=config.max_labels);
            let mut chosen: Vec<String> = sample(&mut rng, labels.len(), n)
                .into_iter()
                .map(|j| labels[j].clone())
                .collect();
            chosen.shuffle(&mut rng);
            let text = chosen.join(" ");
            chosen.sort();
            Instance::new(format!("s{:0width$}", i + 1), text, chosen)
        })
        .collect();
    Ok(Corpus::from_instances(instances))
}

/// First `n_train` instances for training, the rest for testing.
pub fn split_at(corpus: &Corpus, n_train: usize) -> (Corpus, Corpus) {
    let n = n_train.min(corpus.len());
    (
        Corpus::from_instances(corpus.instances[..n].to_vec()),
        Corpus::from_instances(corpus.instances[n..].to_vec()),
    )
}

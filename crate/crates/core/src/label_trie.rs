//! Gold-label tracking for teacher forcing.
//!
//! A [`GoldTracker`] keeps the tokenized gold labels that have not been fully
//! emitted yet and, at each target position, yields the admissible set `G`:
//! every byte that keeps the in-progress label a prefix of some remaining
//! gold label, plus `SEP` (or `EOS` for the last label) when the in-progress
//! label is itself complete.

use std::collections::BTreeMap;
use std::fmt;

use crate::error::{Error, Result};
use crate::tokenizer::{is_byte, TokenId, EOS, SEP, VOCAB_SIZE};

const WORDS: usize = VOCAB_SIZE.div_ceil(64);

/// Fixed-size bitset over the token alphabet.
#[derive(Clone, Copy, Default, PartialEq, Eq, Hash)]
pub struct TokenSet([u64; WORDS]);

impl TokenSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn full() -> Self {
        let mut s = Self::new();
        for t in 0..VOCAB_SIZE as TokenId {
            s.insert(t);
        }
        s
    }

    pub fn singleton(token: TokenId) -> Self {
        let mut s = Self::new();
        s.insert(token);
        s
    }

    pub fn insert(&mut self, token: TokenId) {
        let t = token as usize;
        self.0[t / 64] |= 1 << (t % 64);
    }

    pub fn contains(&self, token: TokenId) -> bool {
        let t = token as usize;
        t < VOCAB_SIZE && self.0[t / 64] & (1 << (t % 64)) != 0
    }

    pub fn len(&self) -> usize {
        self.0.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.0.iter().all(|&w| w == 0)
    }

    pub fn iter(&self) -> impl Iterator<Item = TokenId> + '_ {
        (0..VOCAB_SIZE as TokenId).filter(move |&t| self.contains(t))
    }
}

impl FromIterator<TokenId> for TokenSet {
    fn from_iter<I: IntoIterator<Item = TokenId>>(iter: I) -> Self {
        let mut s = Self::new();
        for t in iter {
            s.insert(t);
        }
        s
    }
}

impl fmt::Debug for TokenSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_set().entries(self.iter()).finish()
    }
}

#[derive(Debug, Clone, Default)]
struct Node {
    children: BTreeMap<u8, usize>,
    terminal: bool,
}

#[derive(Debug, Clone)]
struct Trie {
    nodes: Vec<Node>,
}

impl Trie {
    fn build(labels: &[Vec<TokenId>]) -> Self {
        let mut nodes = vec![Node::default()];
        for label in labels {
            let mut cur = 0;
            for &t in label {
                let b = t as u8;
                cur = match nodes[cur].children.get(&b) {
                    Some(&next) => next,
                    None => {
                        nodes.push(Node::default());
                        let next = nodes.len() - 1;
                        nodes[cur].children.insert(b, next);
                        next
                    }
                };
            }
            nodes[cur].terminal = true;
        }
        Trie { nodes }
    }
}

#[derive(Debug, Clone)]
pub struct GoldTracker {
    remaining: Vec<Vec<TokenId>>,
    partial: Vec<TokenId>,
    trie: Trie,
    /// Trie node reached by `partial`; `None` once the tracker is exhausted.
    cursor: Option<usize>,
    total: usize,
}

impl GoldTracker {
    /// `gold` must be non-empty, every label non-empty and byte-only.
    /// Duplicate sequences are collapsed.
    pub fn new(gold: impl IntoIterator<Item = Vec<TokenId>>) -> Result<Self> {
        let mut remaining: Vec<Vec<TokenId>> = Vec::new();
        for label in gold {
            if label.is_empty() || !label.iter().all(|&t| is_byte(t)) {
                return Err(Error::Shape("gold labels must be non-empty byte sequences".into()));
            }
            if !remaining.contains(&label) {
                remaining.push(label);
            }
        }
        if remaining.is_empty() {
            return Err(Error::EmptyGoldSet);
        }
        let trie = Trie::build(&remaining);
        let total = remaining.len();
        Ok(GoldTracker {
            remaining,
            partial: Vec::new(),
            trie,
            cursor: Some(0),
            total,
        })
    }

    pub fn remaining(&self) -> &[Vec<TokenId>] {
        &self.remaining
    }

    pub fn partial(&self) -> &[TokenId] {
        &self.partial
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn completed(&self) -> usize {
        self.total - self.remaining.len()
    }

    pub fn is_exhausted(&self) -> bool {
        self.remaining.is_empty()
    }

    /// Admissible next tokens at the current position.
    pub fn g_set(&self) -> Result<TokenSet> {
        let node = self.cursor.ok_or(Error::TrackerState)?;
        let node = &self.trie.nodes[node];
        let mut g: TokenSet = node.children.keys().map(|&b| TokenId::from(b)).collect();
        if node.terminal {
            g.insert(if self.remaining.len() >= 2 { SEP } else { EOS });
        }
        if g.is_empty() {
            return Err(Error::TrackerState);
        }
        Ok(g)
    }

    pub fn advance(&mut self, token: TokenId) -> Result<()> {
        if !self.g_set()?.contains(token) {
            return Err(Error::InadmissibleToken { token });
        }
        let cur = self.cursor.ok_or(Error::TrackerState)?;
        match token {
            SEP => {
                let done = std::mem::take(&mut self.partial);
                self.remaining.retain(|l| *l != done);
                self.trie = Trie::build(&self.remaining);
                self.cursor = Some(0);
            }
            EOS => {
                self.remaining.clear();
                self.partial.clear();
                self.trie = Trie::build(&[]);
                self.cursor = None;
            }
            byte => {
                self.partial.push(byte);
                self.cursor = self.trie.nodes[cur].children.get(&(byte as u8)).copied();
            }
        }
        Ok(())
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn bytes(s: &str) -> Vec<TokenId> {
        s.bytes().map(TokenId::from).collect()
    }

    fn set(tokens: &[TokenId]) -> TokenSet {
        tokens.iter().copied().collect()
    }

    /// Scans every remaining label for prefix extension.
    pub(crate) fn brute_force_g(remaining: &[Vec<TokenId>], partial: &[TokenId]) -> TokenSet {
        let mut g = TokenSet::new();
        for l in remaining {
            if l.len() > partial.len() && l.starts_with(partial) {
                g.insert(l[partial.len()]);
            }
        }
        if remaining.iter().any(|l| l.as_slice() == partial) {
            g.insert(if remaining.len() >= 2 { SEP } else { EOS });
        }
        g
    }

    #[test]
    fn tokenset_basics() {
        let s = set(&[0, 97, 259]);
        assert_eq!(s.len(), 3);
        assert!(s.contains(259) && !s.contains(258));
        assert_eq!(s.iter().collect::<Vec<_>>(), vec![0, 97, 259]);
        assert_eq!(TokenSet::full().len(), VOCAB_SIZE);
    }

    #[test]
    fn new_tracker_rejects_empty() {
        assert!(matches!(GoldTracker::new(Vec::<Vec<TokenId>>::new()), Err(Error::EmptyGoldSet)));
        let t = GoldTracker::new([bytes("ab"), bytes("ac")]).unwrap();
        assert_eq!(t.remaining().len(), 2);
        assert!(t.partial().is_empty());
        let t = GoldTracker::new([bytes("a")]).unwrap();
        assert_eq!(t.remaining().len(), 1);
    }

    #[test]
    fn hand_traced_g_sets() {
        let mut t = GoldTracker::new([bytes("ab"), bytes("ac")]).unwrap();
        assert_eq!(t.g_set().unwrap(), set(&[97]));
        t.advance(97).unwrap();
        assert_eq!(t.g_set().unwrap(), set(&[98, 99]));
        t.advance(98).unwrap();
        assert_eq!(t.partial(), &bytes("ab")[..]);
        // "ab" is complete and not a prefix of "ac".
        assert_eq!(t.g_set().unwrap(), set(&[SEP]));
        t.advance(SEP).unwrap();
        assert_eq!(t.remaining(), &[bytes("ac")]);
        assert!(t.partial().is_empty());
        assert_eq!(t.completed(), 1);
        t.advance(97).unwrap();
        t.advance(99).unwrap();
        assert_eq!(t.g_set().unwrap(), set(&[EOS]));
        t.advance(EOS).unwrap();
        assert!(t.is_exhausted());

        let mut t = GoldTracker::new([bytes("ab")]).unwrap();
        t.advance(97).unwrap();
        t.advance(98).unwrap();
        assert_eq!(t.g_set().unwrap(), set(&[EOS]));
    }

    #[test]
    fn prefix_of_prefix() {
        let mut t = GoldTracker::new([bytes("eyebrow"), bytes("eyebrows")]).unwrap();
        for b in bytes("eyebrow") {
            t.advance(b).unwrap();
        }
        assert_eq!(t.g_set().unwrap(), set(&[b's' as TokenId, SEP]));
        t.advance(SEP).unwrap();
        for b in bytes("eyebrows") {
            t.advance(b).unwrap();
        }
        assert_eq!(t.g_set().unwrap(), set(&[EOS]));
    }

    #[test]
    fn inadmissible_tokens_are_rejected() {
        let mut t = GoldTracker::new([bytes("ab")]).unwrap();
        assert!(matches!(t.advance(98), Err(Error::InadmissibleToken { token: 98 })));
        assert!(t.advance(SEP).is_err());
        t.advance(97).unwrap();
        t.advance(98).unwrap();
        assert!(t.advance(SEP).is_err());
        t.advance(EOS).unwrap();
        assert!(t.g_set().is_err());
    }

    pub(crate) fn random_labels(rng: &mut ChaCha8Rng, max_labels: usize, max_len: usize) -> Vec<Vec<TokenId>> {
        // A small alphabet forces shared prefixes and prefix-of-prefix cases.
        let n = rng.gen_range(1..=max_labels);
        let mut labels: Vec<Vec<TokenId>> = Vec::new();
        while labels.len() < n {
            let len = rng.gen_range(1..=max_len);
            let l: Vec<TokenId> = (0..len).map(|_| rng.gen_range(97..100)).collect();
            if !labels.contains(&l) {
                labels.push(l);
            }
        }
        labels
    }

    #[test]
    fn g_set_matches_brute_force_on_random_states() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let labels = random_labels(&mut rng, 8, 12);
            let mut order = labels.clone();
            order.shuffle(&mut rng);
            let mut t = GoldTracker::new(labels).unwrap();
            // walk a random prefix of the assembled target
            let mut target = Vec::new();
            for (i, l) in order.iter().enumerate() {
                target.extend_from_slice(l);
                target.push(if i + 1 == order.len() { EOS } else { SEP });
            }
            let stop = rng.gen_range(0..target.len());
            for &tok in &target[..stop] {
                t.advance(tok).unwrap();
            }
            assert_eq!(t.g_set().unwrap(), brute_force_g(t.remaining(), t.partial()));
        }
    }
}

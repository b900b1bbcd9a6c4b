//! Caption preprocessing, vocabulary and attribute-vocabulary construction,
//! and token encoding/decoding.
//!
//! Index layout is fixed: the three reserved tokens occupy the first slots
//! (BOS = 0, EOS = 1, UNK = 2), followed by kept corpus tokens ordered by
//! descending frequency with lexicographic tie-break.

use crate::linalg::Vector;
use crate::{Error, Result};
use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

pub const BOS: usize = 0;
pub const EOS: usize = 1;
pub const UNK: usize = 2;

pub const BOS_TOKEN: &str = "<bos>";
pub const EOS_TOKEN: &str = "<eos>";
pub const UNK_TOKEN: &str = "<unk>";

/// Lowercases, strips ASCII punctuation, and splits on whitespace.
pub fn tokenize(caption: &str) -> Vec<String> {
    caption
        .chars()
        .map(|c| if c.is_ascii_punctuation() { ' ' } else { c })
        .collect::<String>()
        .to_lowercase()
        .split_whitespace()
        .map(str::to_string)
        .collect()
}

/// An encoded sentence `[w_0, w_1, ..., w_{N_s}]` framed by the start and end
/// sign words. `n_s()` counts the predicted words, end sign included.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    indices: Vec<usize>,
}

impl TokenSequence {
    pub fn new(indices: Vec<usize>) -> Result<Self> {
        if indices.len() < 2 {
            return Err(Error::InvalidInput(
                "token sequence needs at least start and end sign words".into(),
            ));
        }
        if indices[0] != BOS {
            return Err(Error::InvalidInput("token sequence must begin with the start sign".into()));
        }
        if *indices.last().unwrap() != EOS {
            return Err(Error::InvalidInput("token sequence must end with the end sign".into()));
        }
        Ok(TokenSequence { indices })
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    /// Sentence length N_s: number of loss-bearing targets (w_1..w_{N_s}).
    pub fn n_s(&self) -> usize {
        self.indices.len() - 1
    }

    /// The tokens between the sign words.
    pub fn content(&self) -> &[usize] {
        &self.indices[1..self.indices.len() - 1]
    }
}

/// Bijection between kept tokens and indices, with the reserved tokens
/// always present.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    index_to_token: Vec<String>,
    token_to_index: HashMap<String, usize>,
}

impl Vocabulary {
    fn from_tokens(tokens: Vec<String>) -> Self {
        let token_to_index =
            tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocabulary { index_to_token: tokens, token_to_index }
    }

    pub fn size(&self) -> usize {
        self.index_to_token.len()
    }

    pub fn index_of(&self, token: &str) -> Option<usize> {
        self.token_to_index.get(token).copied()
    }

    pub fn token_at(&self, index: usize) -> Result<&str> {
        self.index_to_token
            .get(index)
            .map(String::as_str)
            .ok_or_else(|| Error::Vocab(format!("index {} out of range (size {})", index, self.size())))
    }

    /// Stable content hash used to pair checkpoints with the vocabulary they
    /// were trained against. FNV-1a over the token list; hand-rolled because
    /// the std hasher is not stable across releases.
    pub fn hash(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for token in &self.index_to_token {
            for b in token.as_bytes() {
                h ^= u64::from(*b);
                h = h.wrapping_mul(0x100000001b3);
            }
            h ^= u64::from(b'\n');
            h = h.wrapping_mul(0x100000001b3);
        }
        h
    }

    pub fn encode(&self, caption: &str) -> TokenSequence {
        let mut indices = vec![BOS];
        for token in tokenize(caption) {
            indices.push(self.index_of(&token).unwrap_or(UNK));
        }
        indices.push(EOS);
        TokenSequence { indices }
    }

    /// Inverse of `encode` for in-vocabulary tokens; the sign words are
    /// omitted and UNK renders as its literal token.
    pub fn decode(&self, seq: &TokenSequence) -> Result<String> {
        let mut words = Vec::with_capacity(seq.content().len());
        for &idx in seq.content() {
            words.push(self.token_at(idx)?.to_string());
        }
        Ok(words.join(" "))
    }

    /// One token per line, index = line number, reserved tokens first.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        for token in &self.index_to_token {
            writeln!(buf, "{token}")?;
        }
        crate::data::write_atomic(path, &buf)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        let mut tokens = Vec::new();
        for line in BufReader::new(file).lines() {
            tokens.push(line?);
        }
        if tokens.len() < 3
            || tokens[BOS] != BOS_TOKEN
            || tokens[EOS] != EOS_TOKEN
            || tokens[UNK] != UNK_TOKEN
        {
            return Err(Error::Vocab("vocabulary file lacks the reserved token prefix".into()));
        }
        Ok(Vocabulary::from_tokens(tokens))
    }
}

fn count_tokens(corpus: &[String]) -> HashMap<String, usize> {
    let mut counts = HashMap::new();
    for caption in corpus {
        for token in tokenize(caption) {
            *counts.entry(token).or_insert(0) += 1;
        }
    }
    counts
}

/// Sorted (count desc, token asc) list of (token, count).
fn ranked_tokens(counts: &HashMap<String, usize>) -> Vec<(String, usize)> {
    let mut ranked: Vec<(String, usize)> =
        counts.iter().map(|(t, c)| (t.clone(), *c)).collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    ranked
}

/// Builds the vocabulary, discarding tokens that occur fewer than
/// `min_count` times; discarded tokens map to UNK at encode time.
pub fn build_vocab(corpus: &[String], min_count: usize) -> Result<Vocabulary> {
    if min_count < 1 {
        return Err(Error::InvalidInput("min_count must be >= 1".into()));
    }
    let counts = count_tokens(corpus);
    let mut tokens =
        vec![BOS_TOKEN.to_string(), EOS_TOKEN.to_string(), UNK_TOKEN.to_string()];
    for (token, count) in ranked_tokens(&counts) {
        if count >= min_count {
            tokens.push(token);
        }
    }
    Ok(Vocabulary::from_tokens(tokens))
}

/// Ordered list of attribute tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttributeVocab {
    tokens: Vec<String>,
}

impl AttributeVocab {
    pub fn new(tokens: Vec<String>) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        for t in &tokens {
            if !seen.insert(t) {
                return Err(Error::Vocab(format!("duplicate attribute token {t:?}")));
            }
        }
        Ok(AttributeVocab { tokens })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

/// Picks the `k` most frequent corpus tokens as the attribute vocabulary,
/// ties broken lexicographically.
pub fn select_attribute_vocab(corpus: &[String], k: usize) -> Result<AttributeVocab> {
    if k < 1 {
        return Err(Error::InvalidInput("attribute vocabulary size must be >= 1".into()));
    }
    let counts = count_tokens(corpus);
    if k > counts.len() {
        return Err(Error::Vocab(format!(
            "requested {} attributes but the corpus has only {} distinct tokens",
            k,
            counts.len()
        )));
    }
    let ranked = ranked_tokens(&counts);
    AttributeVocab::new(ranked.into_iter().take(k).map(|(t, _)| t).collect())
}

/// Presence indicator over the attribute vocabulary: entry j is 1 when
/// attribute j occurs in any of the captions. A stand-in for a detector.
pub fn attributes_from_captions(captions: &[String], av: &AttributeVocab) -> Vector {
    let mut present = std::collections::HashSet::new();
    for caption in captions {
        for token in tokenize(caption) {
            present.insert(token);
        }
    }
    Vector::new(
        av.tokens().iter().map(|t| if present.contains(t) { 1.0 } else { 0.0 }).collect(),
    )
}

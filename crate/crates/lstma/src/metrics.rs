//! Corpus-level caption scoring: BLEU@1-4, ROUGE-L, and CIDEr-D against
//! multi-reference ground truth.
//!
//! BLEU uses clipped n-gram precision with a geometric mean and a
//! corpus-level brevity penalty from per-pair closest reference lengths.
//! ROUGE-L is the LCS F-measure with beta = 1.2, best reference per pair,
//! averaged over pairs. CIDEr-D is the clipped TF-IDF n-gram cosine with
//! n = 1..4 equally weighted, a Gaussian length penalty (sigma = 6) and a
//! x10 scale; IDF comes from the reference corpus of the evaluated pairs.
//! Scoring reuses the training tokenizer rather than the PTB tokenizer the
//! COCO server applies, so absolute values are not server-comparable.

use crate::captioner::{AttributeVector, CaptionerParams, ImageFeatures, VariantId};
use crate::data::CaptionRecord;
use crate::decoding::{beam_search, DecodeConfig};
use crate::linalg::Vector;
use crate::par::map_ordered;
use crate::vocab::{tokenize, Vocabulary};
use crate::{Error, Result};
use serde::Serialize;
use std::collections::HashMap;

/// A candidate sentence with its reference set, all pre-tokenized.
#[derive(Debug, Clone)]
pub struct EvalPair {
    pub id: String,
    pub candidate: Vec<String>,
    pub references: Vec<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricReport {
    pub bleu1: f64,
    pub bleu2: f64,
    pub bleu3: f64,
    pub bleu4: f64,
    pub rouge_l: f64,
    pub cider_d: f64,
}

impl MetricReport {
    pub fn values(&self) -> [(&'static str, f64); 6] {
        [
            ("bleu1", self.bleu1),
            ("bleu2", self.bleu2),
            ("bleu3", self.bleu3),
            ("bleu4", self.bleu4),
            ("rouge_l", self.rouge_l),
            ("cider_d", self.cider_d),
        ]
    }
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus-level BLEU@1..N.
pub fn bleu(pairs: &[EvalPair], max_n: usize) -> Result<Vec<f64>> {
    if pairs.is_empty() {
        return Err(Error::InvalidInput("BLEU needs at least one pair".into()));
    }
    if !(1..=4).contains(&max_n) {
        return Err(Error::InvalidInput(format!("BLEU order {max_n} outside 1..4")));
    }
    let mut matches = vec![0usize; max_n];
    let mut totals = vec![0usize; max_n];
    let mut cand_len = 0usize;
    let mut ref_len = 0usize;

    for pair in pairs {
        if pair.references.is_empty() {
            return Err(Error::InvalidInput(format!("pair {} has no references", pair.id)));
        }
        cand_len += pair.candidate.len();
        // Closest reference length; ties prefer the shorter reference.
        let closest = pair
            .references
            .iter()
            .map(|r| r.len())
            .min_by_key(|&l| {
                let diff = (l as i64 - pair.candidate.len() as i64).abs();
                (diff, l)
            })
            .unwrap();
        ref_len += closest;

        for n in 1..=max_n {
            let cand = ngram_counts(&pair.candidate, n);
            totals[n - 1] += pair.candidate.len().saturating_sub(n - 1);
            if cand.is_empty() {
                continue;
            }
            let refs: Vec<HashMap<&[String], usize>> =
                pair.references.iter().map(|r| ngram_counts(r, n)).collect();
            for (gram, count) in cand {
                let max_ref = refs.iter().map(|r| r.get(gram).copied().unwrap_or(0)).max().unwrap();
                matches[n - 1] += count.min(max_ref);
            }
        }
    }

    let bp = if cand_len == 0 {
        0.0
    } else if cand_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    };

    let mut scores = Vec::with_capacity(max_n);
    for n in 1..=max_n {
        let mut log_sum = 0.0;
        let mut degenerate = false;
        for i in 0..n {
            if matches[i] == 0 || totals[i] == 0 {
                degenerate = true;
                break;
            }
            log_sum += (matches[i] as f64 / totals[i] as f64).ln();
        }
        scores.push(if degenerate { 0.0 } else { bp * (log_sum / n as f64).exp() });
    }
    Ok(scores)
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut table = vec![0usize; (a.len() + 1) * (b.len() + 1)];
    let cols = b.len() + 1;
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            table[i * cols + j] = if a[i - 1] == b[j - 1] {
                table[(i - 1) * cols + j - 1] + 1
            } else {
                table[(i - 1) * cols + j].max(table[i * cols + j - 1])
            };
        }
    }
    table[a.len() * cols + b.len()]
}

const ROUGE_BETA: f64 = 1.2;

fn rouge_l_pair(pair: &EvalPair) -> f64 {
    let mut best = 0.0f64;
    for reference in &pair.references {
        if pair.candidate.is_empty() || reference.is_empty() {
            continue;
        }
        let lcs = lcs_len(&pair.candidate, reference) as f64;
        if lcs == 0.0 {
            continue;
        }
        let p = lcs / pair.candidate.len() as f64;
        let r = lcs / reference.len() as f64;
        let beta2 = ROUGE_BETA * ROUGE_BETA;
        let f = (1.0 + beta2) * p * r / (r + beta2 * p);
        best = best.max(f);
    }
    best
}

/// Mean over pairs of the best-reference LCS F-measure.
pub fn rouge_l(pairs: &[EvalPair]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::InvalidInput("ROUGE-L needs at least one pair".into()));
    }
    let sum: f64 = pairs.iter().map(rouge_l_pair).sum();
    Ok(sum / pairs.len() as f64)
}

const CIDER_N: usize = 4;
const CIDER_SIGMA: f64 = 6.0;

type NgramVec = HashMap<Vec<String>, f64>;

fn tfidf_vecs(tokens: &[String], df: &HashMap<Vec<String>, usize>, log_n: f64) -> (Vec<NgramVec>, Vec<f64>) {
    let mut vecs = Vec::with_capacity(CIDER_N);
    let mut norms = Vec::with_capacity(CIDER_N);
    for n in 1..=CIDER_N {
        let mut vec: NgramVec = HashMap::new();
        if tokens.len() >= n {
            for w in tokens.windows(n) {
                *vec.entry(w.to_vec()).or_insert(0.0) += 1.0;
            }
        }
        let mut norm_sq = 0.0;
        for (gram, tf) in vec.iter_mut() {
            let d = df.get(gram).copied().unwrap_or(0);
            let idf = log_n - (d.max(1) as f64).ln();
            *tf *= idf;
            norm_sq += *tf * *tf;
        }
        norms.push(norm_sq.sqrt());
        vecs.push(vec);
    }
    (vecs, norms)
}

/// Per-pair CIDEr-D scores plus the corpus mean.
pub fn cider_d_detailed(pairs: &[EvalPair]) -> Result<(f64, Vec<f64>)> {
    if pairs.is_empty() {
        return Err(Error::InvalidInput("CIDEr-D needs at least one pair".into()));
    }
    // Document frequency: an n-gram counts once per image whose reference
    // set mentions it.
    let mut df: HashMap<Vec<String>, usize> = HashMap::new();
    for pair in pairs {
        let mut seen = std::collections::HashSet::new();
        for reference in &pair.references {
            for n in 1..=CIDER_N {
                if reference.len() >= n {
                    for w in reference.windows(n) {
                        seen.insert(w.to_vec());
                    }
                }
            }
        }
        for gram in seen {
            *df.entry(gram).or_insert(0) += 1;
        }
    }
    let log_n = (pairs.len() as f64).ln();

    let mut per_pair = Vec::with_capacity(pairs.len());
    for pair in pairs {
        let (cand_vecs, cand_norms) = tfidf_vecs(&pair.candidate, &df, log_n);
        let mut score_by_n = [0.0f64; CIDER_N];
        for reference in &pair.references {
            let (ref_vecs, ref_norms) = tfidf_vecs(reference, &df, log_n);
            let delta = pair.candidate.len() as f64 - reference.len() as f64;
            let penalty = (-delta * delta / (2.0 * CIDER_SIGMA * CIDER_SIGMA)).exp();
            for n in 0..CIDER_N {
                if cand_norms[n] == 0.0 || ref_norms[n] == 0.0 {
                    continue;
                }
                let mut dot = 0.0;
                for (gram, &cv) in &cand_vecs[n] {
                    if let Some(&rv) = ref_vecs[n].get(gram) {
                        dot += cv.min(rv) * rv;
                    }
                }
                score_by_n[n] += penalty * dot / (cand_norms[n] * ref_norms[n]);
            }
        }
        let m = pair.references.len() as f64;
        let mean_over_n: f64 = score_by_n.iter().map(|s| s / m).sum::<f64>() / CIDER_N as f64;
        per_pair.push(10.0 * mean_over_n);
    }
    let corpus = per_pair.iter().sum::<f64>() / per_pair.len() as f64;
    Ok((corpus, per_pair))
}

pub fn cider_d(pairs: &[EvalPair]) -> Result<f64> {
    Ok(cider_d_detailed(pairs)?.0)
}

/// All six metrics over a pair set.
pub fn score_pairs(pairs: &[EvalPair]) -> Result<MetricReport> {
    let b = bleu(pairs, 4)?;
    Ok(MetricReport {
        bleu1: b[0],
        bleu2: b[1],
        bleu3: b[2],
        bleu4: b[3],
        rouge_l: rouge_l(pairs)?,
        cider_d: cider_d(pairs)?,
    })
}

/// Per-image rows for the score CSV: the corpus formulas applied to the
/// single pair, except CIDEr-D which keeps the corpus IDF table.
pub fn per_image_scores(pairs: &[EvalPair]) -> Result<Vec<(String, MetricReport)>> {
    let (_, cider_per_pair) = cider_d_detailed(pairs)?;
    let mut rows = Vec::with_capacity(pairs.len());
    for (pair, cider) in pairs.iter().zip(cider_per_pair) {
        let single = std::slice::from_ref(pair);
        let b = bleu(single, 4)?;
        rows.push((
            pair.id.clone(),
            MetricReport {
                bleu1: b[0],
                bleu2: b[1],
                bleu3: b[2],
                bleu4: b[3],
                rouge_l: rouge_l(single)?,
                cider_d: cider,
            },
        ));
    }
    Ok(rows)
}

/// Decodes every record with the ensemble and scores the output against the
/// record's captions.
pub fn evaluate(
    models: &[&CaptionerParams],
    variant: VariantId,
    dataset: &[CaptionRecord],
    vocab: &Vocabulary,
    config: &DecodeConfig,
) -> Result<(MetricReport, Vec<EvalPair>)> {
    if dataset.is_empty() {
        return Err(Error::InvalidInput("cannot evaluate an empty dataset".into()));
    }
    let pairs = map_ordered(dataset, |record| -> Result<EvalPair> {
        let img = ImageFeatures(Vector::new(record.features.clone()));
        let attrs = AttributeVector::new(Vector::new(record.attributes.clone()))?;
        let results = beam_search(models, variant, &img, &attrs, config)?;
        let best = results
            .first()
            .ok_or_else(|| Error::InvalidInput("beam search returned nothing".into()))?;
        let caption = vocab.decode(&best.sequence)?;
        Ok(EvalPair {
            id: record.id.clone(),
            candidate: tokenize(&caption),
            references: record.captions.iter().map(|c| tokenize(c)).collect(),
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;

    Ok((score_pairs(&pairs)?, pairs))
}

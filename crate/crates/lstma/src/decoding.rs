//! Sentence generation: greedy decoding, beam search, and ensemble-fused
//! prediction.
//!
//! Both decoders draw from the same fused next-word distribution and mask
//! the start sign and UNK from consideration (without renormalizing), so a
//! hypothesis's accumulated log-probability always equals a teacher-forced
//! re-scoring of its emitted tokens. Finished hypotheses keep their beam
//! slot and stop expanding; selection and final ranking use the same key,
//! which makes beam search at full vocabulary width an exact search and
//! makes `k = 1` coincide with greedy decoding step for step.

use crate::captioner::{encode_state, predict_next, AttributeVector, CaptionerParams, ImageFeatures, VariantId};
use crate::linalg::Vector;
use crate::lstm::LstmState;
use crate::vocab::{TokenSequence, BOS, EOS, UNK};
use crate::{Error, Result};

/// How ensemble member distributions are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Fusion {
    /// Arithmetic mean of the member probabilities.
    #[default]
    Mean,
    /// Renormalized geometric mean.
    Geometric,
}

#[derive(Debug, Clone)]
pub struct DecodeConfig {
    pub beam_size: usize,
    pub max_len: usize,
    /// Rank beam output by logprob / steps instead of raw logprob.
    pub length_norm: bool,
    pub fusion: Fusion,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig { beam_size: 3, max_len: 20, length_norm: false, fusion: Fusion::Mean }
    }
}

/// A partial sentence under expansion.
#[derive(Debug, Clone)]
pub struct BeamHypothesis {
    /// Emitted word indices; ends with EOS exactly when finished.
    pub tokens: Vec<usize>,
    /// Sum of the log-probabilities of every emitted token.
    pub logprob: f64,
    /// One recurrent state per ensemble member.
    pub states: Vec<LstmState>,
    pub finished: bool,
}

/// A complete ranked decode result.
#[derive(Debug, Clone)]
pub struct ScoredSequence {
    pub sequence: TokenSequence,
    /// Sum of per-step log probabilities over the scored tokens. Sequences
    /// cut off at max_len carry no terminal end-sign factor.
    pub logprob: f64,
    /// Whether the end sign was actually emitted.
    pub finished: bool,
}

fn check_models(models: &[&CaptionerParams]) -> Result<()> {
    let first = models
        .first()
        .ok_or_else(|| Error::InvalidInput("decoding needs at least one model".into()))?;
    for m in &models[1..] {
        if m.dims() != first.dims() {
            return Err(Error::Dim(format!(
                "ensemble member dims {:?} differ from {:?}",
                m.dims(),
                first.dims()
            )));
        }
    }
    Ok(())
}

/// Advances every member one step on `last_word` and fuses the predicted
/// distributions.
pub fn ensemble_predict(
    models: &[&CaptionerParams],
    states: &[LstmState],
    last_word: usize,
    variant: VariantId,
    img: &ImageFeatures,
    attrs: &AttributeVector,
    fusion: Fusion,
) -> Result<(Vector, Vec<LstmState>)> {
    check_models(models)?;
    if states.len() != models.len() {
        return Err(Error::Dim(format!(
            "{} states for {} ensemble members",
            states.len(),
            models.len()
        )));
    }
    let d_s = models[0].dims().d_s;
    let mut new_states = Vec::with_capacity(models.len());
    let mut fused = match fusion {
        Fusion::Mean => Vector::zeros(d_s),
        Fusion::Geometric => Vector::new(vec![0.0; d_s]),
    };
    for (model, state) in models.iter().zip(states) {
        let (dist, next) = predict_next(variant, model, state, last_word, img, attrs)?;
        match fusion {
            Fusion::Mean => fused.add_assign(&dist),
            Fusion::Geometric => {
                for (acc, p) in fused.as_mut_slice().iter_mut().zip(dist.iter()) {
                    *acc += p.max(f64::MIN_POSITIVE).ln();
                }
            }
        }
        new_states.push(next);
    }
    match fusion {
        Fusion::Mean => fused.scale(1.0 / models.len() as f64),
        Fusion::Geometric => {
            let m = models.len() as f64;
            for v in fused.as_mut_slice() {
                *v = (*v / m).exp();
            }
            let sum: f64 = fused.iter().sum();
            fused.scale(1.0 / sum);
        }
    }
    Ok((fused, new_states))
}

fn initial_states(
    models: &[&CaptionerParams],
    variant: VariantId,
    img: &ImageFeatures,
    attrs: &AttributeVector,
) -> Result<Vec<LstmState>> {
    models.iter().map(|m| encode_state(variant, m, img, attrs)).collect()
}

/// Argmax over the fused distribution with BOS/UNK masked; lowest index wins
/// ties, matching beam's stable candidate ordering.
fn masked_argmax(dist: &Vector) -> usize {
    let mut best = EOS;
    let mut best_p = f64::NEG_INFINITY;
    for (w, &p) in dist.iter().enumerate() {
        if w == BOS || w == UNK {
            continue;
        }
        if p > best_p {
            best_p = p;
            best = w;
        }
    }
    best
}

/// Feeds the fused argmax word back until the end sign is emitted or
/// `max_len` words have been produced.
pub fn greedy_decode(
    models: &[&CaptionerParams],
    variant: VariantId,
    img: &ImageFeatures,
    attrs: &AttributeVector,
    config: &DecodeConfig,
) -> Result<TokenSequence> {
    Ok(greedy_decode_scored(models, variant, img, attrs, config)?.sequence)
}

/// Greedy decoding with the accumulated log-probability of the emitted
/// tokens alongside the sentence.
pub fn greedy_decode_scored(
    models: &[&CaptionerParams],
    variant: VariantId,
    img: &ImageFeatures,
    attrs: &AttributeVector,
    config: &DecodeConfig,
) -> Result<ScoredSequence> {
    check_models(models)?;
    let mut states = initial_states(models, variant, img, attrs)?;
    let mut tokens = vec![BOS];
    let mut last = BOS;
    let mut logprob = 0.0;
    let mut finished = false;
    for _ in 0..config.max_len {
        let (dist, next) =
            ensemble_predict(models, &states, last, variant, img, attrs, config.fusion)?;
        states = next;
        let word = masked_argmax(&dist);
        logprob += dist[word].ln();
        tokens.push(word);
        last = word;
        if word == EOS {
            finished = true;
            break;
        }
    }
    if !finished {
        tokens.push(EOS);
    }
    Ok(ScoredSequence { sequence: TokenSequence::new(tokens)?, logprob, finished })
}

/// Breadth-limited best-first search keeping the top-k hypotheses per step.
/// Returns every finished or horizon-cut hypothesis, best first.
pub fn beam_search(
    models: &[&CaptionerParams],
    variant: VariantId,
    img: &ImageFeatures,
    attrs: &AttributeVector,
    config: &DecodeConfig,
) -> Result<Vec<ScoredSequence>> {
    check_models(models)?;
    if config.beam_size < 1 {
        return Err(Error::InvalidInput("beam size must be >= 1".into()));
    }
    let states = initial_states(models, variant, img, attrs)?;
    let mut beam = vec![BeamHypothesis {
        tokens: Vec::new(),
        logprob: 0.0,
        states,
        finished: false,
    }];

    for _ in 0..config.max_len {
        if beam.iter().all(|h| h.finished) {
            break;
        }
        let mut candidates: Vec<BeamHypothesis> = Vec::new();
        for hyp in &beam {
            if hyp.finished {
                candidates.push(hyp.clone());
                continue;
            }
            let last = *hyp.tokens.last().unwrap_or(&BOS);
            let (dist, next_states) =
                ensemble_predict(models, &hyp.states, last, variant, img, attrs, config.fusion)?;
            for (word, &p) in dist.iter().enumerate() {
                if word == BOS || word == UNK {
                    continue;
                }
                let mut tokens = hyp.tokens.clone();
                tokens.push(word);
                candidates.push(BeamHypothesis {
                    tokens,
                    logprob: hyp.logprob + p.ln(),
                    states: next_states.clone(),
                    finished: word == EOS,
                });
            }
        }
        // Stable sort: candidates were generated in token-index order, so
        // ties resolve toward lower indices, same as the greedy argmax.
        candidates.sort_by(|a, b| b.logprob.partial_cmp(&a.logprob).unwrap());
        candidates.truncate(config.beam_size);
        beam = candidates;
    }

    let mut results: Vec<ScoredSequence> = beam
        .into_iter()
        .map(|hyp| {
            let mut indices = vec![BOS];
            indices.extend_from_slice(&hyp.tokens);
            if !hyp.finished {
                indices.push(EOS);
            }
            Ok(ScoredSequence {
                sequence: TokenSequence::new(indices)?,
                logprob: hyp.logprob,
                finished: hyp.finished,
            })
        })
        .collect::<Result<_>>()?;

    let rank_key = |s: &ScoredSequence| {
        if config.length_norm {
            s.logprob / (s.sequence.n_s() as f64).max(1.0)
        } else {
            s.logprob
        }
    };
    results.sort_by(|a, b| rank_key(b).partial_cmp(&rank_key(a)).unwrap());
    Ok(results)
}

/// Teacher-forced log-probability of an already-decoded sequence, through
/// the same fused-prediction path the decoders use. When `finished` the
/// terminal end-sign factor is included.
pub fn score_sequence(
    models: &[&CaptionerParams],
    variant: VariantId,
    img: &ImageFeatures,
    attrs: &AttributeVector,
    seq: &TokenSequence,
    finished: bool,
    fusion: Fusion,
) -> Result<f64> {
    check_models(models)?;
    let mut states = initial_states(models, variant, img, attrs)?;
    let indices = seq.indices();
    let scored_end = if finished { indices.len() } else { indices.len() - 1 };
    let mut logprob = 0.0;
    for t in 1..scored_end {
        let (dist, next) = ensemble_predict(
            models,
            &states,
            indices[t - 1],
            variant,
            img,
            attrs,
            fusion,
        )?;
        logprob += dist[indices[t]].ln();
        states = next;
    }
    Ok(logprob)
}

//! Minibatch SGD on the sentence negative log-likelihood.
//!
//! Every (image, caption) pair is one training example, so a record with
//! five captions contributes five examples. Batches come from a seeded
//! per-epoch shuffle; the final partial batch of an epoch is used, not
//! dropped. Per-example gradients may be computed in parallel but are always
//! reduced in example order, keeping runs bitwise reproducible.

use crate::captioner::{
    backward, forward_loss, AttributeVector, CaptionerParams, Dims, ImageFeatures, VariantId,
};
use crate::data::CaptionRecord;
use crate::linalg::Vector;
use crate::par::map_ordered;
use crate::vocab::{TokenSequence, Vocabulary};
use crate::{Error, Result};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::io::Write;
use std::path::Path;

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub variant: VariantId,
    /// Constant learning rate; no decay schedule.
    pub lr: f64,
    pub batch_size: usize,
    pub max_iters: usize,
    /// Global-norm clip applied to the averaged batch gradient.
    pub clip_norm: Option<f64>,
    pub seed: u64,
    /// Progress-print period for callers that want one; 0 disables.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            variant: VariantId::A1,
            lr: 0.01,
            batch_size: 32,
            max_iters: 2000,
            clip_norm: Some(5.0),
            seed: 0,
            eval_every: 0,
        }
    }
}

/// One teacher-forcing example: a record's inputs plus one encoded caption.
struct Example {
    img: ImageFeatures,
    attrs: AttributeVector,
    words: TokenSequence,
}

fn build_examples(dataset: &[CaptionRecord], vocab: &Vocabulary) -> Result<Vec<Example>> {
    let mut examples = Vec::new();
    for record in dataset {
        let img = ImageFeatures(Vector::new(record.features.clone()));
        let attrs = AttributeVector::new(Vector::new(record.attributes.clone()))?;
        for caption in &record.captions {
            examples.push(Example {
                img: img.clone(),
                attrs: attrs.clone(),
                words: vocab.encode(caption),
            });
        }
    }
    Ok(examples)
}

/// Mean loss and mean gradient over a set of examples. Exposed so the
/// benchmarks can drive the exact batch computation the trainer uses.
pub fn batch_loss_and_grads(
    variant: VariantId,
    params: &CaptionerParams,
    batch: &[(&ImageFeatures, &AttributeVector, &TokenSequence)],
) -> Result<(f64, CaptionerParams)> {
    let per_example = map_ordered(batch, |(img, attrs, words)| -> Result<(f64, CaptionerParams)> {
        let (loss, cache) = forward_loss(variant, params, img, attrs, words)?;
        let grads = backward(params, img, attrs, &cache)?;
        Ok((loss, grads))
    });

    // Fixed-order reduction over the ordered results.
    let mut total_loss = 0.0;
    let mut total = CaptionerParams::zeros(params.dims());
    for item in per_example {
        let (loss, grads) = item?;
        total_loss += loss;
        total.add_scaled(&grads, 1.0);
    }
    let scale = 1.0 / batch.len() as f64;
    total.scale(scale);
    Ok((total_loss * scale, total))
}

/// Trains from explicit initial parameters; [`sgd_train`] derives the
/// initial parameters from the config seed.
pub fn sgd_train_from(
    config: &TrainConfig,
    mut params: CaptionerParams,
    dataset: &[CaptionRecord],
    vocab: &Vocabulary,
) -> Result<(CaptionerParams, Vec<f64>)> {
    if dataset.is_empty() {
        return Err(Error::InvalidInput("cannot train on an empty dataset".into()));
    }
    let examples = build_examples(dataset, vocab)?;
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut cursor = examples.len(); // force a shuffle on the first iteration
    let mut epoch = 0u64;
    let mut history = Vec::with_capacity(config.max_iters);

    for iter in 0..config.max_iters {
        if cursor >= order.len() {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ epoch.wrapping_mul(0x9e3779b97f4a7c15));
            order.shuffle(&mut rng);
            cursor = 0;
            epoch += 1;
        }
        let end = (cursor + config.batch_size).min(order.len());
        let batch: Vec<(&ImageFeatures, &AttributeVector, &TokenSequence)> = order[cursor..end]
            .iter()
            .map(|&i| (&examples[i].img, &examples[i].attrs, &examples[i].words))
            .collect();
        cursor = end;

        let (mean_loss, mut grads) = batch_loss_and_grads(config.variant, &params, &batch)?;
        if !mean_loss.is_finite() {
            return Err(Error::NanLoss {
                iteration: iter,
                detail: format!("mean batch loss = {mean_loss}"),
            });
        }

        if let Some(clip) = config.clip_norm {
            let norm = grads.global_norm();
            if norm > clip {
                grads.scale(clip / norm);
            }
        }
        params.add_scaled(&grads, -config.lr);
        history.push(mean_loss);

        if config.eval_every > 0 && (iter + 1) % config.eval_every == 0 {
            eprintln!("iter {:>6}  mean loss {:.6}", iter + 1, mean_loss);
        }
    }
    Ok((params, history))
}

/// Seeds fresh parameters from the config and trains them; returns the
/// trained parameters and the per-iteration mean batch loss history.
pub fn sgd_train(
    config: &TrainConfig,
    dims: Dims,
    dataset: &[CaptionRecord],
    vocab: &Vocabulary,
) -> Result<(CaptionerParams, Vec<f64>)> {
    check_dataset_dims(dims, dataset, vocab)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let params = CaptionerParams::init(dims, &mut rng);
    sgd_train_from(config, params, dataset, vocab)
}

fn check_dataset_dims(dims: Dims, dataset: &[CaptionRecord], vocab: &Vocabulary) -> Result<()> {
    if let Some(first) = dataset.first() {
        if first.features.len() != dims.d_v {
            return Err(Error::Dim(format!(
                "dataset features dim {} != configured D_v {}",
                first.features.len(),
                dims.d_v
            )));
        }
        if first.attributes.len() != dims.d_a {
            return Err(Error::Dim(format!(
                "dataset attribute dim {} != configured D_a {}",
                first.attributes.len(),
                dims.d_a
            )));
        }
    }
    if vocab.size() != dims.d_s {
        return Err(Error::Dim(format!(
            "vocabulary size {} != configured D_s {}",
            vocab.size(),
            dims.d_s
        )));
    }
    Ok(())
}

/// Trains `m` members with seeds `seed + 0 .. seed + m-1`, identical config
/// otherwise.
pub fn train_ensemble(
    config: &TrainConfig,
    dims: Dims,
    dataset: &[CaptionRecord],
    vocab: &Vocabulary,
    m: usize,
) -> Result<Vec<(CaptionerParams, Vec<f64>)>> {
    if m < 1 {
        return Err(Error::InvalidInput("ensemble size must be >= 1".into()));
    }
    let mut members = Vec::with_capacity(m);
    for k in 0..m as u64 {
        let member_config = TrainConfig { seed: config.seed + k, ..config.clone() };
        members.push(sgd_train(&member_config, dims, dataset, vocab)?);
    }
    Ok(members)
}

/// Loss history as `iteration,mean_loss` CSV.
pub fn write_loss_csv(history: &[f64], path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    writeln!(buf, "iteration,mean_loss")?;
    for (iter, loss) in history.iter().enumerate() {
        writeln!(buf, "{},{}", iter + 1, loss)?;
    }
    crate::data::write_atomic(path, &buf)
}

//! Central finite-difference verification of the analytic gradients.
//!
//! The numeric side only ever calls [`forward_loss`], so it stays
//! independent of the backward pass it is checking.

use crate::captioner::{
    backward, forward_loss, AttributeVector, CaptionerParams, Dims, ImageFeatures, VariantId,
};
use crate::linalg::Vector;
use crate::vocab::{TokenSequence, BOS, EOS, UNK};
use crate::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_TOL: f64 = 1e-4;

/// The small configuration the checks run at.
pub const CHECK_DIMS: Dims = Dims { d_v: 7, d_a: 5, d_s: 12, d_e: 6, h: 6 };
pub const CHECK_N_S: usize = 4;

#[derive(Debug, Clone)]
pub struct BlockReport {
    pub name: &'static str,
    pub max_rel_err: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub variant: VariantId,
    pub seed: u64,
    pub blocks: Vec<BlockReport>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.blocks.iter().map(|b| b.max_rel_err).fold(0.0, f64::max)
    }

    pub fn pass(&self) -> bool {
        self.max_rel_err() <= self.tol
    }
}

/// A random but valid training instance at the check dimensions.
pub fn random_instance(
    seed: u64,
) -> (CaptionerParams, ImageFeatures, AttributeVector, TokenSequence) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = CaptionerParams::init(CHECK_DIMS, &mut rng);
    let img = ImageFeatures(Vector::new(
        (0..CHECK_DIMS.d_v).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    ));
    let attrs = AttributeVector::new(Vector::new(
        (0..CHECK_DIMS.d_a).map(|_| rng.gen_range(0.0..1.0)).collect(),
    ))
    .expect("probabilities in range");
    let mut indices = vec![BOS];
    for _ in 0..CHECK_N_S - 1 {
        indices.push(rng.gen_range(UNK..CHECK_DIMS.d_s));
    }
    indices.push(EOS);
    let words = TokenSequence::new(indices).expect("framed");
    (params, img, attrs, words)
}

/// Central finite differences of the sentence loss with respect to every
/// parameter entry.
pub fn finite_difference_grads(
    variant: VariantId,
    params: &CaptionerParams,
    img: &ImageFeatures,
    attrs: &AttributeVector,
    words: &TokenSequence,
    eps: f64,
) -> Result<CaptionerParams> {
    let mut numeric = CaptionerParams::zeros(params.dims());

    let loss_with = |p: &CaptionerParams| -> Result<f64> {
        Ok(forward_loss(variant, p, img, attrs, words)?.0)
    };

    // Matrices, in block order.
    for bi in 0..12 {
        let len = params.blocks()[bi].1.as_slice().len();
        for idx in 0..len {
            let mut p = params.clone();
            block_mut(&mut p, bi)[idx] += eps;
            let plus = loss_with(&p)?;
            let mut p = params.clone();
            block_mut(&mut p, bi)[idx] -= eps;
            let minus = loss_with(&p)?;
            block_mut(&mut numeric, bi)[idx] = (plus - minus) / (2.0 * eps);
        }
    }
    // Biases.
    for bi in 0..4 {
        let len = params.bias_blocks()[bi].1.dim();
        for idx in 0..len {
            let mut p = params.clone();
            bias_mut(&mut p, bi)[idx] += eps;
            let plus = loss_with(&p)?;
            let mut p = params.clone();
            bias_mut(&mut p, bi)[idx] -= eps;
            let minus = loss_with(&p)?;
            bias_mut(&mut numeric, bi)[idx] = (plus - minus) / (2.0 * eps);
        }
    }
    Ok(numeric)
}

fn block_mut(p: &mut CaptionerParams, i: usize) -> &mut [f64] {
    match i {
        0 => p.t_a.as_mut_slice(),
        1 => p.t_v.as_mut_slice(),
        2 => p.t_s.as_mut_slice(),
        3 => p.t_h.as_mut_slice(),
        4 => p.lstm.t_g.as_mut_slice(),
        5 => p.lstm.t_i.as_mut_slice(),
        6 => p.lstm.t_f.as_mut_slice(),
        7 => p.lstm.t_o.as_mut_slice(),
        8 => p.lstm.r_g.as_mut_slice(),
        9 => p.lstm.r_i.as_mut_slice(),
        10 => p.lstm.r_f.as_mut_slice(),
        11 => p.lstm.r_o.as_mut_slice(),
        _ => unreachable!(),
    }
}

fn bias_mut(p: &mut CaptionerParams, i: usize) -> &mut [f64] {
    match i {
        0 => p.lstm.b_g.as_mut_slice(),
        1 => p.lstm.b_i.as_mut_slice(),
        2 => p.lstm.b_f.as_mut_slice(),
        3 => p.lstm.b_o.as_mut_slice(),
        _ => unreachable!(),
    }
}

/// Per-block max of |analytic - numeric| / max(1, |numeric|).
pub fn compare(
    variant: VariantId,
    seed: u64,
    analytic: &CaptionerParams,
    numeric: &CaptionerParams,
    tol: f64,
) -> GradCheckReport {
    let mut blocks = Vec::new();
    for ((name, a), (_, n)) in analytic.blocks().into_iter().zip(numeric.blocks()) {
        let mut max_rel = 0.0f64;
        for (av, nv) in a.as_slice().iter().zip(n.as_slice()) {
            let rel = (av - nv).abs() / nv.abs().max(1.0);
            max_rel = max_rel.max(rel);
        }
        blocks.push(BlockReport { name, max_rel_err: max_rel });
    }
    for ((name, a), (_, n)) in analytic.bias_blocks().into_iter().zip(numeric.bias_blocks()) {
        let mut max_rel = 0.0f64;
        for (av, nv) in a.iter().zip(n.iter()) {
            let rel = (av - nv).abs() / nv.abs().max(1.0);
            max_rel = max_rel.max(rel);
        }
        blocks.push(BlockReport { name, max_rel_err: max_rel });
    }
    GradCheckReport { variant, seed, blocks, tol }
}

/// Full check of one variant at one seed.
pub fn check_variant(variant: VariantId, seed: u64, eps: f64, tol: f64) -> Result<GradCheckReport> {
    let (params, img, attrs, words) = random_instance(seed);
    let (_, cache) = forward_loss(variant, &params, &img, &attrs, &words)?;
    let analytic = backward(&params, &img, &attrs, &cache)?;
    let numeric = finite_difference_grads(variant, &params, &img, &attrs, &words, eps)?;
    Ok(compare(variant, seed, &analytic, &numeric, tol))
}

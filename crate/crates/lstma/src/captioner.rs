//! The five attribute-conditioned captioner variants over a shared LSTM
//! core: input-schedule construction, sentence negative log-likelihood, full
//! parameter gradients, and single-step prediction for decoding.
//!
//! All variants share the decode rule "feed the previous word, predict the
//! next"; they differ in where and when the image vector I and the attribute
//! vector A enter the recurrence:
//!
//! * A1: encode [T_a A]
//! * A2: encode [T_v I, T_a A]
//! * A3: encode [T_a A, T_v I]
//! * A4: encode [T_a A], decode inputs T_s w + T_v I
//! * A5: encode [T_v I], decode inputs T_s w + T_a A
//!
//! Encode steps are negative time: they condition the state and carry no
//! prediction target. Decode step t feeds w_t and predicts w_{t+1}.

use crate::linalg::{softmax, Matrix, Vector};
use crate::lstm::{lstm_backward, lstm_forward, lstm_step, LstmParams, LstmState, StepCache};
use crate::vocab::{TokenSequence, BOS, EOS};
use crate::{Error, Result};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// D_v-dimensional image representation.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageFeatures(pub Vector);

/// D_a-dimensional vector of per-attribute probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributeVector(pub Vector);

impl AttributeVector {
    pub fn new(probs: Vector) -> Result<Self> {
        if probs.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
            return Err(Error::InvalidInput("attribute probabilities must lie in [0,1]".into()));
        }
        Ok(AttributeVector(probs))
    }
}

/// Which of the five input schedules to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum VariantId {
    A1,
    A2,
    A3,
    A4,
    A5,
}

impl VariantId {
    pub const ALL: [VariantId; 5] =
        [VariantId::A1, VariantId::A2, VariantId::A3, VariantId::A4, VariantId::A5];

    pub fn tag(self) -> u8 {
        match self {
            VariantId::A1 => 1,
            VariantId::A2 => 2,
            VariantId::A3 => 3,
            VariantId::A4 => 4,
            VariantId::A5 => 5,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            1 => Ok(VariantId::A1),
            2 => Ok(VariantId::A2),
            3 => Ok(VariantId::A3),
            4 => Ok(VariantId::A4),
            5 => Ok(VariantId::A5),
            _ => Err(Error::InvalidInput(format!("unknown variant tag {tag}"))),
        }
    }
}

impl std::fmt::Display for VariantId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "a{}", self.tag())
    }
}

impl std::str::FromStr for VariantId {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "a1" => Ok(VariantId::A1),
            "a2" => Ok(VariantId::A2),
            "a3" => Ok(VariantId::A3),
            "a4" => Ok(VariantId::A4),
            "a5" => Ok(VariantId::A5),
            other => Err(Error::InvalidInput(format!(
                "unknown variant {other:?} (expected a1..a5)"
            ))),
        }
    }
}

/// Model dimensions. D_s doubles as the vocabulary size and the word
/// feature dimensionality (one-hot words).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub d_v: usize,
    pub d_a: usize,
    pub d_s: usize,
    pub d_e: usize,
    pub h: usize,
}

/// All learnable weights: the three input embeddings, the softmax output
/// map, and the LSTM core.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionerParams {
    /// D_e x D_a, attribute representations.
    pub t_a: Matrix,
    /// D_e x D_v, image representations.
    pub t_v: Matrix,
    /// D_e x D_s, word embeddings (one-hot lookup).
    pub t_s: Matrix,
    /// D_s x H, softmax layer; no bias term.
    pub t_h: Matrix,
    pub lstm: LstmParams,
}

impl CaptionerParams {
    pub fn zeros(dims: Dims) -> Self {
        CaptionerParams {
            t_a: Matrix::zeros(dims.d_e, dims.d_a),
            t_v: Matrix::zeros(dims.d_e, dims.d_v),
            t_s: Matrix::zeros(dims.d_e, dims.d_s),
            t_h: Matrix::zeros(dims.d_s, dims.h),
            lstm: LstmParams::zeros(dims.h, dims.d_e),
        }
    }

    /// Uniform init in [-0.08, 0.08], seed-controlled.
    pub fn init<R: Rng>(dims: Dims, rng: &mut R) -> Self {
        const SCALE: f64 = 0.08;
        let mut p = Self::zeros(dims);
        for m in [&mut p.t_a, &mut p.t_v, &mut p.t_s, &mut p.t_h] {
            for v in m.as_mut_slice() {
                *v = rng.gen_range(-SCALE..SCALE);
            }
        }
        p.lstm = LstmParams::init_uniform(dims.h, dims.d_e, SCALE, rng);
        p
    }

    pub fn dims(&self) -> Dims {
        Dims {
            d_v: self.t_v.cols(),
            d_a: self.t_a.cols(),
            d_s: self.t_s.cols(),
            d_e: self.t_s.rows(),
            h: self.t_h.cols(),
        }
    }

    /// Named views over every parameter block, in checkpoint order.
    pub fn blocks(&self) -> Vec<(&'static str, &Matrix)> {
        vec![
            ("t_a", &self.t_a),
            ("t_v", &self.t_v),
            ("t_s", &self.t_s),
            ("t_h", &self.t_h),
            ("lstm.t_g", &self.lstm.t_g),
            ("lstm.t_i", &self.lstm.t_i),
            ("lstm.t_f", &self.lstm.t_f),
            ("lstm.t_o", &self.lstm.t_o),
            ("lstm.r_g", &self.lstm.r_g),
            ("lstm.r_i", &self.lstm.r_i),
            ("lstm.r_f", &self.lstm.r_f),
            ("lstm.r_o", &self.lstm.r_o),
        ]
    }

    pub fn bias_blocks(&self) -> Vec<(&'static str, &Vector)> {
        vec![
            ("lstm.b_g", &self.lstm.b_g),
            ("lstm.b_i", &self.lstm.b_i),
            ("lstm.b_f", &self.lstm.b_f),
            ("lstm.b_o", &self.lstm.b_o),
        ]
    }

    pub fn add_scaled(&mut self, other: &CaptionerParams, s: f64) {
        self.t_a.add_scaled(&other.t_a, s);
        self.t_v.add_scaled(&other.t_v, s);
        self.t_s.add_scaled(&other.t_s, s);
        self.t_h.add_scaled(&other.t_h, s);
        self.lstm.add_scaled(&other.lstm, s);
    }

    pub fn scale(&mut self, s: f64) {
        self.t_a.scale(s);
        self.t_v.scale(s);
        self.t_s.scale(s);
        self.t_h.scale(s);
        self.lstm.scale(s);
    }

    pub fn sum_of_squares(&self) -> f64 {
        self.t_a.sum_of_squares()
            + self.t_v.sum_of_squares()
            + self.t_s.sum_of_squares()
            + self.t_h.sum_of_squares()
            + self.lstm.sum_of_squares()
    }

    pub fn global_norm(&self) -> f64 {
        self.sum_of_squares().sqrt()
    }
}

/// Where a schedule step's input vector came from; drives gradient routing.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepSource {
    Attributes,
    Image,
    Word(usize),
    WordPlusImage(usize),
    WordPlusAttributes(usize),
}

#[derive(Debug, Clone)]
pub struct ScheduleStep {
    pub input: Vector,
    pub source: StepSource,
    /// The word index this step predicts; encode steps predict nothing.
    pub predicts: Option<usize>,
}

/// The ordered sequence of vectors fed to the LSTM for one sentence.
#[derive(Debug, Clone)]
pub struct InputSchedule {
    pub steps: Vec<ScheduleStep>,
    /// Number of leading negative-time (encode) steps.
    pub encode_len: usize,
}

impl InputSchedule {
    pub fn predicting_steps(&self) -> usize {
        self.steps.iter().filter(|s| s.predicts.is_some()).count()
    }
}

fn check_dims(params: &CaptionerParams, img: &ImageFeatures, attrs: &AttributeVector) -> Result<()> {
    let dims = params.dims();
    if img.0.dim() != dims.d_v {
        return Err(Error::Dim(format!(
            "image features dim {} != configured D_v {}",
            img.0.dim(),
            dims.d_v
        )));
    }
    if attrs.0.dim() != dims.d_a {
        return Err(Error::Dim(format!(
            "attribute vector dim {} != configured D_a {}",
            attrs.0.dim(),
            dims.d_a
        )));
    }
    Ok(())
}

/// Word embedding lookup: T_s applied to a one-hot vector is a column read.
fn word_embedding(params: &CaptionerParams, word: usize) -> Result<Vector> {
    if word >= params.t_s.cols() {
        return Err(Error::InvalidInput(format!(
            "word index {} out of vocabulary (D_s = {})",
            word,
            params.t_s.cols()
        )));
    }
    let mut x = Vector::zeros(params.t_s.rows());
    params.t_s.add_column_to(word, &mut x);
    Ok(x)
}

/// The decode-step input rule for a variant. Shared between schedule
/// construction and single-step prediction so both paths produce identical
/// floating-point inputs.
fn decode_input(
    variant: VariantId,
    params: &CaptionerParams,
    word: usize,
    img: &ImageFeatures,
    attrs: &AttributeVector,
) -> Result<(Vector, StepSource)> {
    let mut x = word_embedding(params, word)?;
    let source = match variant {
        VariantId::A1 | VariantId::A2 | VariantId::A3 => StepSource::Word(word),
        VariantId::A4 => {
            x.add_assign(&params.t_v.matvec(&img.0));
            StepSource::WordPlusImage(word)
        }
        VariantId::A5 => {
            x.add_assign(&params.t_a.matvec(&attrs.0));
            StepSource::WordPlusAttributes(word)
        }
    };
    Ok((x, source))
}

/// The negative-time injections for a variant, in feeding order.
fn encode_sources(variant: VariantId) -> &'static [StepSource] {
    match variant {
        VariantId::A1 | VariantId::A4 => &[StepSource::Attributes],
        VariantId::A2 => &[StepSource::Image, StepSource::Attributes],
        VariantId::A3 => &[StepSource::Attributes, StepSource::Image],
        VariantId::A5 => &[StepSource::Image],
    }
}

fn encode_input(
    params: &CaptionerParams,
    source: StepSource,
    img: &ImageFeatures,
    attrs: &AttributeVector,
) -> Vector {
    match source {
        StepSource::Attributes => params.t_a.matvec(&attrs.0),
        StepSource::Image => params.t_v.matvec(&img.0),
        _ => unreachable!("encode steps are image or attribute injections"),
    }
}

/// Builds the variant's full input schedule for one training sentence.
pub fn build_schedule(
    variant: VariantId,
    params: &CaptionerParams,
    img: &ImageFeatures,
    attrs: &AttributeVector,
    words: &TokenSequence,
) -> Result<InputSchedule> {
    check_dims(params, img, attrs)?;
    let idx = words.indices();
    if idx.first() != Some(&BOS) || idx.last() != Some(&EOS) {
        return Err(Error::InvalidInput(
            "sentence must be framed by the start and end sign words".into(),
        ));
    }

    let encode = encode_sources(variant);
    let mut steps = Vec::with_capacity(encode.len() + words.n_s());
    for &source in encode {
        steps.push(ScheduleStep {
            input: encode_input(params, source, img, attrs),
            source,
            predicts: None,
        });
    }
    // Decode step t feeds w_t and predicts w_{t+1}, for t = 0..N_s-1.
    for t in 0..words.n_s() {
        let (input, source) = decode_input(variant, params, idx[t], img, attrs)?;
        steps.push(ScheduleStep { input, source, predicts: Some(idx[t + 1]) });
    }
    Ok(InputSchedule { steps, encode_len: encode.len() })
}

/// Everything forward_loss stores for the backward pass.
pub struct ForwardCache {
    pub schedule: InputSchedule,
    pub states: Vec<LstmState>,
    pub step_caches: Vec<StepCache>,
    /// Softmax distribution at every predicting step, in step order.
    pub probs: Vec<Vector>,
}

/// Sentence negative log-likelihood under teacher forcing (the sum over
/// steps of -log p(w_{t+1} | ...)).
pub fn forward_loss(
    variant: VariantId,
    params: &CaptionerParams,
    img: &ImageFeatures,
    attrs: &AttributeVector,
    words: &TokenSequence,
) -> Result<(f64, ForwardCache)> {
    let schedule = build_schedule(variant, params, img, attrs, words)?;
    let inputs: Vec<Vector> = schedule.steps.iter().map(|s| s.input.clone()).collect();
    let init = LstmState::zeros(params.dims().h);
    let (states, step_caches) = lstm_forward(&params.lstm, &inputs, &init)?;

    let mut loss = 0.0;
    let mut probs = Vec::new();
    for (t, step) in schedule.steps.iter().enumerate() {
        if let Some(target) = step.predicts {
            let logits = params.t_h.matvec(&states[t].h);
            let p = softmax(&logits)?;
            loss -= p[target].ln();
            probs.push(p);
        }
    }
    Ok((loss, ForwardCache { schedule, states, step_caches, probs }))
}

/// Gradient of the sentence loss with respect to every parameter.
pub fn backward(
    params: &CaptionerParams,
    img: &ImageFeatures,
    attrs: &AttributeVector,
    cache: &ForwardCache,
) -> Result<CaptionerParams> {
    let dims = params.dims();
    if cache.states.len() != cache.schedule.steps.len() {
        return Err(Error::Dim("forward cache does not match its schedule".into()));
    }
    let mut grads = CaptionerParams::zeros(dims);

    // Loss head: dlogits = p - onehot(target); accumulate T_h and dh.
    let mut dh = vec![Vector::zeros(dims.h); cache.schedule.steps.len()];
    let mut prob_iter = cache.probs.iter();
    for (t, step) in cache.schedule.steps.iter().enumerate() {
        if let Some(target) = step.predicts {
            let p = prob_iter.next().ok_or_else(|| {
                Error::Dim("fewer cached distributions than predicting steps".into())
            })?;
            let mut dlogits = p.clone();
            dlogits[target] -= 1.0;
            grads.t_h.add_outer(&dlogits, &cache.states[t].h);
            dh[t] = params.t_h.matvec_t(&dlogits);
        }
    }

    let back = lstm_backward(&params.lstm, &cache.step_caches, &dh)?;
    grads.lstm = back.params;

    // Route input gradients to the embedding maps that produced each input.
    for (step, dx) in cache.schedule.steps.iter().zip(&back.inputs) {
        match step.source {
            StepSource::Attributes => grads.t_a.add_outer(dx, &attrs.0),
            StepSource::Image => grads.t_v.add_outer(dx, &img.0),
            StepSource::Word(w) => grads.t_s.add_to_column(w, dx),
            StepSource::WordPlusImage(w) => {
                grads.t_s.add_to_column(w, dx);
                grads.t_v.add_outer(dx, &img.0);
            }
            StepSource::WordPlusAttributes(w) => {
                grads.t_s.add_to_column(w, dx);
                grads.t_a.add_outer(dx, &attrs.0);
            }
        }
    }
    Ok(grads)
}

/// Runs the variant's negative-time injections from the zero state,
/// producing the state decoding starts from.
pub fn encode_state(
    variant: VariantId,
    params: &CaptionerParams,
    img: &ImageFeatures,
    attrs: &AttributeVector,
) -> Result<LstmState> {
    check_dims(params, img, attrs)?;
    let mut state = LstmState::zeros(params.dims().h);
    for &source in encode_sources(variant) {
        let x = encode_input(params, source, img, attrs);
        state = lstm_step(&params.lstm, &x, &state)?.0;
    }
    Ok(state)
}

/// One decode step: feed `last_word` under the variant's input rule and
/// return the next-word distribution with the new state.
pub fn predict_next(
    variant: VariantId,
    params: &CaptionerParams,
    state: &LstmState,
    last_word: usize,
    img: &ImageFeatures,
    attrs: &AttributeVector,
) -> Result<(Vector, LstmState)> {
    let (x, _) = decode_input(variant, params, last_word, img, attrs)?;
    let (next, _) = lstm_step(&params.lstm, &x, state)?;
    let dist = softmax(&params.t_h.matvec(&next.h))?;
    Ok((dist, next))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocab::UNK;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const DIMS: Dims = Dims { d_v: 7, d_a: 5, d_s: 12, d_e: 6, h: 6 };

    fn rand_instance(seed: u64, n_s: usize) -> (CaptionerParams, ImageFeatures, AttributeVector, TokenSequence) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = CaptionerParams::init(DIMS, &mut rng);
        let img = ImageFeatures(Vector::new(
            (0..DIMS.d_v).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        ));
        let attrs = AttributeVector::new(Vector::new(
            (0..DIMS.d_a).map(|_| rng.gen_range(0.0..1.0)).collect(),
        ))
        .unwrap();
        // Interior words avoid BOS/EOS; UNK is a legitimate interior token.
        let mut indices = vec![BOS];
        for _ in 0..n_s.saturating_sub(1) {
            indices.push(rng.gen_range(UNK..DIMS.d_s));
        }
        indices.push(EOS);
        let words = TokenSequence::new(indices).unwrap();
        (params, img, attrs, words)
    }

    #[test]
    fn schedule_counts_per_variant() {
        let (params, img, attrs, words) = rand_instance(1, 3);
        for variant in VariantId::ALL {
            let s = build_schedule(variant, &params, &img, &attrs, &words).unwrap();
            let expect_encode = match variant {
                VariantId::A2 | VariantId::A3 => 2,
                _ => 1,
            };
            assert_eq!(s.encode_len, expect_encode, "{variant}");
            assert_eq!(s.predicting_steps(), 3, "{variant}");
            assert_eq!(s.steps.len(), expect_encode + 3, "{variant}");
            for (i, step) in s.steps.iter().enumerate() {
                assert_eq!(step.predicts.is_none(), i < expect_encode);
            }
        }
    }

    #[test]
    fn a2_a3_swap_encode_order() {
        let (params, img, attrs, words) = rand_instance(2, 4);
        let s2 = build_schedule(VariantId::A2, &params, &img, &attrs, &words).unwrap();
        let s3 = build_schedule(VariantId::A3, &params, &img, &attrs, &words).unwrap();
        assert_eq!(s2.steps[0].input, s3.steps[1].input);
        assert_eq!(s2.steps[1].input, s3.steps[0].input);
        assert_eq!(s2.steps[0].source, StepSource::Image);
        assert_eq!(s3.steps[0].source, StepSource::Attributes);
    }

    #[test]
    fn a4_with_zero_image_degenerates_to_a1() {
        let (params, _, attrs, words) = rand_instance(3, 4);
        let zero_img = ImageFeatures(Vector::zeros(DIMS.d_v));
        let s1 = build_schedule(VariantId::A1, &params, &zero_img, &attrs, &words).unwrap();
        let s4 = build_schedule(VariantId::A4, &params, &zero_img, &attrs, &words).unwrap();
        assert_eq!(s1.steps.len(), s4.steps.len());
        for (a, b) in s1.steps.iter().zip(&s4.steps) {
            assert_eq!(a.input, b.input);
            assert_eq!(a.predicts, b.predicts);
        }
    }

    #[test]
    fn a5_with_zero_attributes_is_image_only() {
        let (params, img, _, words) = rand_instance(4, 3);
        let zero_attrs = AttributeVector::new(Vector::zeros(DIMS.d_a)).unwrap();
        let s5 = build_schedule(VariantId::A5, &params, &img, &zero_attrs, &words).unwrap();
        // Expected image-only schedule: encode [T_v I], decode T_s w_t.
        assert_eq!(s5.encode_len, 1);
        assert_eq!(s5.steps[0].input, params.t_v.matvec(&img.0));
        for (t, step) in s5.steps[1..].iter().enumerate() {
            let mut expect = Vector::zeros(DIMS.d_e);
            params.t_s.add_column_to(words.indices()[t], &mut expect);
            // T_a * 0 contributes exact zeros.
            let mut with_zero = expect.clone();
            with_zero.add_assign(&params.t_a.matvec(&zero_attrs.0));
            assert_eq!(step.input, with_zero);
            assert_eq!(step.input, expect);
        }
    }

    #[test]
    fn schedule_rejects_bad_inputs() {
        let (params, img, attrs, _) = rand_instance(5, 3);
        // Sentences missing a sign word cannot even be constructed.
        assert!(TokenSequence::new(vec![4, EOS]).is_err());
        assert!(TokenSequence::new(vec![BOS, 4]).is_err());
        let ok = TokenSequence::new(vec![BOS, 4, EOS]).unwrap();
        assert!(build_schedule(VariantId::A1, &params, &img, &attrs, &ok).is_ok());
        let wrong_img = ImageFeatures(Vector::zeros(DIMS.d_v + 1));
        assert!(build_schedule(VariantId::A2, &params, &wrong_img, &attrs, &ok).is_err());
        let wrong_attrs = AttributeVector::new(Vector::zeros(DIMS.d_a + 2)).unwrap();
        assert!(build_schedule(VariantId::A1, &params, &img, &wrong_attrs, &ok).is_err());
    }

    #[test]
    fn uniform_loss_with_zero_softmax_weights() {
        let (mut params, img, attrs, words) = rand_instance(6, 4);
        params.t_h = Matrix::zeros(DIMS.d_s, DIMS.h);
        let expect = 4.0 * (DIMS.d_s as f64).ln();
        for variant in VariantId::ALL {
            let (loss, _) = forward_loss(variant, &params, &img, &attrs, &words).unwrap();
            assert!((loss - expect).abs() < 1e-9, "{variant}: {loss} vs {expect}");
        }
    }

    #[test]
    fn loss_is_nonnegative() {
        for seed in 0..10 {
            let (params, img, attrs, words) = rand_instance(100 + seed, 4);
            for variant in VariantId::ALL {
                let (loss, _) = forward_loss(variant, &params, &img, &attrs, &words).unwrap();
                assert!(loss >= 0.0);
            }
        }
    }

    // Independent scalar recomputation of the loss: raw loops over the raw
    // weight slices, no linalg/lstm calls.
    fn scalar_loss(
        variant: VariantId,
        p: &CaptionerParams,
        img: &[f64],
        attrs: &[f64],
        words: &[usize],
    ) -> f64 {
        let d = p.dims();
        let matvec = |m: &Matrix, x: &[f64]| -> Vec<f64> {
            (0..m.rows())
                .map(|r| (0..m.cols()).map(|c| m.get(r, c) * x[c]).sum())
                .collect()
        };
        let add = |a: &[f64], b: &[f64]| -> Vec<f64> {
            a.iter().zip(b).map(|(x, y)| x + y).collect()
        };
        let column = |m: &Matrix, c: usize| -> Vec<f64> {
            (0..m.rows()).map(|r| m.get(r, c)).collect()
        };

        let mut inputs: Vec<Vec<f64>> = Vec::new();
        let mut targets: Vec<Option<usize>> = Vec::new();
        let enc: Vec<Vec<f64>> = match variant {
            VariantId::A1 | VariantId::A4 => vec![matvec(&p.t_a, attrs)],
            VariantId::A2 => vec![matvec(&p.t_v, img), matvec(&p.t_a, attrs)],
            VariantId::A3 => vec![matvec(&p.t_a, attrs), matvec(&p.t_v, img)],
            VariantId::A5 => vec![matvec(&p.t_v, img)],
        };
        for e in enc {
            inputs.push(e);
            targets.push(None);
        }
        for t in 0..words.len() - 1 {
            let mut x = column(&p.t_s, words[t]);
            match variant {
                VariantId::A4 => x = add(&x, &matvec(&p.t_v, img)),
                VariantId::A5 => x = add(&x, &matvec(&p.t_a, attrs)),
                _ => {}
            }
            inputs.push(x);
            targets.push(Some(words[t + 1]));
        }

        let mut h = vec![0.0; d.h];
        let mut c = vec![0.0; d.h];
        let mut loss = 0.0;
        for (x, target) in inputs.iter().zip(&targets) {
            let gate = |t: &Matrix, r: &Matrix, b: &Vector, k: usize| -> f64 {
                let mut acc = 0.0;
                for (j, xv) in x.iter().enumerate() {
                    acc += t.get(k, j) * xv;
                }
                for (j, hv) in h.iter().enumerate() {
                    acc += r.get(k, j) * hv;
                }
                acc + b[k]
            };
            let mut nh = vec![0.0; d.h];
            let mut nc = vec![0.0; d.h];
            for k in 0..d.h {
                let g = gate(&p.lstm.t_g, &p.lstm.r_g, &p.lstm.b_g, k).tanh();
                let i = 1.0 / (1.0 + (-gate(&p.lstm.t_i, &p.lstm.r_i, &p.lstm.b_i, k)).exp());
                let f = 1.0 / (1.0 + (-gate(&p.lstm.t_f, &p.lstm.r_f, &p.lstm.b_f, k)).exp());
                let o = 1.0 / (1.0 + (-gate(&p.lstm.t_o, &p.lstm.r_o, &p.lstm.b_o, k)).exp());
                nc[k] = g * i + c[k] * f;
                nh[k] = nc[k].tanh() * o;
            }
            h = nh;
            c = nc;
            if let Some(w) = target {
                let logits = matvec(&p.t_h, &h);
                let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
                let sum: f64 = exps.iter().sum();
                loss -= (exps[*w] / sum).ln();
            }
        }
        loss
    }

    #[test]
    fn loss_matches_scalar_oracle() {
        for seed in 0..5 {
            let (params, img, attrs, words) = rand_instance(200 + seed, 4);
            for variant in VariantId::ALL {
                let (loss, _) = forward_loss(variant, &params, &img, &attrs, &words).unwrap();
                let oracle = scalar_loss(
                    variant,
                    &params,
                    img.0.as_slice(),
                    attrs.0.as_slice(),
                    words.indices(),
                );
                assert!(
                    (loss - oracle).abs() < 1e-12,
                    "{variant} seed {seed}: {loss} vs {oracle}"
                );
            }
        }
    }

    #[test]
    fn softmax_head_gradient_by_hand() {
        // One decode step: d loss / d T_h[target] = (p(target) - 1) * h.
        let (params, img, attrs, _) = rand_instance(7, 1);
        let words = TokenSequence::new(vec![BOS, EOS]).unwrap();
        let (_, cache) = forward_loss(VariantId::A1, &params, &img, &attrs, &words).unwrap();
        let grads = backward(&params, &img, &attrs, &cache).unwrap();
        let p = &cache.probs[0];
        let h = &cache.states.last().unwrap().h;
        for (j, row_grad) in (0..DIMS.d_s).map(|r| (r, grads.t_h.row(r))) {
            let coeff = if j == EOS { p[j] - 1.0 } else { p[j] };
            for (k, g) in row_grad.iter().enumerate() {
                assert!((g - coeff * h[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn a1_never_touches_image_map() {
        let (params, img, attrs, words) = rand_instance(8, 4);
        let (_, cache) = forward_loss(VariantId::A1, &params, &img, &attrs, &words).unwrap();
        let grads = backward(&params, &img, &attrs, &cache).unwrap();
        assert_eq!(grads.t_v.sum_of_squares(), 0.0);
    }

    #[test]
    fn every_participating_block_gets_gradient() {
        for variant in VariantId::ALL {
            let mut accum = CaptionerParams::zeros(DIMS);
            for seed in 0..40 {
                let (params, img, attrs, words) = rand_instance(300 + seed, 5);
                let (_, cache) = forward_loss(variant, &params, &img, &attrs, &words).unwrap();
                let grads = backward(&params, &img, &attrs, &cache).unwrap();
                // Accumulate magnitudes so sign cancellation can't hide life.
                let mut abs = grads.clone();
                for m in [&mut abs.t_a, &mut abs.t_v, &mut abs.t_s, &mut abs.t_h] {
                    for v in m.as_mut_slice() {
                        *v = v.abs();
                    }
                }
                for m in abs.lstm.matrices_mut() {
                    for v in m.as_mut_slice() {
                        *v = v.abs();
                    }
                }
                for b in abs.lstm.biases_mut() {
                    for v in b.as_mut_slice() {
                        *v = v.abs();
                    }
                }
                accum.add_scaled(&abs, 1.0);
            }
            let participates_tv = !matches!(variant, VariantId::A1);
            for (name, block) in accum.blocks() {
                if name == "t_v" && !participates_tv {
                    assert_eq!(block.sum_of_squares(), 0.0, "{variant} {name}");
                    continue;
                }
                for r in 0..block.rows() {
                    for c in 0..block.cols() {
                        // The end sign is target-only: its embedding column
                        // is never fed, so it can receive no gradient.
                        if name == "t_s" && c == EOS {
                            assert_eq!(block.get(r, c), 0.0);
                            continue;
                        }
                        assert!(
                            block.get(r, c) > 0.0,
                            "{variant}: {name}[{r},{c}] never received gradient"
                        );
                    }
                }
            }
            for (name, bias) in accum.bias_blocks() {
                assert!(bias.iter().all(|&v| v > 0.0), "{variant} {name}");
            }
        }
    }

    #[test]
    fn one_small_sgd_step_decreases_loss() {
        for seed in 0..20 {
            let (mut params, img, attrs, words) = rand_instance(400 + seed, 4);
            let variant = VariantId::ALL[(seed % 5) as usize];
            let (loss0, cache) = forward_loss(variant, &params, &img, &attrs, &words).unwrap();
            let grads = backward(&params, &img, &attrs, &cache).unwrap();
            params.add_scaled(&grads, -1e-3);
            let (loss1, _) = forward_loss(variant, &params, &img, &attrs, &words).unwrap();
            assert!(loss1 < loss0, "seed {seed}: {loss1} !< {loss0}");
        }
    }

    #[test]
    fn teacher_forced_predict_next_matches_forward_loss() {
        let (params, img, attrs, words) = rand_instance(9, 5);
        for variant in VariantId::ALL {
            let (_, cache) = forward_loss(variant, &params, &img, &attrs, &words).unwrap();
            let mut state = encode_state(variant, &params, &img, &attrs).unwrap();
            for (t, p_fwd) in cache.probs.iter().enumerate() {
                let (p, next) =
                    predict_next(variant, &params, &state, words.indices()[t], &img, &attrs)
                        .unwrap();
                assert_eq!(p, *p_fwd, "{variant} step {t}");
                state = next;
            }
        }
    }

    #[test]
    fn predict_next_distribution_sums_to_one() {
        let (params, img, attrs, _) = rand_instance(10, 3);
        let state = encode_state(VariantId::A3, &params, &img, &attrs).unwrap();
        let (p, _) = predict_next(VariantId::A3, &params, &state, BOS, &img, &attrs).unwrap();
        let sum: f64 = p.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn predict_next_rejects_out_of_vocab_word() {
        let (params, img, attrs, _) = rand_instance(11, 3);
        let state = encode_state(VariantId::A1, &params, &img, &attrs).unwrap();
        assert!(predict_next(VariantId::A1, &params, &state, DIMS.d_s, &img, &attrs).is_err());
    }

    #[test]
    fn a5_with_zero_attrs_matches_plain_decode_step() {
        let (params, img, _, _) = rand_instance(12, 3);
        let zero = AttributeVector::new(Vector::zeros(DIMS.d_a)).unwrap();
        let state = encode_state(VariantId::A5, &params, &img, &zero).unwrap();
        let (p5, _) = predict_next(VariantId::A5, &params, &state, BOS, &img, &zero).unwrap();
        // An attribute-free decode step: plain word embedding input.
        let mut x = Vector::zeros(DIMS.d_e);
        params.t_s.add_column_to(BOS, &mut x);
        let (next, _) = lstm_step(&params.lstm, &x, &state).unwrap();
        let plain = softmax(&params.t_h.matvec(&next.h)).unwrap();
        assert_eq!(p5, plain);
    }

    #[test]
    fn schedule_shapes_for_all_lengths() {
        for n_s in 1..=20 {
            let (params, img, attrs, words) = rand_instance(500 + n_s as u64, n_s);
            assert_eq!(words.n_s(), n_s);
            for variant in VariantId::ALL {
                let s = build_schedule(variant, &params, &img, &attrs, &words).unwrap();
                assert_eq!(s.predicting_steps(), n_s);
                let expect = match variant {
                    VariantId::A2 | VariantId::A3 => 2,
                    _ => 1,
                };
                assert_eq!(s.encode_len, expect);
            }
        }
    }
}

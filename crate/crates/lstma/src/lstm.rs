//! The LSTM cell: single-step forward, full-sequence forward with activation
//! caching, and the exact backward pass through time.
//!
//! For input x^t and previous state (h^{t-1}, c^{t-1}) the step computes
//!
//! ```text
//! g = tanh(T_g x + R_g h + b_g)      cell input
//! i = sigma(T_i x + R_i h + b_i)     input gate
//! f = sigma(T_f x + R_f h + b_f)     forget gate
//! c = g(*)i + c_prev(*)f             cell state
//! o = sigma(T_o x + R_o h + b_o)     output gate
//! h = tanh(c)(*)o                    cell output
//! ```
//!
//! No peepholes, no layer norm, single layer.

use crate::linalg::{affine, sigmoid, tanh, Matrix, Vector};
use crate::{Error, Result};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// All learnable weights of one LSTM layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LstmParams {
    pub t_g: Matrix,
    pub t_i: Matrix,
    pub t_f: Matrix,
    pub t_o: Matrix,
    pub r_g: Matrix,
    pub r_i: Matrix,
    pub r_f: Matrix,
    pub r_o: Matrix,
    pub b_g: Vector,
    pub b_i: Vector,
    pub b_f: Vector,
    pub b_o: Vector,
}

impl LstmParams {
    pub fn zeros(hidden: usize, input: usize) -> Self {
        LstmParams {
            t_g: Matrix::zeros(hidden, input),
            t_i: Matrix::zeros(hidden, input),
            t_f: Matrix::zeros(hidden, input),
            t_o: Matrix::zeros(hidden, input),
            r_g: Matrix::zeros(hidden, hidden),
            r_i: Matrix::zeros(hidden, hidden),
            r_f: Matrix::zeros(hidden, hidden),
            r_o: Matrix::zeros(hidden, hidden),
            b_g: Vector::zeros(hidden),
            b_i: Vector::zeros(hidden),
            b_f: Vector::zeros(hidden),
            b_o: Vector::zeros(hidden),
        }
    }

    pub fn init_uniform<R: Rng>(hidden: usize, input: usize, scale: f64, rng: &mut R) -> Self {
        let mut p = Self::zeros(hidden, input);
        for m in p.matrices_mut() {
            for v in m.as_mut_slice() {
                *v = rng.gen_range(-scale..scale);
            }
        }
        for b in p.biases_mut() {
            for v in b.as_mut_slice() {
                *v = rng.gen_range(-scale..scale);
            }
        }
        p
    }

    pub fn hidden_dim(&self) -> usize {
        self.b_g.dim()
    }

    pub fn input_dim(&self) -> usize {
        self.t_g.cols()
    }

    pub fn matrices(&self) -> [&Matrix; 8] {
        [&self.t_g, &self.t_i, &self.t_f, &self.t_o, &self.r_g, &self.r_i, &self.r_f, &self.r_o]
    }

    pub fn matrices_mut(&mut self) -> [&mut Matrix; 8] {
        [
            &mut self.t_g,
            &mut self.t_i,
            &mut self.t_f,
            &mut self.t_o,
            &mut self.r_g,
            &mut self.r_i,
            &mut self.r_f,
            &mut self.r_o,
        ]
    }

    pub fn biases(&self) -> [&Vector; 4] {
        [&self.b_g, &self.b_i, &self.b_f, &self.b_o]
    }

    pub fn biases_mut(&mut self) -> [&mut Vector; 4] {
        [&mut self.b_g, &mut self.b_i, &mut self.b_f, &mut self.b_o]
    }

    /// self += s * other, field by field. Used for gradient accumulation
    /// and SGD updates.
    pub fn add_scaled(&mut self, other: &LstmParams, s: f64) {
        for (a, b) in self.matrices_mut().into_iter().zip(other.matrices()) {
            a.add_scaled(b, s);
        }
        for (a, b) in self.biases_mut().into_iter().zip(other.biases()) {
            a.add_scaled(b, s);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for m in self.matrices_mut() {
            m.scale(s);
        }
        for b in self.biases_mut() {
            b.scale(s);
        }
    }

    pub fn sum_of_squares(&self) -> f64 {
        self.matrices().iter().map(|m| m.sum_of_squares()).sum::<f64>()
            + self.biases().iter().map(|b| b.sum_of_squares()).sum::<f64>()
    }
}

/// Recurrent state carried between steps.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmState {
    pub h: Vector,
    pub c: Vector,
}

impl LstmState {
    pub fn zeros(hidden: usize) -> Self {
        LstmState { h: Vector::zeros(hidden), c: Vector::zeros(hidden) }
    }
}

/// Activations stored by the forward pass for exact backpropagation.
#[derive(Debug, Clone)]
pub struct StepCache {
    pub x: Vector,
    pub h_prev: Vector,
    pub c_prev: Vector,
    pub g: Vector,
    pub i: Vector,
    pub f: Vector,
    pub c: Vector,
    pub o: Vector,
    pub h: Vector,
}

/// One LSTM update. Returns the new state and the cache needed by backward.
pub fn lstm_step(params: &LstmParams, x: &Vector, prev: &LstmState) -> Result<(LstmState, StepCache)> {
    let g = tanh(&affine(&params.t_g, x, &params.r_g, &prev.h, &params.b_g)?)?;
    let i = sigmoid(&affine(&params.t_i, x, &params.r_i, &prev.h, &params.b_i)?)?;
    let f = sigmoid(&affine(&params.t_f, x, &params.r_f, &prev.h, &params.b_f)?)?;
    let mut c = g.hadamard(&i);
    c.add_assign(&prev.c.hadamard(&f));
    let o = sigmoid(&affine(&params.t_o, x, &params.r_o, &prev.h, &params.b_o)?)?;
    let h = tanh(&c)?.hadamard(&o);

    let state = LstmState { h: h.clone(), c: c.clone() };
    let cache = StepCache {
        x: x.clone(),
        h_prev: prev.h.clone(),
        c_prev: prev.c.clone(),
        g,
        i,
        f,
        c,
        o,
        h,
    };
    Ok((state, cache))
}

/// Runs the cell over a whole input sequence. An empty input sequence is
/// valid and yields empty outputs.
pub fn lstm_forward(
    params: &LstmParams,
    inputs: &[Vector],
    init: &LstmState,
) -> Result<(Vec<LstmState>, Vec<StepCache>)> {
    let mut states = Vec::with_capacity(inputs.len());
    let mut caches = Vec::with_capacity(inputs.len());
    let mut prev = init.clone();
    for x in inputs {
        let (state, cache) = lstm_step(params, x, &prev)?;
        prev = state.clone();
        states.push(state);
        caches.push(cache);
    }
    Ok((states, caches))
}

/// Gradients produced by [`lstm_backward`].
pub struct LstmBackward {
    /// Gradients with respect to every parameter, same shape as the params.
    pub params: LstmParams,
    /// Gradient with respect to each step's input x^t.
    pub inputs: Vec<Vector>,
    /// Gradient with respect to the initial state.
    pub init: LstmState,
}

/// Exact backward pass for `L = sum_t <dh[t], h^t>`; callers extend dh with
/// whatever loss head sits on top of the cell outputs.
pub fn lstm_backward(
    params: &LstmParams,
    caches: &[StepCache],
    dh: &[Vector],
) -> Result<LstmBackward> {
    if caches.len() != dh.len() {
        return Err(Error::Dim(format!(
            "lstm_backward: {} caches but {} upstream gradients",
            caches.len(),
            dh.len()
        )));
    }
    let hidden = params.hidden_dim();
    let mut grads = LstmParams::zeros(hidden, params.input_dim());
    let mut dx = vec![Vector::zeros(params.input_dim()); caches.len()];

    // Gradients flowing into h^{t-1} and c^{t-1} from the step above.
    let mut dh_carry = Vector::zeros(hidden);
    let mut dc_carry = Vector::zeros(hidden);

    for (t, cache) in caches.iter().enumerate().rev() {
        let mut dh_t = dh[t].clone();
        dh_t.add_assign(&dh_carry);

        let tanh_c = Vector::new(cache.c.iter().map(|v| v.tanh()).collect());

        // h = tanh(c) (*) o
        let mut dpre_o = Vector::zeros(hidden);
        let mut dc = dc_carry.clone();
        for k in 0..hidden {
            let d_o = dh_t[k] * tanh_c[k];
            dpre_o[k] = d_o * cache.o[k] * (1.0 - cache.o[k]);
            dc[k] += dh_t[k] * cache.o[k] * (1.0 - tanh_c[k] * tanh_c[k]);
        }

        // c = g (*) i + c_prev (*) f
        let mut dpre_g = Vector::zeros(hidden);
        let mut dpre_i = Vector::zeros(hidden);
        let mut dpre_f = Vector::zeros(hidden);
        let mut dc_prev = Vector::zeros(hidden);
        for k in 0..hidden {
            dpre_g[k] = dc[k] * cache.i[k] * (1.0 - cache.g[k] * cache.g[k]);
            dpre_i[k] = dc[k] * cache.g[k] * cache.i[k] * (1.0 - cache.i[k]);
            dpre_f[k] = dc[k] * cache.c_prev[k] * cache.f[k] * (1.0 - cache.f[k]);
            dc_prev[k] = dc[k] * cache.f[k];
        }

        grads.t_g.add_outer(&dpre_g, &cache.x);
        grads.t_i.add_outer(&dpre_i, &cache.x);
        grads.t_f.add_outer(&dpre_f, &cache.x);
        grads.t_o.add_outer(&dpre_o, &cache.x);
        grads.r_g.add_outer(&dpre_g, &cache.h_prev);
        grads.r_i.add_outer(&dpre_i, &cache.h_prev);
        grads.r_f.add_outer(&dpre_f, &cache.h_prev);
        grads.r_o.add_outer(&dpre_o, &cache.h_prev);
        grads.b_g.add_assign(&dpre_g);
        grads.b_i.add_assign(&dpre_i);
        grads.b_f.add_assign(&dpre_f);
        grads.b_o.add_assign(&dpre_o);

        let mut d_x = params.t_g.matvec_t(&dpre_g);
        d_x.add_assign(&params.t_i.matvec_t(&dpre_i));
        d_x.add_assign(&params.t_f.matvec_t(&dpre_f));
        d_x.add_assign(&params.t_o.matvec_t(&dpre_o));
        dx[t] = d_x;

        let mut d_h_prev = params.r_g.matvec_t(&dpre_g);
        d_h_prev.add_assign(&params.r_i.matvec_t(&dpre_i));
        d_h_prev.add_assign(&params.r_f.matvec_t(&dpre_f));
        d_h_prev.add_assign(&params.r_o.matvec_t(&dpre_o));
        dh_carry = d_h_prev;
        dc_carry = dc_prev;
    }

    Ok(LstmBackward {
        params: grads,
        inputs: dx,
        init: LstmState { h: dh_carry, c: dc_carry },
    })
}

//! Dense vector/matrix arithmetic and the elementwise nonlinearities used by
//! every other module. All storage is row-major `f64`; dimensions here are a
//! few thousand at most, so there is no BLAS and no sparsity.

use crate::{Error, Result};
use serde::{Deserialize, Serialize};

/// A dense real vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vector {
    data: Vec<f64>,
}

impl Vector {
    pub fn new(data: Vec<f64>) -> Self {
        Vector { data }
    }

    pub fn zeros(dim: usize) -> Self {
        Vector { data: vec![0.0; dim] }
    }

    pub fn dim(&self) -> usize {
        self.data.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.data.iter()
    }

    /// self += other
    pub fn add_assign(&mut self, other: &Vector) {
        debug_assert_eq!(self.dim(), other.dim());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// self += s * other
    pub fn add_scaled(&mut self, other: &Vector, s: f64) {
        debug_assert_eq!(self.dim(), other.dim());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for a in &mut self.data {
            *a *= s;
        }
    }

    /// Elementwise product.
    pub fn hadamard(&self, other: &Vector) -> Vector {
        debug_assert_eq!(self.dim(), other.dim());
        Vector::new(self.data.iter().zip(&other.data).map(|(a, b)| a * b).collect())
    }

    pub fn dot(&self, other: &Vector) -> f64 {
        debug_assert_eq!(self.dim(), other.dim());
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn sum_of_squares(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }
}

impl std::ops::Index<usize> for Vector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.data[i]
    }
}

impl std::ops::IndexMut<usize> for Vector {
    fn index_mut(&mut self, i: usize) -> &mut f64 {
        &mut self.data[i]
    }
}

/// A dense real matrix, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    data: Vec<f64>,
    rows: usize,
    cols: usize,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { data: vec![0.0; rows * cols], rows, cols }
    }

    pub fn from_rows(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Dim(format!(
                "matrix data length {} != {} rows x {} cols",
                data.len(),
                rows,
                cols
            )));
        }
        Ok(Matrix { data, rows, cols })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Matrix-vector product M x.
    pub fn matvec(&self, x: &Vector) -> Vector {
        debug_assert_eq!(self.cols, x.dim());
        let mut out = vec![0.0; self.rows];
        for (r, o) in out.iter_mut().enumerate() {
            let row = &self.data[r * self.cols..(r + 1) * self.cols];
            let mut acc = 0.0;
            for (m, v) in row.iter().zip(x.as_slice()) {
                acc += m * v;
            }
            *o = acc;
        }
        Vector::new(out)
    }

    /// Transposed product M^T y, without materializing the transpose.
    pub fn matvec_t(&self, y: &Vector) -> Vector {
        debug_assert_eq!(self.rows, y.dim());
        let mut out = vec![0.0; self.cols];
        for r in 0..self.rows {
            let yr = y[r];
            if yr == 0.0 {
                continue;
            }
            let row = &self.data[r * self.cols..(r + 1) * self.cols];
            for (o, m) in out.iter_mut().zip(row) {
                *o += yr * m;
            }
        }
        Vector::new(out)
    }

    /// Rank-one update: self += y x^T. Used for weight gradients.
    pub fn add_outer(&mut self, y: &Vector, x: &Vector) {
        debug_assert_eq!(self.rows, y.dim());
        debug_assert_eq!(self.cols, x.dim());
        for r in 0..self.rows {
            let yr = y[r];
            if yr == 0.0 {
                continue;
            }
            let row = &mut self.data[r * self.cols..(r + 1) * self.cols];
            for (m, v) in row.iter_mut().zip(x.as_slice()) {
                *m += yr * v;
            }
        }
    }

    /// Adds column `c` into `out` (used for embedding-style lookups of
    /// one-hot products and their gradients).
    pub fn add_column_to(&self, c: usize, out: &mut Vector) {
        debug_assert_eq!(self.rows, out.dim());
        for r in 0..self.rows {
            out[r] += self.data[r * self.cols + c];
        }
    }

    /// Adds `v` into column `c` of self.
    pub fn add_to_column(&mut self, c: usize, v: &Vector) {
        debug_assert_eq!(self.rows, v.dim());
        for r in 0..self.rows {
            self.data[r * self.cols + c] += v[r];
        }
    }

    /// self += s * other
    pub fn add_scaled(&mut self, other: &Matrix, s: f64) {
        debug_assert_eq!(self.rows, other.rows);
        debug_assert_eq!(self.cols, other.cols);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for a in &mut self.data {
            *a *= s;
        }
    }

    pub fn sum_of_squares(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }
}

/// Elementwise logistic sigmoid.
pub fn sigmoid(x: &Vector) -> Result<Vector> {
    if !x.is_finite() {
        return Err(Error::NonFinite("sigmoid input".into()));
    }
    Ok(Vector::new(x.iter().map(|&v| sigmoid_scalar(v)).collect()))
}

pub(crate) fn sigmoid_scalar(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// Elementwise hyperbolic tangent.
pub fn tanh(x: &Vector) -> Result<Vector> {
    if !x.is_finite() {
        return Err(Error::NonFinite("tanh input".into()));
    }
    Ok(Vector::new(x.iter().map(|&v| v.tanh()).collect()))
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax(logits: &Vector) -> Result<Vector> {
    if logits.dim() == 0 {
        return Err(Error::InvalidInput("softmax of empty vector".into()));
    }
    if !logits.is_finite() {
        return Err(Error::NonFinite("softmax input".into()));
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for v in &mut out {
        *v /= sum;
    }
    Ok(Vector::new(out))
}

/// Gate pre-activation T x + R h + b.
pub fn affine(t: &Matrix, x: &Vector, r: &Matrix, h: &Vector, b: &Vector) -> Result<Vector> {
    if t.cols() != x.dim() {
        return Err(Error::Dim(format!("affine: T.cols ({}) != x.dim ({})", t.cols(), x.dim())));
    }
    if r.cols() != h.dim() {
        return Err(Error::Dim(format!("affine: R.cols ({}) != h.dim ({})", r.cols(), h.dim())));
    }
    if t.rows() != r.rows() {
        return Err(Error::Dim(format!("affine: T.rows ({}) != R.rows ({})", t.rows(), r.rows())));
    }
    if t.rows() != b.dim() {
        return Err(Error::Dim(format!("affine: T.rows ({}) != b.dim ({})", t.rows(), b.dim())));
    }
    let mut out = t.matvec(x);
    out.add_assign(&r.matvec(h));
    out.add_assign(b);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn vec_close(a: &Vector, b: &[f64], tol: f64) -> bool {
        a.dim() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn sigmoid_at_zero_is_half() {
        let y = sigmoid(&Vector::new(vec![0.0])).unwrap();
        assert_eq!(y[0], 0.5);
    }

    #[test]
    fn sigmoid_known_value() {
        // sigma(2) = 1/(1+e^-2)
        let y = sigmoid(&Vector::new(vec![2.0])).unwrap();
        assert!((y[0] - 0.8807970779778823).abs() < 1e-9);
    }

    #[test]
    fn sigmoid_rejects_non_finite() {
        assert!(sigmoid(&Vector::new(vec![f64::NAN])).is_err());
        assert!(tanh(&Vector::new(vec![f64::INFINITY])).is_err());
    }

    #[test]
    fn tanh_known_values() {
        let y = tanh(&Vector::new(vec![0.0, 1.0])).unwrap();
        assert_eq!(y[0], 0.0);
        assert!((y[1] - 0.7615941559557649).abs() < 1e-9);
    }

    #[test]
    fn softmax_uniform_on_constant_logits() {
        for c in [-3.0, 0.0, 42.0] {
            let y = softmax(&Vector::new(vec![c; 4])).unwrap();
            assert!(vec_close(&y, &[0.25; 4], 1e-15));
        }
    }

    #[test]
    fn softmax_known_value() {
        // [1, 0] -> [e/(e+1), 1/(e+1)]
        let y = softmax(&Vector::new(vec![1.0, 0.0])).unwrap();
        assert!((y[0] - 0.7310585786300049).abs() < 1e-9);
        assert!((y[1] - 0.2689414213699951).abs() < 1e-9);
    }

    #[test]
    fn softmax_rejects_empty() {
        assert!(softmax(&Vector::new(vec![])).is_err());
    }

    #[test]
    fn affine_zero_weights_pass_bias() {
        let t = Matrix::zeros(2, 3);
        let r = Matrix::zeros(2, 2);
        let b = Vector::new(vec![1.0, 2.0]);
        let out = affine(&t, &Vector::zeros(3), &r, &Vector::zeros(2), &b).unwrap();
        assert_eq!(out.as_slice(), &[1.0, 2.0]);
    }

    #[test]
    fn affine_identity_passes_input() {
        let t = Matrix::identity(2);
        let r = Matrix::zeros(2, 2);
        let out = affine(
            &t,
            &Vector::new(vec![3.0, 4.0]),
            &r,
            &Vector::zeros(2),
            &Vector::zeros(2),
        )
        .unwrap();
        assert_eq!(out.as_slice(), &[3.0, 4.0]);
    }

    #[test]
    fn affine_hand_case() {
        // T=[[1,1]], x=[2,3], R=[[2]], h=[1], b=[0.5] -> [7.5]
        let t = Matrix::from_rows(1, 2, vec![1.0, 1.0]).unwrap();
        let r = Matrix::from_rows(1, 1, vec![2.0]).unwrap();
        let out = affine(
            &t,
            &Vector::new(vec![2.0, 3.0]),
            &r,
            &Vector::new(vec![1.0]),
            &Vector::new(vec![0.5]),
        )
        .unwrap();
        assert!(vec_close(&out, &[7.5], 1e-12));
    }

    #[test]
    fn affine_names_offending_operand() {
        let t = Matrix::zeros(2, 3);
        let r = Matrix::zeros(2, 2);
        let err = affine(&t, &Vector::zeros(4), &r, &Vector::zeros(2), &Vector::zeros(2))
            .unwrap_err();
        assert!(err.to_string().contains("T.cols"));
        let err = affine(&t, &Vector::zeros(3), &r, &Vector::zeros(5), &Vector::zeros(2))
            .unwrap_err();
        assert!(err.to_string().contains("R.cols"));
    }

    proptest! {
        #[test]
        fn softmax_is_probability_vector(
            logits in proptest::collection::vec(-1e3f64..1e3, 1..12)
        ) {
            let y = softmax(&Vector::new(logits)).unwrap();
            let sum: f64 = y.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
            prop_assert!(y.iter().all(|&p| (0.0..=1.0).contains(&p)));
        }

        #[test]
        fn softmax_shift_invariance(
            logits in proptest::collection::vec(-10.0f64..10.0, 1..8),
            c in -5.0f64..5.0,
        ) {
            let a = softmax(&Vector::new(logits.clone())).unwrap();
            let shifted: Vec<f64> = logits.iter().map(|v| v + c).collect();
            let b = softmax(&Vector::new(shifted)).unwrap();
            for (x, y) in a.iter().zip(b.iter()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn sigmoid_symmetry_and_monotonicity(x in -8.0f64..8.0, dx in 1e-2f64..5.0) {
            let v = Vector::new(vec![x, -x, x + dx]);
            let y = sigmoid(&v).unwrap();
            prop_assert!((y[0] + y[1] - 1.0).abs() < 1e-12);
            prop_assert!(y[2] > y[0]);
            let t = tanh(&v).unwrap();
            prop_assert!((t[0] + t[1]).abs() < 1e-12);
            prop_assert!(t[2] > t[0]);
        }

        #[test]
        fn affine_is_linear_by_superposition(seed in 0u64..1000) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut randv = |n: usize| {
                Vector::new((0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
            };
            let x1 = randv(3);
            let x2 = randv(3);
            let h = randv(2);
            let mut rng2 = rand_chacha::ChaCha8Rng::seed_from_u64(seed + 1);
            let t = Matrix::from_rows(2, 3, (0..6).map(|_| rng2.gen_range(-1.0..1.0)).collect()).unwrap();
            let r = Matrix::from_rows(2, 2, (0..4).map(|_| rng2.gen_range(-1.0..1.0)).collect()).unwrap();
            let b = Vector::zeros(2);

            let (a, c) = (0.7, -1.3);
            let mut combo = Vector::zeros(3);
            combo.add_scaled(&x1, a);
            combo.add_scaled(&x2, c);

            let lhs = affine(&t, &combo, &r, &h, &b).unwrap();
            let f1 = affine(&t, &x1, &r, &Vector::zeros(2), &b).unwrap();
            let f2 = affine(&t, &x2, &r, &Vector::zeros(2), &b).unwrap();
            let fh = affine(&t, &Vector::zeros(3), &r, &h, &b).unwrap();
            // f(a x1 + c x2, h) = a f(x1, 0) + c f(x2, 0) + f(0, h) when b = 0
            let mut rhs = Vector::zeros(2);
            rhs.add_scaled(&f1, a);
            rhs.add_scaled(&f2, c);
            rhs.add_assign(&fh);
            for (l, r_) in lhs.iter().zip(rhs.iter()) {
                prop_assert!((l - r_).abs() < 1e-9);
            }
        }
    }
}

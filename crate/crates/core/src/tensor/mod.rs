//! Dense row-major `f64` tensors with a reverse-mode tape.
//!
//! [`Tensor`] is a plain value. Differentiable computations are recorded on a
//! [`Tape`], which owns the intermediate values and replays adjoints in
//! reverse. The eager functions in this module (`matmul`, `softmax_rows`, ...)
//! share kernels with the tape, so both paths produce identical numbers.

pub mod gradcheck;
pub mod kernels;
mod tape;

pub use gradcheck::{
    finite_diff_grad, max_relative_error, relative_error, FD_STEP, GRAD_FLOOR, GRAD_TOL,
};
pub use tape::{Gradients, Tape, Var};

use crate::error::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} holds {numel} values, got {}", data.len()),
            ));
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("from_rows", "ragged rows"));
        }
        Tensor::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Gaussian entries with standard deviation `std`, reproducible from `seed`.
    /// The generator is ChaCha8 seeded with `seed`; samples are drawn in
    /// row-major order.
    pub fn randn(shape: &[usize], std: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let numel = shape.iter().product();
        let data = (0..numel).map(|_| std * normal.sample(&mut rng)).collect();
        Tensor {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn with_requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.iter().all(|&d| d == 1)
    }

    /// Interprets the tensor as a matrix: rank-2 as is, rank-1 as a single row.
    pub fn rows_cols(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            [] => (1, 1),
            [n] => (1, *n),
            [r, c] => (*r, *c),
            s => {
                let c = *s.last().unwrap();
                (self.data.len() / c.max(1), c)
            }
        }
    }

    pub fn rows(&self) -> usize {
        self.rows_cols().0
    }

    pub fn cols(&self) -> usize {
        self.rows_cols().1
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn get2(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        Tensor::new(shape.to_vec(), self.data.clone())
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (m, n) = self.matrix_dims("transpose")?;
        Tensor::new(vec![n, m], kernels::transpose(&self.data, m, n))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    pub(crate) fn matrix_dims(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [m, n] => Ok((*m, *n)),
            _ => Err(Error::shape(
                op,
                format!("expected a matrix, got {:?}", self.shape),
            )),
        }
    }
}

/// Row-broadcast rule shared by `add` and `mul`: equal shapes, or a rank-1
/// right operand matching the column count of the left.
pub(crate) fn broadcast_ok(lhs: &[usize], rhs: &[usize]) -> bool {
    lhs == rhs || (rhs.len() == 1 && lhs.last() == rhs.first())
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.matrix_dims("matmul")?;
    let (k2, n) = b.matrix_dims("matmul")?;
    if k != k2 {
        return Err(Error::dims("matmul", a.shape(), b.shape()));
    }
    Tensor::new(vec![m, n], kernels::matmul(&a.data, &b.data, m, k, n))
}

pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    let (_, n) = x.matrix_dims("softmax_rows")?;
    Tensor::new(x.shape.clone(), kernels::softmax_rows(&x.data, n))
}

/// Pointwise operations exposed by [`elementwise`].
#[derive(Clone, Debug)]
pub enum Elementwise<'a> {
    Add(&'a Tensor),
    Scale(f64),
    Gelu,
}

/// `gelu` uses the tanh approximation with constants [`kernels::GELU_C`]
/// and [`kernels::GELU_A`].
pub fn elementwise(x: &Tensor, kind: Elementwise<'_>) -> Result<Tensor> {
    let data = match kind {
        Elementwise::Add(y) => {
            if !broadcast_ok(x.shape(), y.shape()) {
                return Err(Error::dims("add", x.shape(), y.shape()));
            }
            let n = y.numel();
            x.data
                .iter()
                .enumerate()
                .map(|(i, v)| v + y.data[i % n])
                .collect()
        }
        Elementwise::Scale(c) => x.data.iter().map(|v| v * c).collect(),
        Elementwise::Gelu => x.data.iter().map(|&v| kernels::gelu(v)).collect(),
    };
    Tensor::new(x.shape.clone(), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_values() {
        let b = m(&[&[5.0, 6.0], &[7.0, 8.0]]);
        assert_eq!(matmul(&Tensor::eye(2), &b).unwrap(), b);
        let a = m(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(matmul(&a, &b).unwrap().data(), &[19.0, 22.0, 43.0, 50.0]);
        let z = matmul(&a, &Tensor::zeros(&[2, 3])).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let err = matmul(&Tensor::zeros(&[2, 3]), &Tensor::zeros(&[2, 3])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
        assert!(matches!(err, Error::Dimension { .. }));
    }

    #[test]
    fn softmax_examples() {
        let x = m(&[&[0.0, 0.0], &[0.0, 2f64.ln()], &[1000.0, 1000.0]]);
        let y = softmax_rows(&x).unwrap();
        assert_eq!(y.row(0), &[0.5, 0.5]);
        assert!((y.get2(1, 0) - 1.0 / 3.0).abs() < 1e-15);
        assert!((y.get2(1, 1) - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(y.row(2), &[0.5, 0.5]);
    }

    #[test]
    fn elementwise_examples() {
        let x = Tensor::vector(vec![1.0, 2.0, 3.0]);
        let zero = Tensor::zeros(&[3]);
        assert_eq!(elementwise(&x, Elementwise::Add(&zero)).unwrap(), x);
        assert_eq!(
            elementwise(&x, Elementwise::Scale(2.0)).unwrap().data(),
            &[2.0, 4.0, 6.0]
        );
        let g = elementwise(&Tensor::scalar(0.0), Elementwise::Gelu).unwrap();
        assert_eq!(g.data(), &[0.0]);
        let bad = elementwise(&x, Elementwise::Add(&Tensor::zeros(&[2])));
        assert!(matches!(bad, Err(Error::Dimension { .. })));
    }

    #[test]
    fn new_rejects_inconsistent_length() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert_eq!(Tensor::scalar(3.0).numel(), 1);
    }

    #[test]
    fn randn_is_reproducible() {
        assert_eq!(
            Tensor::randn(&[3, 4], 0.5, 9),
            Tensor::randn(&[3, 4], 0.5, 9)
        );
        assert_ne!(
            Tensor::randn(&[3, 4], 0.5, 9),
            Tensor::randn(&[3, 4], 0.5, 10)
        );
    }
}

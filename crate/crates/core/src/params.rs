//! Named parameter containers shared by the optimizer and checkpoints.

use nalgebra::DMatrix;
use rand::Rng;

/// A container of learnable matrices with stable names and ordering.
///
/// Gradient containers use the same type as the parameters they belong to.
pub trait Parameters: Clone {
    fn tensors(&self) -> Vec<(String, &DMatrix<f64>)>;
    fn tensors_mut(&mut self) -> Vec<&mut DMatrix<f64>>;

    fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.fill(0.0);
        }
        z
    }

    fn accumulate(&mut self, other: &Self) {
        let src: Vec<_> = other.tensors().into_iter().map(|(_, t)| t.clone()).collect();
        for (dst, s) in self.tensors_mut().into_iter().zip(src.iter()) {
            *dst += s;
        }
    }

    fn scale(&mut self, alpha: f64) {
        for t in self.tensors_mut() {
            *t *= alpha;
        }
    }

    fn num_params(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    fn all_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }

    /// Sum of elementwise products over every tensor.
    fn dot(&self, other: &Self) -> f64 {
        self.tensors()
            .iter()
            .zip(other.tensors().iter())
            .map(|((_, a), (_, b))| a.dot(b))
            .sum()
    }
}

/// Fan-based uniform init in `[-a, a]`, `a = sqrt(6 / (fan_in + fan_out))`.
pub fn glorot<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, fan_in: usize, fan_out: usize) -> DMatrix<f64> {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    uniform(rng, rows, cols, a)
}

pub fn uniform<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, a: f64) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.gen_range(-a..=a))
}

/// Adds column vector `b` (n x 1) to every column of `m`.
pub(crate) fn add_bias(m: &mut DMatrix<f64>, b: &DMatrix<f64>) {
    debug_assert_eq!(b.ncols(), 1);
    for mut col in m.column_iter_mut() {
        col += b.column(0);
    }
}

/// Row sums as a column vector.
pub(crate) fn sum_columns(m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(m.nrows(), 1);
    for col in m.column_iter() {
        out.column_mut(0).add_assign(col);
    }
    out
}

use std::ops::AddAssign;

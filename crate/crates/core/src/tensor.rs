//! Dense row-major f64 tensors. All training and inference in this crate runs
//! in 64-bit precision so gradient tolerances and bit-exact reproducibility
//! checks are meaningful.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A dense tensor: shape plus row-major data. `requires_grad` marks leaf
/// parameters that should receive gradients when bound onto a tape.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    #[serde(default)]
    pub requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(
            data.len(),
            shape.iter().product::<usize>(),
            "data length must equal product of shape"
        );
        Tensor { shape, data, requires_grad: false }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: vec![0.0; n], requires_grad: false }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![1], data: vec![v], requires_grad: false }
    }

    /// Gaussian init with the given std.
    pub fn randn<R: Rng>(shape: Vec<usize>, std: f64, rng: &mut R) -> Self {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0, std).expect("valid normal");
        let data = (0..n).map(|_| dist.sample(rng)).collect();
        Tensor { shape, data, requires_grad: false }
    }

    /// Marks this tensor as a trainable parameter.
    pub fn param(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Rows of a 2-D tensor; a 1-D tensor is a single row.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            1 => 1,
            2 => self.shape[0],
            _ => panic!("rows() on tensor of rank {}", self.shape.len()),
        }
    }

    pub fn cols(&self) -> usize {
        match self.shape.len() {
            1 => self.shape[0],
            2 => self.shape[1],
            _ => panic!("cols() on tensor of rank {}", self.shape.len()),
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn check_finite(&self, what: &str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite(what.to_string()))
        }
    }
}

/// Row-major matmul: a is m×k, b is k×n, result m×n.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                *o += av * bv;
            }
        }
    }
    out
}

/// a (m×k) times b-transpose where b is n×k; result m×n.
pub fn matmul_tb(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] = dot(arow, brow);
        }
    }
    out
}

/// a-transpose (a is m×k) times b (m×n); result k×n. Used in backward passes.
pub fn matmul_ta(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                *o += av * bv;
            }
        }
    }
    out
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b.iter()) {
        s += x * y;
    }
    s
}

pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x.iter()) {
        *yi += alpha * xi;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small() {
        // [1 2; 3 4] * [5 6; 7 8] = [19 22; 43 50]
        let a = vec![1.0, 2.0, 3.0, 4.0];
        let b = vec![5.0, 6.0, 7.0, 8.0];
        assert_eq!(matmul(&a, &b, 2, 2, 2), vec![19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_tb_matches_explicit_transpose() {
        let a = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = vec![1.0, 0.0, 2.0, -1.0, 3.0, 1.0]; // 2 rows of len 3
        let bt = vec![1.0, -1.0, 0.0, 3.0, 2.0, 1.0]; // 3x2
        assert_eq!(matmul_tb(&a, &b, 2, 3, 2), matmul(&a, &bt, 2, 3, 2));
    }

    #[test]
    fn matmul_ta_matches_explicit_transpose() {
        let a = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3 -> at 3x2
        let at = vec![1.0, 4.0, 2.0, 5.0, 3.0, 6.0];
        let b = vec![1.0, -1.0, 0.5, 2.0]; // 2x2
        assert_eq!(matmul_ta(&a, &b, 2, 3, 2), matmul(&at, &b, 3, 2, 2));
    }

    #[test]
    fn tensor_invariants() {
        let t = Tensor::zeros(vec![3, 4]);
        assert_eq!(t.numel(), 12);
        assert_eq!(t.rows(), 3);
        assert_eq!(t.cols(), 4);
        assert!(!t.requires_grad);
        assert!(Tensor::scalar(1.5).is_scalar());
    }

    #[test]
    #[should_panic]
    fn tensor_shape_data_mismatch_panics() {
        let _ = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0]);
    }
}

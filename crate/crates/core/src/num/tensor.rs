//! Dense row-major tensors.
//!
//! Tensors are immutable values once built; every tape op returns a fresh
//! one. Shapes are explicit and checked, broadcasting exists only for a
//! trailing-row bias add (leading batch dim), nothing fancier.

use crate::error::{FloodError, Result};
use crate::num::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(FloodError::Shape(format!(
                "zero-sized dimension in shape {shape:?}"
            )));
        }
        if n != data.len() {
            return Err(FloodError::Shape(format!(
                "shape {shape:?} wants {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![S::zero(); n],
        }
    }

    pub fn full(shape: &[usize], v: S) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![v; n],
        }
    }

    pub fn scalar(v: S) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> S) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(|i| f(i)).collect(),
        }
    }

    /// Build from f64 values (oracle-side convenience).
    pub fn from_f64(shape: &[usize], vals: &[f64]) -> Result<Self> {
        Tensor::new(shape.to_vec(), vals.iter().map(|&v| S::from_f64c(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// First dimension (rows for 2-D tensors).
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Elements per row: product of all trailing dimensions.
    pub fn row_len(&self) -> usize {
        self.shape[1..].iter().product()
    }

    pub fn row(&self, i: usize) -> &[S] {
        let w = self.row_len();
        &self.data[i * w..(i + 1) * w]
    }

    pub fn is_scalar_shape(&self) -> bool {
        self.data.len() == 1
    }

    pub fn item(&self) -> S {
        debug_assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(FloodError::Shape(format!(
                "cannot reshape {:?} ({} elems) to {shape:?}",
                self.shape,
                self.data.len()
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    /// Mean of squared entries, accumulated in f64.
    pub fn mean_sq(&self) -> f64 {
        let s: f64 = self.data.iter().map(|v| {
            let x = v.to_f64c();
            x * x
        }).sum();
        s / self.data.len() as f64
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.to_f64c()).collect()
    }
}

/// Raw matrix product used by forward and backward passes.
/// `a` is (m, k), `b` is (k, n); accumulation order is fixed (i, p, j) so
/// results are bit-reproducible run to run.
pub fn matmul_raw<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut c = vec![S::zero(); m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &aip) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow.iter()) {
                *cv = *cv + aip * bv;
            }
        }
    }
    c
}

/// matmul with the second operand transposed: `a` (m, k) times `b^T` where
/// `b` is stored (n, k). Used by attention and by matmul backward.
pub fn matmul_bt_raw<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut c = vec![S::zero(); m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = S::zero();
            for (&av, &bv) in arow.iter().zip(brow.iter()) {
                acc = acc + av * bv;
            }
            c[i * n + j] = acc;
        }
    }
    c
}

/// matmul with the first operand transposed: `a^T` where `a` is stored
/// (k, m), times `b` (k, n). Used by matmul backward for the weight side.
pub fn matmul_at_raw<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut c = vec![S::zero(); m * n];
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let aip = arow[i];
            let crow = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow.iter()) {
                *cv = *cv + aip * bv;
            }
        }
    }
    c
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_product_checked() {
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f32>::new(vec![2, 0], vec![]).is_err());
    }

    #[test]
    fn matmul_raw_matches_triple_loop() {
        // random 5x4 by 4x3 against a scalar triple-loop oracle
        let mut rng = crate::num::rng::Rng::new(7);
        let a: Vec<f32> = (0..20).map(|_| rng.normal_f32()).collect();
        let b: Vec<f32> = (0..12).map(|_| rng.normal_f32()).collect();
        let c = matmul_raw(&a, &b, 5, 4, 3);
        for i in 0..5 {
            for j in 0..3 {
                let mut acc = 0.0f64;
                for p in 0..4 {
                    acc += a[i * 4 + p] as f64 * b[p * 3 + j] as f64;
                }
                assert!((c[i * 3 + j] as f64 - acc).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn transposed_variants_agree() {
        let mut rng = crate::num::rng::Rng::new(3);
        let a: Vec<f64> = (0..6).map(|_| rng.normal_f64()).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|_| rng.normal_f64()).collect(); // 3x4
        let c = matmul_raw(&a, &b, 2, 3, 4);
        // b stored transposed (4x3)
        let mut bt = vec![0.0; 12];
        for i in 0..3 {
            for j in 0..4 {
                bt[j * 3 + i] = b[i * 4 + j];
            }
        }
        let c2 = matmul_bt_raw(&a, &bt, 2, 3, 4);
        for (x, y) in c.iter().zip(c2.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
        // a stored transposed (3x2)
        let mut at = vec![0.0; 6];
        for i in 0..2 {
            for j in 0..3 {
                at[j * 2 + i] = a[i * 3 + j];
            }
        }
        let c3 = matmul_at_raw(&at, &b, 2, 3, 4);
        for (x, y) in c.iter().zip(c3.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}

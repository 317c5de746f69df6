use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major array of `f64`.
///
/// Graph operations work on rank-2 tensors; a scalar is a `1 x 1` matrix.
/// Gradient tracking lives on the [`Graph`](super::Graph) that consumes a
/// tensor, so `requires_grad` is only a hint carried along for parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    #[serde(skip)]
    pub requires_grad: bool,
    #[serde(skip)]
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Dimension {
                op: "tensor",
                left: shape,
                right: vec![data.len()],
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("tensor"));
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::contract("ragged rows"));
        }
        Self::matrix(rows.len(), cols, rows.concat())
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: vec![1, 1],
            data: vec![v],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            shape: vec![rows, cols],
            data: vec![0.0; rows * cols],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn filled(rows: usize, cols: usize, v: f64) -> Self {
        Self {
            shape: vec![rows, cols],
            data: vec![v; rows * cols],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Builds a tensor from values produced internally by graph ops, which are
    /// already checked for shape and finiteness by the caller.
    pub(crate) fn raw(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(rows * cols, data.len());
        Self {
            shape: vec![rows, cols],
            data,
            requires_grad: false,
            grad: None,
        }
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Rows and columns of a rank-2 tensor; rank-1 tensors read as one row.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            [c] => Ok((1, *c)),
            _ => Err(Error::contract(format!(
                "expected a rank-2 tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    pub fn cols(&self) -> usize {
        self.shape.get(1).copied().unwrap_or(self.shape[0])
    }

    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(Error::contract(format!(
                "item() on non-scalar of shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// `self + alpha * other`, in place.
    pub fn axpy(&mut self, alpha: f64, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Dimension {
                op: "axpy",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    /// Plain matrix product without gradient tracking.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.dims2()?;
        let (k2, n) = other.dims2()?;
        if k != k2 {
            return Err(Error::Dimension {
                op: "matmul",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, &self.data, Layout::N, &other.data, Layout::N, &mut out, 0.0);
        Ok(Tensor::raw(m, n, out))
    }

    /// Order-sensitive 64-bit digest of shape and bit patterns.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut mix = |x: u64| {
            h ^= x;
            h = h.wrapping_mul(0x0100_0000_01b3);
        };
        for &s in &self.shape {
            mix(s as u64);
        }
        for v in &self.data {
            mix(v.to_bits());
        }
        h
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Layout {
    /// Use the stored matrix as is.
    N,
    /// Use the transpose of the stored matrix.
    T,
}

/// `out = beta * out + op(a) * op(b)` where `op(a)` is `m x k` and `op(b)` is
/// `k x n`, all row-major.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    la: Layout,
    b: &[f64],
    lb: Layout,
    out: &mut [f64],
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        out.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = match la {
        Layout::N => (k as isize, 1),
        Layout::T => (1, m as isize),
    };
    let (rsb, csb) = match lb {
        Layout::N => (n as isize, 1),
        Layout::T => (1, k as isize),
    };
    // SAFETY: slices are sized for the requested shapes and strides, and `out`
    // does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_data() {
        assert!(matches!(
            Tensor::new(vec![2, 2], vec![1.0; 3]),
            Err(Error::Dimension { .. })
        ));
        assert!(matches!(
            Tensor::new(vec![1], vec![f64::NAN]),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn matmul_hand_example() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![5.0], vec![6.0]]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.shape(), &[2, 1]);
        assert_eq!(c.data(), &[17.0, 39.0]);
    }

    #[test]
    fn gemm_transposed_layouts() {
        // a is 2x3, b is 3x2
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [7.0, 8.0, 9.0, 10.0, 11.0, 12.0];
        let mut ab = [0.0; 4];
        gemm(2, 3, 2, &a, Layout::N, &b, Layout::N, &mut ab, 0.0);
        assert_eq!(ab, [58.0, 64.0, 139.0, 154.0]);
        // a^T stored as 3x2 -> use T layout
        let at = [1.0, 4.0, 2.0, 5.0, 3.0, 6.0];
        let bt = [7.0, 9.0, 11.0, 8.0, 10.0, 12.0];
        let mut c = [0.0; 4];
        gemm(2, 3, 2, &at, Layout::T, &bt, Layout::T, &mut c, 0.0);
        assert_eq!(c, ab);
    }
}

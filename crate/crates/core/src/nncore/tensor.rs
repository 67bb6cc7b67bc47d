use crate::error::{Error, Result};
use crate::nncore::Scalar;

/// Dense 4-D array in NHWC order (batch, height, width, channels).
///
/// Feature matrices are tensors with `h == w == 1`; the channel axis then
/// holds the features.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(n: usize, h: usize, w: usize, c: usize) -> Self {
        Self {
            n,
            h,
            w,
            c,
            data: vec![T::zero(); n * h * w * c],
        }
    }

    pub fn from_vec(n: usize, h: usize, w: usize, c: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != n * h * w * c {
            return Err(Error::Contract(format!(
                "tensor data length {} does not match [{n}, {h}, {w}, {c}]",
                data.len()
            )));
        }
        Ok(Self { n, h, w, c, data })
    }

    /// `rows × cols` feature matrix.
    pub fn matrix(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        Self::from_vec(rows, 1, 1, cols, data)
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.n, self.h, self.w, self.c]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Number of (batch, row, col) sites.
    pub fn sites(&self) -> usize {
        self.n * self.h * self.w
    }

    /// Per-sample width when flattened.
    pub fn row_len(&self) -> usize {
        self.h * self.w * self.c
    }

    pub fn row(&self, i: usize) -> &[T] {
        let len = self.row_len();
        &self.data[i * len..(i + 1) * len]
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            n: self.n,
            h: self.h,
            w: self.w,
            c: self.c,
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

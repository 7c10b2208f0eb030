use super::Scalar;
use crate::{Error, Result};

/// Dense row-major array with shape metadata.
///
/// Every constructor checks `product(shape) == data.len()` and that all
/// elements are finite, so a `Tensor` value never carries NaN or Inf.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S: Scalar = f32> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::invalid(format!("zero-sized dimension in shape {shape:?}")));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::invalid(format!(
                "shape {shape:?} needs {expected} elements, got {}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|x| !x.is_finite()) {
            return Err(Error::numeric(format!("non-finite element at flat index {pos}")));
        }
        Ok(Self { shape, data })
    }

    /// Builds a tensor without the finiteness scan. Shape agreement is still
    /// asserted. Used on internal hot paths whose outputs are checked later.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<S>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::from_parts(shape.to_vec(), vec![S::ZERO; shape.iter().product()])
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::from_parts(shape.to_vec(), vec![S::ONE; shape.iter().product()])
    }

    pub fn full(shape: &[usize], value: S) -> Self {
        Self::from_parts(shape.to_vec(), vec![value; shape.iter().product()])
    }

    pub fn scalar(value: S) -> Self {
        Self::from_parts(vec![1], vec![value])
    }

    pub fn from_slice(shape: &[usize], data: &[S]) -> Result<Self> {
        Self::new(shape.to_vec(), data.to_vec())
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::new(shape.to_vec(), data.iter().map(|&x| S::from_f64(x)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Size of the last dimension.
    pub fn last_dim(&self) -> usize {
        *self.shape.last().expect("tensor has at least one dimension")
    }

    /// Number of rows when viewed as a `rows × last_dim` matrix.
    pub fn rows(&self) -> usize {
        self.data.len() / self.last_dim()
    }

    pub fn row(&self, i: usize) -> &[S] {
        let n = self.last_dim();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn item(&self) -> S {
        self.data[0]
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::invalid(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        Ok(Self { shape, data: self.data })
    }

    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_parts(
            self.shape.clone(),
            self.data.iter().map(|&x| T::from_f64(x.to_f64())).collect(),
        )
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Result<Self> {
        Self::new(self.shape.clone(), self.data.iter().map(|&x| f(x)).collect())
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(S, S) -> S) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::invalid(format!(
                "shape mismatch {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Self::new(
            self.shape.clone(),
            self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        )
    }

    /// Sum of all elements, accumulated in f64.
    pub fn sum_f64(&self) -> f64 {
        self.data.iter().map(|x| x.to_f64()).sum()
    }

    pub fn mean_f64(&self) -> f64 {
        self.sum_f64() / self.data.len() as f64
    }

    pub fn sum_sq_f64(&self) -> f64 {
        self.data.iter().map(|x| x.to_f64() * x.to_f64()).sum()
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.to_f64() - b.to_f64()).abs())
            .fold(0.0, f64::max)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().map(|x| x.to_f64().abs()).fold(0.0, f64::max)
    }

    /// Matrix product of two rank-2 tensors.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.rank() != 2 || other.rank() != 2 || self.shape[1] != other.shape[0] {
            return Err(Error::invalid(format!(
                "matmul shapes {:?} x {:?}",
                self.shape, other.shape
            )));
        }
        let (m, k, n) = (self.shape[0], self.shape[1], other.shape[1]);
        let mut out = vec![S::ZERO; m * n];
        S::gemm(m, k, n, &self.data, &other.data, &mut out);
        Self::new(vec![m, n], out)
    }
}

/// Row-wise softmax over the last dimension with max subtraction.
pub fn softmax_lastdim<S: Scalar>(x: &Tensor<S>) -> Result<Tensor<S>> {
    if x.is_empty() {
        return Err(Error::invalid("softmax of an empty tensor"));
    }
    let n = x.last_dim();
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(n) {
        softmax_in_place(row);
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// In-place softmax of one row. The normalizer is accumulated in f64.
pub(crate) fn softmax_in_place<S: Scalar>(row: &mut [S]) {
    let max = row.iter().copied().fold(row[0], S::max);
    let mut total = 0.0f64;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += v.to_f64();
    }
    let inv = S::from_f64(1.0 / total);
    for v in row.iter_mut() {
        *v *= inv;
    }
}

/// `softmax(q·Kᵀ/√d)·V` for `q: m×d`, `K: n×d`, `V: n×dv`.
pub fn scaled_attention<S: Scalar>(
    q: &Tensor<S>,
    keys: &Tensor<S>,
    values: &Tensor<S>,
) -> Result<Tensor<S>> {
    if q.rank() != 2 || keys.rank() != 2 || values.rank() != 2 {
        return Err(Error::invalid("scaled_attention expects rank-2 inputs"));
    }
    let (m, d) = (q.shape()[0], q.shape()[1]);
    let (n, dk) = (keys.shape()[0], keys.shape()[1]);
    if dk != d || values.shape()[0] != n {
        return Err(Error::invalid(format!(
            "attention dims q {:?} K {:?} V {:?}",
            q.shape(),
            keys.shape(),
            values.shape()
        )));
    }
    let dv = values.shape()[1];
    let scale = S::from_f64(1.0 / (d as f64).sqrt());
    let mut scores = vec![S::ZERO; m * n];
    S::gemm_strided(m, d, n, q.data(), (d as isize, 1), keys.data(), (1, d as isize), &mut scores, false);
    scores.iter_mut().for_each(|s| *s *= scale);
    for row in scores.chunks_mut(n) {
        softmax_in_place(row);
    }
    let mut out = vec![S::ZERO; m * dv];
    S::gemm(m, n, dv, &scores, values.data(), &mut out);
    Tensor::new(vec![m, dv], out)
}

// SPDX-License-Identifier: MIT OR Apache-2.0

//! Dense row-major tensors and the handful of kernels the forward pass needs.
//!
//! There is no broadcasting: every operation states exactly which extents it
//! accepts and returns [`Error::Shape`] otherwise.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Below this many multiply-adds a matmul stays on the calling thread.
const PAR_MATMUL_WORK: usize = 1 << 18;

/// Dense row-major array of rank 1 to 3.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.is_empty() || shape.len() > 3 {
            return Err(Error::shape("tensor", format!("rank must be 1..=3, got {shape:?}")));
        }
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} needs {len} elements, got {}", data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Self {
            shape,
            data: vec![T::zero(); len],
        }
    }

    pub fn vector(data: Vec<T>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("from_rows", "ragged rows"));
        }
        Self::matrix(rows.len(), cols, rows.concat())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// `(rows, cols)`; a rank-1 tensor is read as a single row.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [n] => Ok((1, *n)),
            [m, n] => Ok((*m, *n)),
            s => Err(Error::shape("dims2", format!("expected rank 1 or 2, got {s:?}"))),
        }
    }

    pub fn rows(&self) -> usize {
        self.dims2().map_or(0, |(m, _)| m)
    }

    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap_or(&0)
    }

    pub fn row(&self, i: usize) -> &[T] {
        let n = self.cols();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        let n = self.cols();
        &mut self.data[i * n..(i + 1) * n]
    }

    /// Copies row `i` out as a rank-1 tensor.
    pub fn row_vector(&self, i: usize) -> Tensor<T> {
        Tensor::vector(self.row(i).to_vec())
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let len: usize = shape.iter().product();
        if len != self.data.len() {
            return Err(Error::shape("reshape", format!("{:?} -> {shape:?}", self.shape)));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|x| x * s)
    }

    /// Converts every element to another scalar type.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|&x| U::from_f64(x.as_f64()).unwrap_or_else(U::nan))
                .collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Elementwise sum of two tensors of identical shape.
    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        let mut out = self.clone();
        out.add_assign(other)?;
        Ok(out)
    }

    pub fn add_assign(&mut self, other: &Tensor<T>) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape("add", format!("{:?} vs {:?}", self.shape, other.shape)));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// Adds the length-`n` vector `v` to every row of an `m×n` matrix.
    pub fn add_to_rows(&mut self, v: &[T]) -> Result<()> {
        let (m, n) = self.dims2()?;
        if v.len() != n {
            return Err(Error::shape(
                "add_to_rows",
                format!("row length {n}, vector length {}", v.len()),
            ));
        }
        for i in 0..m {
            for (a, &b) in self.row_mut(i).iter_mut().zip(v) {
                *a += b;
            }
        }
        Ok(())
    }

    pub fn transpose(&self) -> Result<Tensor<T>> {
        let (m, n) = self.dims2()?;
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Tensor::matrix(n, m, out)
    }

    /// Copies columns `start..end` of a matrix.
    pub fn column_block(&self, start: usize, end: usize) -> Result<Tensor<T>> {
        let (m, n) = self.dims2()?;
        if start > end || end > n {
            return Err(Error::shape(
                "column_block",
                format!("{start}..{end} out of {n} columns"),
            ));
        }
        let w = end - start;
        let mut out = Vec::with_capacity(m * w);
        for i in 0..m {
            out.extend_from_slice(&self.row(i)[start..end]);
        }
        Tensor::matrix(m, w, out)
    }

    /// Copies rows `start..end` of a matrix.
    pub fn row_block(&self, start: usize, end: usize) -> Result<Tensor<T>> {
        let (m, n) = self.dims2()?;
        if start > end || end > m {
            return Err(Error::shape("row_block", format!("{start}..{end} out of {m} rows")));
        }
        Tensor::matrix(end - start, n, self.data[start * n..end * n].to_vec())
    }
}

/// `a[m×k] · b[k×n]`.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if a.shape().len() != 2 || b.shape().len() != 2 {
        return Err(Error::shape("matmul", "operands must be rank 2"));
    }
    if k != k2 {
        return Err(Error::shape("matmul", format!("[{m}×{k}] · [{k2}×{n}]")));
    }
    let mut out = vec![T::zero(); m * n];
    if n == 0 {
        return Tensor::matrix(m, n, out);
    }
    let bd = b.data();
    let row_kernel = |(i, out_row): (usize, &mut [T])| {
        let a_row = &a.data()[i * k..(i + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let b_row = &bd[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    };
    if m * n * k >= PAR_MATMUL_WORK && m > 1 {
        out.par_chunks_mut(n).enumerate().for_each(row_kernel);
    } else if m * n * k >= PAR_MATMUL_WORK {
        // Single row against a wide matrix (the unembedding): split columns.
        let a_row = a.data();
        const BLOCK: usize = 4096;
        out.par_chunks_mut(BLOCK).enumerate().for_each(|(blk, out_blk)| {
            let c0 = blk * BLOCK;
            for (p, &av) in a_row.iter().enumerate() {
                if av == T::zero() {
                    continue;
                }
                let b_seg = &bd[p * n + c0..p * n + c0 + out_blk.len()];
                for (o, &bv) in out_blk.iter_mut().zip(b_seg) {
                    *o += av * bv;
                }
            }
        });
    } else {
        out.chunks_mut(n).enumerate().for_each(row_kernel);
    }
    Tensor::matrix(m, n, out)
}

/// `v[k] · b[k×n]` returned as a rank-1 tensor of length `n`.
pub fn vecmat<T: Scalar>(v: &[T], b: &Tensor<T>) -> Result<Tensor<T>> {
    let a = Tensor::matrix(1, v.len(), v.to_vec())?;
    let out = matmul(&a, b)?;
    let n = out.cols();
    out.reshape(vec![n])
}

/// Row-wise softmax with per-row max subtraction. Rank-1 input is one row.
/// `-inf` entries (masked positions) receive probability zero.
pub fn row_softmax<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let mut out = x.clone();
    let n = out.cols();
    if n == 0 {
        return out;
    }
    for row in out.data_mut().chunks_mut(n) {
        softmax_in_place(row);
    }
    out
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    // f32 accumulation drifts by ~1e-6 over a few dozen small terms
    let mut sum = 0.0f64;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += v.as_f64();
    }
    let inv = 1.0 / sum;
    for v in row.iter_mut() {
        *v = T::of(v.as_f64() * inv);
    }
}

/// Per-row normalisation to zero mean and unit variance followed by
/// `gain ⊙ x + bias`.
pub fn layer_norm<T: Scalar>(x: &Tensor<T>, gain: &Tensor<T>, bias: &Tensor<T>, eps: T) -> Result<Tensor<T>> {
    let (_, d) = x.dims2()?;
    if gain.len() != d || bias.len() != d {
        return Err(Error::shape(
            "layer_norm",
            format!("row width {d}, gain {}, bias {}", gain.len(), bias.len()),
        ));
    }
    let mut out = normalize_rows(x, eps)?;
    for row in out.data_mut().chunks_mut(d) {
        for ((v, &g), &b) in row.iter_mut().zip(gain.data()).zip(bias.data()) {
            *v = *v * g + b;
        }
    }
    Ok(out)
}

/// Layer norm without the affine part (what remains once the gain and bias
/// have been folded into the following linear map).
pub fn normalize_rows<T: Scalar>(x: &Tensor<T>, eps: T) -> Result<Tensor<T>> {
    let (_, d) = x.dims2()?;
    let mut out = x.clone();
    if d == 0 {
        return Ok(out);
    }
    for row in out.data_mut().chunks_mut(d) {
        // Welford's running mean / M2
        let mut mean = T::zero();
        let mut m2 = T::zero();
        for (i, &v) in row.iter().enumerate() {
            let count = T::of((i + 1) as f64);
            let delta = v - mean;
            mean += delta / count;
            m2 += delta * (v - mean);
        }
        let var = m2 / T::of(d as f64);
        let inv = (var + eps).sqrt().recip();
        for v in row.iter_mut() {
            *v = (*v - mean) * inv;
        }
    }
    Ok(out)
}

/// Tanh approximation of GELU, as used by GPT-2.
pub fn gelu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(gelu_scalar)
}

#[inline]
pub fn gelu_scalar<T: Scalar>(x: T) -> T {
    let c = T::of((2.0 / std::f64::consts::PI).sqrt());
    let half = T::of(0.5);
    half * x * (T::one() + (c * (x + T::of(0.044715) * x * x * x)).tanh())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, m: usize, n: usize) -> Tensor<f32> {
        let data = (0..m * n).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        Tensor::matrix(m, n, data).unwrap()
    }

    fn naive_matmul(a: &Tensor<f32>, b: &Tensor<f32>) -> Vec<f64> {
        let (m, k) = a.dims2().unwrap();
        let (_, n) = b.dims2().unwrap();
        let mut out = vec![0.0f64; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    out[i * n + j] += a.data()[i * k + p] as f64 * b.data()[p * n + j] as f64;
                }
            }
        }
        out
    }

    #[test]
    fn matmul_identity_and_scalar() {
        let eye = Tensor::from_rows(&[vec![1.0f32, 0.0], vec![0.0, 1.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![3.0f32, 4.0], vec![5.0, 6.0]]).unwrap();
        assert_eq!(matmul(&eye, &b).unwrap(), b);
        let two = Tensor::matrix(1, 1, vec![2.0f32]).unwrap();
        let three = Tensor::matrix(1, 1, vec![3.0f32]).unwrap();
        assert_eq!(matmul(&two, &three).unwrap().data(), &[6.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random(&mut rng, 7, 5);
        let b = random(&mut rng, 5, 3);
        let got = matmul(&a, &b).unwrap();
        for (g, want) in got.data().iter().zip(naive_matmul(&a, &b)) {
            assert_abs_diff_eq!(*g as f64, want, epsilon = 1e-5);
        }
    }

    #[test]
    fn matmul_parallel_paths_match_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = random(&mut rng, 9, 130);
        let b = random(&mut rng, 130, 300);
        let got = matmul(&a, &b).unwrap();
        for (g, want) in got.data().iter().zip(naive_matmul(&a, &b)) {
            assert_abs_diff_eq!(*g as f64, want, epsilon = 1e-4);
        }
        let v = random(&mut rng, 1, 130);
        let wide = random(&mut rng, 130, 9000);
        let got = matmul(&v, &wide).unwrap();
        for (g, want) in got.data().iter().zip(naive_matmul(&v, &wide)) {
            assert_abs_diff_eq!(*g as f64, want, epsilon = 1e-4);
        }
    }

    #[test]
    fn matmul_rejects_mismatch() {
        let a = Tensor::<f32>::zeros(vec![2, 3]);
        let b = Tensor::<f32>::zeros(vec![2, 3]);
        assert!(matches!(matmul(&a, &b), Err(Error::Shape { .. })));
    }

    #[test]
    fn matmul_associative_with_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random(&mut rng, 16, 16);
        let b = random(&mut rng, 16, 16);
        let c = random(&mut rng, 16, 16);
        let mut eye = Tensor::<f32>::zeros(vec![16, 16]);
        for i in 0..16 {
            eye.data_mut()[i * 16 + i] = 1.0;
        }
        let left = matmul(&matmul(&matmul(&a, &eye).unwrap(), &b).unwrap(), &c).unwrap();
        let right = matmul(&a, &matmul(&b, &matmul(&eye, &c).unwrap()).unwrap()).unwrap();
        for (l, r) in left.data().iter().zip(right.data()) {
            assert_abs_diff_eq!(l, r, epsilon = 1e-4);
        }
    }

    #[test]
    fn softmax_examples() {
        let s = row_softmax(&Tensor::from_rows(&[vec![0.0f32, 0.0]]).unwrap());
        assert_eq!(s.data(), &[0.5, 0.5]);
        let s = row_softmax(&Tensor::from_rows(&[vec![1000.0f32; 3]]).unwrap());
        for &v in s.data() {
            assert_abs_diff_eq!(v, 1.0 / 3.0, epsilon = 1e-7);
        }
        // e^0 / (e^0 + e^{ln 3}) = 1/4
        let s = row_softmax(&Tensor::vector(vec![0.0f64, 3f64.ln()]));
        assert_abs_diff_eq!(s.data()[0], 0.25, epsilon = 1e-12);
        assert_abs_diff_eq!(s.data()[1], 0.75, epsilon = 1e-12);
    }

    #[test]
    fn softmax_masked_entries_are_zero() {
        let s = row_softmax(&Tensor::vector(vec![0.0f32, f32::NEG_INFINITY]));
        assert_eq!(s.data(), &[1.0, 0.0]);
    }

    #[test]
    fn layer_norm_examples() {
        let ones = Tensor::vector(vec![1.0f32; 4]);
        let zeros = Tensor::vector(vec![0.0f32; 4]);
        let x = Tensor::from_rows(&[vec![2.5f32; 4]]).unwrap();
        let y = layer_norm(&x, &ones, &zeros, 1e-5).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));

        let g = Tensor::vector(vec![1.0f64; 2]);
        let b = Tensor::vector(vec![0.0f64; 2]);
        let x = Tensor::from_rows(&[vec![-1.0f64, 1.0]]).unwrap();
        let y = layer_norm(&x, &g, &b, 1e-12).unwrap();
        assert_abs_diff_eq!(y.data()[0], -1.0, epsilon = 1e-9);
        assert_abs_diff_eq!(y.data()[1], 1.0, epsilon = 1e-9);
    }

    #[test]
    fn layer_norm_matches_two_pass_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let d = 37;
        let x = random(&mut rng, 3, d);
        let g = random(&mut rng, 1, d).reshape(vec![d]).unwrap();
        let b = random(&mut rng, 1, d).reshape(vec![d]).unwrap();
        let got = layer_norm(&x, &g, &b, 1e-5).unwrap();
        for i in 0..3 {
            let row: Vec<f64> = x.row(i).iter().map(|&v| v as f64).collect();
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            for j in 0..d {
                let want = (row[j] - mean) / (var + 1e-5).sqrt() * g.data()[j] as f64 + b.data()[j] as f64;
                assert_abs_diff_eq!(got.row(i)[j] as f64, want, epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn layer_norm_rejects_wrong_gain() {
        let x = Tensor::<f32>::zeros(vec![2, 3]);
        let g = Tensor::<f32>::zeros(vec![4]);
        assert!(layer_norm(&x, &g, &g, 1e-5).is_err());
    }

    #[test]
    fn gelu_examples() {
        assert_eq!(gelu_scalar(0.0f32), 0.0);
        assert_abs_diff_eq!(gelu_scalar(20.0f32), 20.0, epsilon = 1e-5);
        // 0.5 * (1 + tanh(sqrt(2/pi) * 1.044715))
        let want = 0.5 * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * 1.044715).tanh());
        assert_abs_diff_eq!(gelu_scalar(1.0f64), want, epsilon = 1e-12);
        assert_abs_diff_eq!(gelu_scalar(1.0f32), 0.8412, epsilon = 1e-4);
    }

    #[test]
    fn new_checks_length() {
        assert!(Tensor::new(vec![2, 2], vec![0.0f32; 3]).is_err());
        assert!(Tensor::new(vec![1, 1, 1, 1], vec![0.0f32]).is_err());
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(rows in proptest::collection::vec(
            proptest::collection::vec(-80.0f32..80.0, 1..40), 1..5)) {
            let n = rows[0].len();
            let rows: Vec<Vec<f32>> = rows.into_iter().map(|mut r| { r.resize(n, 0.0); r }).collect();
            let s = row_softmax(&Tensor::from_rows(&rows).unwrap());
            for i in 0..s.rows() {
                let sum: f64 = s.row(i).iter().map(|&p| p as f64).sum();
                prop_assert!((sum - 1.0).abs() < 1e-6);
                prop_assert!(s.row(i).iter().all(|&p| p >= 0.0));
            }
        }

        #[test]
        fn layer_norm_standardizes(row in proptest::collection::vec(-100.0f32..100.0, 8..64)) {
            let d = row.len();
            let mean = row.iter().map(|&v| v as f64).sum::<f64>() / d as f64;
            let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / d as f64;
            prop_assume!(var > 1e-2);
            let x = Tensor::matrix(1, d, row).unwrap();
            let y = layer_norm(&x, &Tensor::vector(vec![1.0; d]), &Tensor::vector(vec![0.0; d]), 1e-5).unwrap();
            let m = y.data().iter().map(|&v| v as f64).sum::<f64>() / d as f64;
            let v = y.data().iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>() / d as f64;
            prop_assert!(m.abs() < 1e-5);
            prop_assert!((v - 1.0).abs() < 1e-3);
        }
    }
}

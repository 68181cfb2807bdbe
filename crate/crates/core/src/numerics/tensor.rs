use super::error::{NumericsError, Result};
use super::scalar::Scalar;

/// Dense row-major n-dimensional array.
///
/// An empty shape denotes a scalar holding one element. Every other
/// dimension must be positive.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

/// Splits `shape` around `axis` into (outer, axis length, inner) extents.
pub(crate) fn axis_extents(
    op: &'static str,
    shape: &[usize],
    axis: usize,
) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(NumericsError::Axis {
            op,
            axis,
            shape: shape.to_vec(),
        });
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-approximated GELU and its derivative.
#[inline]
pub(crate) fn gelu_with_grad<T: Scalar>(x: T) -> (T, T) {
    let half = T::from_f64(0.5);
    let one = T::one();
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(GELU_A);
    let x2 = x * x;
    let u = c * (x + a * x2 * x);
    let th = u.tanh();
    let y = half * x * (one + th);
    let du = c * (one + T::from_f64(3.0) * a * x2);
    let dy = half * (one + th) + half * x * (one - th * th) * du;
    (y, dy)
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(NumericsError::InvalidShape(shape));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(NumericsError::DataLength {
                shape,
                expected,
                got: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        assert!(shape.iter().all(|&d| d > 0), "invalid shape {shape:?}");
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        assert!(shape.iter().all(|&d| d > 0), "invalid shape {shape:?}");
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    /// Builds a matrix from nested rows; panics on ragged input.
    pub fn from_rows(rows: &[Vec<T>]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|row| row.len() == c), "ragged rows");
        let data = rows.iter().flatten().copied().collect();
        Self::new(vec![r, c], data).expect("from_rows")
    }

    pub fn vector(data: Vec<T>) -> Self {
        let n = data.len();
        Self::new(vec![n], data).expect("vector")
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn item(&self) -> T {
        debug_assert_eq!(self.numel(), 1);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }

    pub fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            &[r, c] => Ok((r, c)),
            _ => Err(NumericsError::Rank {
                op,
                expected: 2,
                got: self.shape.clone(),
            }),
        }
    }

    pub fn at2(&self, i: usize, j: usize) -> T {
        self.data[i * self.shape[1] + j]
    }

    pub fn row(&self, i: usize) -> &[T] {
        let c = self.shape[self.shape.len() - 1];
        &self.data[i * c..(i + 1) * c]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Self::new(shape.to_vec(), self.data.clone())
    }

    fn check_same(&self, other: &Self, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(NumericsError::ShapeMismatch {
                op,
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        Ok(())
    }

    fn zip_with(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.check_same(other, op)?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    pub(crate) fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let (p, q) = self.dims2("matmul")?;
        let (q2, r) = other.dims2("matmul")?;
        if q != q2 {
            return Err(NumericsError::ShapeMismatch {
                op: "matmul",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        let mut out = vec![T::zero(); p * r];
        // four output rows per pass so each row of `other` is loaded once
        let mut blocks = out.chunks_exact_mut(4 * r);
        let mut i = 0;
        for block in &mut blocks {
            let (o0, rest) = block.split_at_mut(r);
            let (o1, rest) = rest.split_at_mut(r);
            let (o2, o3) = rest.split_at_mut(r);
            let a = &self.data[i * q..(i + 4) * q];
            for k in 0..q {
                let (a0, a1, a2, a3) = (a[k], a[q + k], a[2 * q + k], a[3 * q + k]);
                let brow = &other.data[k * r..(k + 1) * r];
                for j in 0..r {
                    let b = brow[j];
                    o0[j] = o0[j] + a0 * b;
                    o1[j] = o1[j] + a1 * b;
                    o2[j] = o2[j] + a2 * b;
                    o3[j] = o3[j] + a3 * b;
                }
            }
            i += 4;
        }
        for orow in blocks.into_remainder().chunks_exact_mut(r.max(1)) {
            let arow = &self.data[i * q..(i + 1) * q];
            for (k, &a) in arow.iter().enumerate() {
                let brow = &other.data[k * r..(k + 1) * r];
                for (o, &b) in orow.iter_mut().zip(brow) {
                    *o = *o + a * b;
                }
            }
            i += 1;
        }
        Ok(Self {
            shape: vec![p, r],
            data: out,
        })
    }

    /// `self · otherᵀ` without materialising the transpose.
    pub(crate) fn matmul_nt(&self, other: &Self) -> Self {
        let (p, q) = (self.shape[0], self.shape[1]);
        let r = other.shape[0];
        debug_assert_eq!(other.shape[1], q);
        let mut out = vec![T::zero(); p * r];
        for i in 0..p {
            let arow = &self.data[i * q..(i + 1) * q];
            for j in 0..r {
                let brow = &other.data[j * q..(j + 1) * q];
                out[i * r + j] = arow.iter().zip(brow).map(|(&a, &b)| a * b).sum();
            }
        }
        Self {
            shape: vec![p, r],
            data: out,
        }
    }

    /// `selfᵀ · other` without materialising the transpose.
    pub(crate) fn matmul_tn(&self, other: &Self) -> Self {
        let (q, p) = (self.shape[0], self.shape[1]);
        let r = other.shape[1];
        debug_assert_eq!(other.shape[0], q);
        let mut out = vec![T::zero(); p * r];
        for k in 0..q {
            let arow = &self.data[k * p..(k + 1) * p];
            let brow = &other.data[k * r..(k + 1) * r];
            for (i, &a) in arow.iter().enumerate() {
                if a == T::zero() {
                    continue;
                }
                let orow = &mut out[i * r..(i + 1) * r];
                for (o, &b) in orow.iter_mut().zip(brow) {
                    *o = *o + a * b;
                }
            }
        }
        Self {
            shape: vec![p, r],
            data: out,
        }
    }

    pub fn transpose(&self) -> Result<Self> {
        let (r, c) = self.dims2("transpose")?;
        let mut out = Vec::with_capacity(r * c);
        for j in 0..c {
            for i in 0..r {
                out.push(self.data[i * c + j]);
            }
        }
        Ok(Self {
            shape: vec![c, r],
            data: out,
        })
    }

    /// Adds a length-`c` vector to every row of an `r×c` matrix.
    pub fn add_row_bias(&self, bias: &Self) -> Result<Self> {
        let (_, c) = self.dims2("add_bias")?;
        if bias.shape != [c] {
            return Err(NumericsError::ShapeMismatch {
                op: "add_bias",
                left: self.shape.clone(),
                right: bias.shape.clone(),
            });
        }
        let mut out = self.clone();
        for row in out.data.chunks_mut(c) {
            for (o, &b) in row.iter_mut().zip(&bias.data) {
                *o = *o + b;
            }
        }
        Ok(out)
    }

    pub fn softmax(&self, axis: usize) -> Result<Self> {
        if !self.is_finite() {
            return Err(NumericsError::NonFinite { op: "softmax" });
        }
        let (outer, k, inner) = axis_extents("softmax", &self.shape, axis)?;
        let mut out = self.data.clone();
        for o in 0..outer {
            for j in 0..inner {
                let idx = |i: usize| (o * k + i) * inner + j;
                let mut m = T::neg_infinity();
                for i in 0..k {
                    m = m.max(out[idx(i)]);
                }
                let mut total = T::zero();
                for i in 0..k {
                    let e = (out[idx(i)] - m).exp();
                    out[idx(i)] = e;
                    total = total + e;
                }
                for i in 0..k {
                    out[idx(i)] = out[idx(i)] / total;
                }
            }
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: out,
        })
    }

    fn reduced_shape(&self, axis: usize) -> Vec<usize> {
        let mut s = self.shape.clone();
        s.remove(axis);
        s
    }

    pub fn sum_axis(&self, axis: usize) -> Result<Self> {
        let (outer, k, inner) = axis_extents("sum", &self.shape, axis)?;
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for i in 0..k {
                let src = &self.data[(o * k + i) * inner..(o * k + i + 1) * inner];
                for (d, &s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d = *d + s;
                }
            }
        }
        Ok(Self {
            shape: self.reduced_shape(axis),
            data: out,
        })
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Self> {
        let k = *self.shape.get(axis).ok_or(NumericsError::Axis {
            op: "mean",
            axis,
            shape: self.shape.clone(),
        })?;
        Ok(self.sum_axis(axis)?.scale(T::one() / T::from_usize(k)))
    }

    pub fn sum_all(&self) -> T {
        self.data.iter().copied().sum()
    }

    /// Index of the maximum along `axis`; the lowest index wins ties.
    /// Returned flat in the row-major order of the reduced shape.
    pub fn argmax(&self, axis: usize) -> Result<Vec<usize>> {
        let (outer, k, inner) = axis_extents("argmax", &self.shape, axis)?;
        let mut out = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for j in 0..inner {
                let mut best = 0;
                let mut best_v = self.data[o * k * inner + j];
                for i in 1..k {
                    let v = self.data[(o * k + i) * inner + j];
                    if v > best_v {
                        best = i;
                        best_v = v;
                    }
                }
                out.push(best);
            }
        }
        Ok(out)
    }

    pub fn concat(parts: &[&Self], axis: usize) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| NumericsError::Contract("concat of zero tensors".into()))?;
        let (outer, _, inner) = axis_extents("concat", &first.shape, axis)?;
        let mut total_k = 0;
        for p in parts {
            let same_rank = p.shape.len() == first.shape.len();
            let same_other = same_rank
                && p.shape
                    .iter()
                    .zip(&first.shape)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !same_other {
                return Err(NumericsError::ShapeMismatch {
                    op: "concat",
                    left: first.shape.clone(),
                    right: p.shape.clone(),
                });
            }
            total_k += p.shape[axis];
        }
        let mut data = Vec::with_capacity(outer * total_k * inner);
        for o in 0..outer {
            for p in parts {
                let k = p.shape[axis];
                data.extend_from_slice(&p.data[o * k * inner..(o + 1) * k * inner]);
            }
        }
        let mut shape = first.shape.clone();
        shape[axis] = total_k;
        Ok(Self { shape, data })
    }

    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Self> {
        let (outer, k, inner) = axis_extents("slice", &self.shape, axis)?;
        if len == 0 || start + len > k {
            return Err(NumericsError::Index {
                op: "slice",
                index: start + len,
                len: k,
            });
        }
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * k + start) * inner;
            data.extend_from_slice(&self.data[base..base + len * inner]);
        }
        let mut shape = self.shape.clone();
        shape[axis] = len;
        Ok(Self { shape, data })
    }

    pub fn gelu(&self) -> Self {
        self.map(|v| gelu_with_grad(v).0)
    }

    /// Row-wise layer normalisation over the last axis of a matrix.
    pub fn layer_norm(&self, gamma: &Self, beta: &Self, eps: T) -> Result<Self> {
        Ok(layer_norm_forward(self, gamma, beta, eps)?.0)
    }

    pub fn select_rows(&self, rows: &[usize]) -> Result<Self> {
        let (r, c) = self.dims2("select_rows")?;
        let mut data = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            if i >= r {
                return Err(NumericsError::Index {
                    op: "select_rows",
                    index: i,
                    len: r,
                });
            }
            data.extend_from_slice(&self.data[i * c..(i + 1) * c]);
        }
        Self::new(vec![rows.len(), c], data)
    }

    /// Places row `k` of `self` at row `rows[k]` of an `n×c` zero matrix,
    /// accumulating on repeated indices.
    pub fn scatter_rows(&self, rows: &[usize], n: usize) -> Result<Self> {
        let (r, c) = self.dims2("scatter_rows")?;
        if r != rows.len() {
            return Err(NumericsError::Contract(format!(
                "scatter_rows: {} source rows but {} indices",
                r,
                rows.len()
            )));
        }
        let mut out = Self::zeros(&[n, c]);
        for (k, &i) in rows.iter().enumerate() {
            if i >= n {
                return Err(NumericsError::Index {
                    op: "scatter_rows",
                    index: i,
                    len: n,
                });
            }
            for j in 0..c {
                out.data[i * c + j] = out.data[i * c + j] + self.data[k * c + j];
            }
        }
        Ok(out)
    }

    /// `out[i] = self[index[i]]` over the flat buffers.
    pub fn gather(&self, index: &[usize], shape: &[usize]) -> Result<Self> {
        let mut data = Vec::with_capacity(index.len());
        for &i in index {
            data.push(*self.data.get(i).ok_or(NumericsError::Index {
                op: "gather",
                index: i,
                len: self.data.len(),
            })?);
        }
        Self::new(shape.to_vec(), data)
    }

    pub fn mse(&self, other: &Self) -> Result<T> {
        self.check_same(other, "mse")?;
        let total: T = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum();
        Ok(total / T::from_usize(self.numel()))
    }
}

/// Returns the normalised output plus per-row (mean, 1/std) for backward.
pub(crate) fn layer_norm_forward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<(Tensor<T>, Vec<T>, Vec<T>)> {
    let (r, c) = x.dims2("layer_norm")?;
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(NumericsError::ShapeMismatch {
            op: "layer_norm",
            left: x.shape().to_vec(),
            right: gamma.shape().to_vec(),
        });
    }
    let cf = T::from_usize(c);
    let mut out = Vec::with_capacity(r * c);
    let mut means = Vec::with_capacity(r);
    let mut rstds = Vec::with_capacity(r);
    for i in 0..r {
        let row = x.row(i);
        let mean = row.iter().copied().sum::<T>() / cf;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / cf;
        let rstd = T::one() / (var + eps).sqrt();
        for j in 0..c {
            out.push((row[j] - mean) * rstd * gamma.data()[j] + beta.data()[j]);
        }
        means.push(mean);
        rstds.push(rstd);
    }
    Ok((Tensor::new(vec![r, c], out)?, means, rstds))
}

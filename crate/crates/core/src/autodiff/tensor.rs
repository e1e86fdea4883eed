use crate::error::{Error, Result};

/// Dense row-major matrix of `f64`. Vectors are `1 x n` matrices; batches put one
/// sample per row.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape {
                op: "from_vec",
                left: (rows, cols),
                right: (data.len(), 1),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn row_vector(data: Vec<f64>) -> Self {
        Self {
            rows: 1,
            cols: data.len(),
            data,
        }
    }

    pub fn column(data: Vec<f64>) -> Self {
        Self {
            rows: data.len(),
            cols: 1,
            data,
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::Shape {
                    op: "from_rows",
                    left: (rows.len(), cols),
                    right: (1, r.len()),
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// `out += a * b` for row-major `a: m x k`, `b: k x n`, `out: m x n`.
///
/// Every output element accumulates `a[i,p] * b[p,j]` in ascending `p` with separate
/// multiply and add roundings, so results do not depend on tiling, vector width or
/// instruction set.
pub(crate) fn gemm_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    dispatch(a, k, 1, b, out, m, k, n);
}

/// `out += a^T * b` for `a: m x k`, `b: m x n`, `out: k x n`.
pub(crate) fn gemm_tn_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    dispatch(a, 1, k, b, out, k, m, n);
}

const TR: usize = 4;
const TC: usize = 8;

fn dispatch(
    a: &[f64],
    ars: usize,
    acs: usize,
    b: &[f64],
    out: &mut [f64],
    rows: usize,
    depth: usize,
    n: usize,
) {
    if depth == 0 || rows == 0 || n == 0 {
        return;
    }
    #[cfg(target_arch = "x86_64")]
    {
        if std::arch::is_x86_feature_detected!("avx") {
            // SAFETY: the feature was detected at runtime.
            unsafe { kernel_avx(a, ars, acs, b, out, rows, depth, n) };
            return;
        }
    }
    kernel(a, ars, acs, b, out, rows, depth, n);
}

/// Same arithmetic as [`kernel`], with full 4 x 8 tiles held in AVX registers.
#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx")]
#[allow(clippy::too_many_arguments)]
unsafe fn kernel_avx(
    a: &[f64],
    ars: usize,
    acs: usize,
    b: &[f64],
    out: &mut [f64],
    rows: usize,
    depth: usize,
    n: usize,
) {
    use std::arch::x86_64::*;
    let full_rows = rows - rows % TR;
    let full_cols = n - n % TC;
    if depth > 0 && full_rows > 0 && full_cols > 0 {
        assert!((full_rows - 1) * ars + (depth - 1) * acs < a.len());
        assert!((depth - 1) * n + full_cols <= b.len());
        assert!(rows * n <= out.len());
        let (ap, bp, op) = (a.as_ptr(), b.as_ptr(), out.as_mut_ptr());
        for r0 in (0..full_rows).step_by(TR) {
            for j0 in (0..full_cols).step_by(TC) {
                let o = |r: usize, h: usize| op.add((r0 + r) * n + j0 + 4 * h);
                let mut c00 = _mm256_loadu_pd(o(0, 0));
                let mut c01 = _mm256_loadu_pd(o(0, 1));
                let mut c10 = _mm256_loadu_pd(o(1, 0));
                let mut c11 = _mm256_loadu_pd(o(1, 1));
                let mut c20 = _mm256_loadu_pd(o(2, 0));
                let mut c21 = _mm256_loadu_pd(o(2, 1));
                let mut c30 = _mm256_loadu_pd(o(3, 0));
                let mut c31 = _mm256_loadu_pd(o(3, 1));
                let a0 = ap.add(r0 * ars);
                for s in 0..depth {
                    let b0 = _mm256_loadu_pd(bp.add(s * n + j0));
                    let b1 = _mm256_loadu_pd(bp.add(s * n + j0 + 4));
                    let ab = a0.add(s * acs);
                    let x0 = _mm256_set1_pd(*ab);
                    let x1 = _mm256_set1_pd(*ab.add(ars));
                    let x2 = _mm256_set1_pd(*ab.add(2 * ars));
                    let x3 = _mm256_set1_pd(*ab.add(3 * ars));
                    c00 = _mm256_add_pd(c00, _mm256_mul_pd(x0, b0));
                    c01 = _mm256_add_pd(c01, _mm256_mul_pd(x0, b1));
                    c10 = _mm256_add_pd(c10, _mm256_mul_pd(x1, b0));
                    c11 = _mm256_add_pd(c11, _mm256_mul_pd(x1, b1));
                    c20 = _mm256_add_pd(c20, _mm256_mul_pd(x2, b0));
                    c21 = _mm256_add_pd(c21, _mm256_mul_pd(x2, b1));
                    c30 = _mm256_add_pd(c30, _mm256_mul_pd(x3, b0));
                    c31 = _mm256_add_pd(c31, _mm256_mul_pd(x3, b1));
                }
                _mm256_storeu_pd(o(0, 0), c00);
                _mm256_storeu_pd(o(0, 1), c01);
                _mm256_storeu_pd(o(1, 0), c10);
                _mm256_storeu_pd(o(1, 1), c11);
                _mm256_storeu_pd(o(2, 0), c20);
                _mm256_storeu_pd(o(2, 1), c21);
                _mm256_storeu_pd(o(3, 0), c30);
                _mm256_storeu_pd(o(3, 1), c31);
            }
        }
    }
    // Ragged edges: right-hand columns of the tiled rows, then the leftover rows.
    if full_cols < n {
        for r in 0..full_rows {
            for j in full_cols..n {
                let mut v = out[r * n + j];
                for s in 0..depth {
                    v += a[r * ars + s * acs] * b[s * n + j];
                }
                out[r * n + j] = v;
            }
        }
    }
    if full_rows < rows {
        let a_rest = &a[full_rows * ars..];
        kernel(
            a_rest,
            ars,
            acs,
            b,
            &mut out[full_rows * n..],
            rows - full_rows,
            depth,
            n,
        );
    }
}

/// `out[r, j] += sum_s A(r, s) * b[s, j]` with `A(r, s) = a[r * ars + s * acs]`.
#[inline(always)]
#[allow(clippy::too_many_arguments)]
fn kernel(
    a: &[f64],
    ars: usize,
    acs: usize,
    b: &[f64],
    out: &mut [f64],
    rows: usize,
    depth: usize,
    n: usize,
) {
    let full_cols = n - n % TC;
    let mut r0 = 0;
    while r0 < rows {
        let tr = TR.min(rows - r0);
        let mut j0 = 0;
        while j0 < full_cols {
            if tr == TR {
                let mut acc = [[0.0f64; TC]; TR];
                for (r, row) in acc.iter_mut().enumerate() {
                    row.copy_from_slice(&out[(r0 + r) * n + j0..(r0 + r) * n + j0 + TC]);
                }
                if depth > 0 {
                    assert!((r0 + TR - 1) * ars + (depth - 1) * acs < a.len());
                    assert!((depth - 1) * n + j0 + TC <= b.len());
                }
                for s in 0..depth {
                    // SAFETY: the largest indices touched were bounds-checked above.
                    let bt = unsafe { &*(b.as_ptr().add(s * n + j0) as *const [f64; TC]) };
                    for (r, row) in acc.iter_mut().enumerate() {
                        let av = unsafe { *a.get_unchecked((r0 + r) * ars + s * acs) };
                        for c in 0..TC {
                            row[c] += av * bt[c];
                        }
                    }
                }
                for (r, row) in acc.iter().enumerate() {
                    out[(r0 + r) * n + j0..(r0 + r) * n + j0 + TC].copy_from_slice(row);
                }
            } else {
                for r in r0..r0 + tr {
                    let mut acc: [f64; TC] = out[r * n + j0..r * n + j0 + TC].try_into().unwrap();
                    for s in 0..depth {
                        let bt: &[f64; TC] = b[s * n + j0..s * n + j0 + TC].try_into().unwrap();
                        let av = a[r * ars + s * acs];
                        for c in 0..TC {
                            acc[c] += av * bt[c];
                        }
                    }
                    out[r * n + j0..r * n + j0 + TC].copy_from_slice(&acc);
                }
            }
            j0 += TC;
        }
        for r in r0..r0 + tr {
            for j in full_cols..n {
                let mut v = out[r * n + j];
                for s in 0..depth {
                    v += a[r * ars + s * acs] * b[s * n + j];
                }
                out[r * n + j] = v;
            }
        }
        r0 += tr;
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A named trainable tensor with its gradient accumulator.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
    pub grad: Vec<f64>,
    pub requires_grad: bool,
}

impl ParamTensor {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if shape.is_empty() || shape.contains(&0) || values.len() != expected {
            return Err(Error::contract(format!(
                "parameter values length {} does not match shape {:?}",
                values.len(),
                shape
            )));
        }
        let n = values.len();
        Ok(Self {
            name: name.into(),
            shape,
            values,
            grad: vec![0.0; n],
            requires_grad: true,
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// The tensor interpreted as a matrix; rank-1 tensors become row vectors.
    pub fn matrix_shape(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            [n] => (1, *n),
            [r, c] => (*r, *c),
            other => (other[0], other[1..].iter().product()),
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }
}

/// Ordered collection of parameters. Order is part of the checkpoint format.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: Vec<ParamTensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, tensor: ParamTensor) -> ParamId {
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &ParamTensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ParamTensor {
        &mut self.tensors[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.tensors
            .iter()
            .position(|t| t.name == name)
            .map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &ParamTensor> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut ParamTensor> {
        self.tensors.iter_mut()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn zero_grads(&mut self) {
        self.tensors.iter_mut().for_each(ParamTensor::zero_grad);
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(ParamTensor::len).sum()
    }
}

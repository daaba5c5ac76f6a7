//! Dense row-major matrices and the handful of kernels the model needs.
//!
//! Token sequences are stored one token per row, so an `n×H` matrix holds the
//! `H`-wide vectors of `n` positions.

use rand::Rng;

use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct Matrix<T> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: T) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Self {
        assert_eq!(rows * cols, data.len(), "matrix data length");
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Self::from_vec(rows.len(), cols, data)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn at_mut(&mut self, r: usize, c: usize) -> &mut T {
        &mut self.data[r * self.cols + c]
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn fill(&mut self, value: T) {
        self.data.iter_mut().for_each(|x| *x = value);
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.rows, self.cols)
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: T, other: &Self) {
        assert_eq!(self.shape(), other.shape(), "axpy shape");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        self.axpy(T::one(), other);
    }

    pub fn scale(&mut self, s: T) {
        self.data.iter_mut().for_each(|x| *x *= s);
    }

    pub fn sum_sq(&self) -> T {
        self.data.iter().map(|&x| x * x).sum()
    }

    /// Rows `0..n` as a new matrix.
    pub fn head_rows(&self, n: usize) -> Self {
        Self::from_vec(n, self.cols, self.data[..n * self.cols].to_vec())
    }

    /// Gathers the listed rows into a new matrix.
    pub fn gather_rows(&self, idx: &[usize]) -> Self {
        let mut out = Self::zeros(idx.len(), self.cols);
        for (o, &i) in idx.iter().enumerate() {
            out.row_mut(o).copy_from_slice(self.row(i));
        }
        out
    }

    /// Adds `bias` (a `1×cols` matrix) to every row.
    pub fn add_row_vector(&mut self, bias: &Self) {
        assert_eq!(bias.len(), self.cols, "bias width");
        for r in 0..self.rows {
            for (x, &b) in self.row_mut(r).iter_mut().zip(&bias.data) {
                *x += b;
            }
        }
    }

    /// Accumulates the column sums of `self` into `acc` (a `1×cols` matrix).
    pub fn col_sums_into(&self, acc: &mut Self) {
        assert_eq!(acc.len(), self.cols, "column-sum width");
        for r in 0..self.rows {
            for (a, &x) in acc.data.iter_mut().zip(self.row(r)) {
                *a += x;
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| U::lit(x.as_f64())).collect(),
        }
    }
}

/// Strided read-only view used for head slices and transposes.
#[derive(Clone, Copy)]
pub struct View<'a, T> {
    pub data: &'a [T],
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a, T: Scalar> View<'a, T> {
    pub fn of(m: &'a Matrix<T>) -> Self {
        Self {
            data: &m.data,
            offset: 0,
            rows: m.rows,
            cols: m.cols,
            rs: m.cols,
            cs: 1,
        }
    }

    /// Columns `start..start + width` of `m`.
    pub fn columns(m: &'a Matrix<T>, start: usize, width: usize) -> Self {
        assert!(start + width <= m.cols, "column slice out of range");
        Self {
            data: &m.data,
            offset: start,
            rows: m.rows,
            cols: width,
            rs: m.cols,
            cs: 1,
        }
    }

    pub fn t(self) -> Self {
        Self {
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
            ..self
        }
    }

    fn check(&self) {
        if self.rows > 0 && self.cols > 0 {
            let last = self.offset + (self.rows - 1) * self.rs + (self.cols - 1) * self.cs;
            assert!(last < self.data.len(), "view out of bounds");
        }
    }
}

/// Strided mutable destination.
pub struct ViewMut<'a, T> {
    pub data: &'a mut [T],
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a, T: Scalar> ViewMut<'a, T> {
    pub fn of(m: &'a mut Matrix<T>) -> Self {
        let (rows, cols) = m.shape();
        Self {
            data: &mut m.data,
            offset: 0,
            rows,
            cols,
            rs: cols,
            cs: 1,
        }
    }

    pub fn columns(m: &'a mut Matrix<T>, start: usize, width: usize) -> Self {
        assert!(start + width <= m.cols, "column slice out of range");
        let (rows, cols) = m.shape();
        Self {
            data: &mut m.data,
            offset: start,
            rows,
            cols: width,
            rs: cols,
            cs: 1,
        }
    }
}

/// `c = alpha * a * b + beta * c` on views.
pub fn gemm_view<T: Scalar>(alpha: T, a: View<'_, T>, b: View<'_, T>, beta: T, c: ViewMut<'_, T>) {
    assert_eq!(a.cols, b.rows, "gemm inner dimension");
    assert_eq!(a.rows, c.rows, "gemm output rows");
    assert_eq!(b.cols, c.cols, "gemm output cols");
    a.check();
    b.check();
    if c.rows > 0 && c.cols > 0 {
        let last = c.offset + (c.rows - 1) * c.rs + (c.cols - 1) * c.cs;
        assert!(last < c.data.len(), "output view out of bounds");
    } else {
        return;
    }
    if a.cols == 0 {
        // Empty inner dimension: matrixmultiply still scales by beta.
        for r in 0..c.rows {
            for k in 0..c.cols {
                let x = &mut c.data[c.offset + r * c.rs + k * c.cs];
                *x = if beta == T::zero() { T::zero() } else { beta * *x };
            }
        }
        return;
    }
    // SAFETY: bounds of all three views were checked above and `c` is a
    // distinct mutable borrow, so it cannot alias `a` or `b`.
    unsafe {
        T::gemm_raw(
            a.rows,
            a.cols,
            b.cols,
            alpha,
            a.data.as_ptr().add(a.offset),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr().add(b.offset),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.data.as_mut_ptr().add(c.offset),
            c.rs as isize,
            c.cs as isize,
        );
    }
}

/// `c = alpha * op(a) * op(b) + beta * c` where `op` optionally transposes.
pub fn gemm<T: Scalar>(
    alpha: T,
    a: &Matrix<T>,
    trans_a: bool,
    b: &Matrix<T>,
    trans_b: bool,
    beta: T,
    c: &mut Matrix<T>,
) {
    let va = if trans_a { View::of(a).t() } else { View::of(a) };
    let vb = if trans_b { View::of(b).t() } else { View::of(b) };
    gemm_view(alpha, va, vb, beta, ViewMut::of(c));
}

pub fn matmul<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Matrix<T> {
    let mut c = Matrix::zeros(a.rows, b.cols);
    gemm(T::one(), a, false, b, false, T::zero(), &mut c);
    c
}

/// `a * bᵀ`
pub fn matmul_nt<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Matrix<T> {
    let mut c = Matrix::zeros(a.rows, b.rows);
    gemm(T::one(), a, false, b, true, T::zero(), &mut c);
    c
}

/// `x * w + bias`, with `w` stored `in×out` and `bias` `1×out`.
pub fn affine<T: Scalar>(x: &Matrix<T>, w: &Matrix<T>, bias: &Matrix<T>) -> Matrix<T> {
    let mut y = matmul(x, w);
    y.add_row_vector(bias);
    y
}

/// Backward of [`affine`]: accumulates `dw += xᵀ dy`, `db += Σ dy` and
/// returns `dx = dy wᵀ`.
pub fn affine_backward<T: Scalar>(
    x: &Matrix<T>,
    w: &Matrix<T>,
    dy: &Matrix<T>,
    dw: &mut Matrix<T>,
    db: &mut Matrix<T>,
) -> Matrix<T> {
    gemm(T::one(), x, true, dy, false, T::one(), dw);
    dy.col_sums_into(db);
    matmul_nt(dy, w)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// GELU, tanh form.
#[inline]
pub fn gelu<T: Scalar>(x: T) -> T {
    let half = T::lit(0.5);
    let inner = T::lit(GELU_C) * (x + T::lit(GELU_A) * x * x * x);
    half * x * (T::one() + inner.tanh())
}

#[inline]
pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let half = T::lit(0.5);
    let inner = T::lit(GELU_C) * (x + T::lit(GELU_A) * x * x * x);
    let th = inner.tanh();
    let dinner = T::lit(GELU_C) * (T::one() + T::lit(3.0 * GELU_A) * x * x);
    half * (T::one() + th) + half * x * (T::one() - th * th) * dinner
}

pub const LN_EPS: f64 = 1e-12;

/// Saved activations of a row-wise layer normalization.
#[derive(Clone, Debug)]
pub struct LayerNormCache<T> {
    pub xhat: Matrix<T>,
    pub rstd: Vec<T>,
}

pub fn layer_norm<T: Scalar>(
    x: &Matrix<T>,
    gain: &Matrix<T>,
    bias: &Matrix<T>,
) -> (Matrix<T>, LayerNormCache<T>) {
    let h = x.cols;
    let hn = T::lit(h as f64);
    let eps = T::lit(LN_EPS);
    let mut xhat = Matrix::zeros(x.rows, h);
    let mut y = Matrix::zeros(x.rows, h);
    let mut rstd = Vec::with_capacity(x.rows);
    for r in 0..x.rows {
        let row = x.row(r);
        let mean = row.iter().copied().sum::<T>() / hn;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / hn;
        let rs = T::one() / (var + eps).sqrt();
        rstd.push(rs);
        let xr = xhat.row_mut(r);
        for (o, &v) in xr.iter_mut().zip(row) {
            *o = (v - mean) * rs;
        }
        let yr = y.row_mut(r);
        for c in 0..h {
            yr[c] = xhat.data[r * h + c] * gain.data[c] + bias.data[c];
        }
    }
    (y, LayerNormCache { xhat, rstd })
}

pub fn layer_norm_backward<T: Scalar>(
    dy: &Matrix<T>,
    cache: &LayerNormCache<T>,
    gain: &Matrix<T>,
    dgain: &mut Matrix<T>,
    dbias: &mut Matrix<T>,
) -> Matrix<T> {
    let h = dy.cols;
    let hn = T::lit(h as f64);
    let mut dx = Matrix::zeros(dy.rows, h);
    let mut g = vec![T::zero(); h];
    for r in 0..dy.rows {
        let dyr = dy.row(r);
        let xh = cache.xhat.row(r);
        let mut sum_g = T::zero();
        let mut sum_gx = T::zero();
        for c in 0..h {
            dgain.data[c] += dyr[c] * xh[c];
            dbias.data[c] += dyr[c];
            g[c] = dyr[c] * gain.data[c];
            sum_g += g[c];
            sum_gx += g[c] * xh[c];
        }
        let k = cache.rstd[r] / hn;
        let dxr = dx.row_mut(r);
        for c in 0..h {
            dxr[c] = k * (hn * g[c] - sum_g - xh[c] * sum_gx);
        }
    }
    dx
}

/// In-place softmax of `xs`; returns nothing, leaves a probability vector.
pub fn softmax_in_place<T: Scalar>(xs: &mut [T]) {
    let max = xs.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for x in xs.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in xs.iter_mut() {
        *x /= sum;
    }
}

/// `log Σ exp(x)`
pub fn log_sum_exp<T: Scalar>(xs: &[T]) -> T {
    let max = xs.iter().copied().fold(T::neg_infinity(), T::max);
    if max == T::neg_infinity() {
        return max;
    }
    max + xs.iter().map(|&x| (x - max).exp()).sum::<T>().ln()
}

/// Inverted dropout mask: each entry is 0 or `1/(1-p)`.
pub fn dropout_mask<T: Scalar, R: Rng + ?Sized>(len: usize, p: f64, rng: &mut R) -> Vec<T> {
    let scale = T::lit(1.0 / (1.0 - p));
    (0..len)
        .map(|_| if rng.random::<f64>() < p { T::zero() } else { scale })
        .collect()
}

pub fn apply_mask<T: Scalar>(m: &mut Matrix<T>, mask: &[T]) {
    for (x, &k) in m.data.iter_mut().zip(mask) {
        *x *= k;
    }
}

/// Draws from a normal distribution truncated at two standard deviations.
pub fn truncated_normal<T: Scalar, R: Rng + ?Sized>(
    rows: usize,
    cols: usize,
    std: f64,
    rng: &mut R,
) -> Matrix<T> {
    use rand_distr::{Distribution, StandardNormal};
    let data = (0..rows * cols)
        .map(|_| loop {
            let z: f64 = StandardNormal.sample(rng);
            if z.abs() <= 2.0 {
                break T::lit(z * std);
            }
        })
        .collect();
    Matrix::from_vec(rows, cols, data)
}

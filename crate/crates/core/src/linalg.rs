//! Dense matrices, a one-sided Jacobi SVD, nuclear norm and approximate rank.
//!
//! Matrices are stored row-major. The SVD works on the columns of the taller
//! orientation (one-sided Hestenes-Jacobi), which is accurate and fast enough
//! for the small (at most a few hundred rows) matrices used here.

use std::fmt;

use crate::{Error, Result};

/// Default threshold for [`approximate_rank`].
pub const DEFAULT_DELTA: f64 = 0.01;

/// A pair of columns is treated as orthogonal once
/// `|a_p . a_q| <= JACOBI_TOL * |a_p| |a_q|`.
const JACOBI_TOL: f64 = 1e-12;
const JACOBI_MAX_SWEEPS: usize = 100;

/// Dense real matrix with finite entries.
#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows {
            writeln!(f, "  {:?}", self.row(r))?;
        }
        write!(f, "]")
    }
}

impl Matrix {
    /// Builds a matrix from row-major entries. Rejects empty shapes, a wrong
    /// entry count and non-finite entries.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::Empty("matrix shape"));
        }
        if data.len() != rows * cols {
            return Err(Error::dims("Matrix::new", rows * cols, data.len()));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("matrix entries"));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map(|x| x.as_ref().len()).unwrap_or(0);
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            let row = row.as_ref();
            if row.len() != c {
                return Err(Error::dims("Matrix::from_rows", c, row.len()));
            }
            data.extend_from_slice(row);
        }
        Self::new(r, c, data)
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "matrix shape must be non-empty");
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Square diagonal matrix.
    pub fn from_diag(diag: &[f64]) -> Result<Self> {
        let n = diag.len();
        let mut data = vec![0.0; n * n];
        for (i, d) in diag.iter().enumerate() {
            data[i * n + i] = *d;
        }
        Self::new(n, n, data)
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self::new(rows, cols, data)
    }

    /// `u vᵀ`.
    pub fn outer(u: &[f64], v: &[f64]) -> Result<Self> {
        Self::from_fn(u.len(), v.len(), |i, j| u[i] * v[j])
    }

    /// Caller guarantees shape and finiteness.
    pub(crate) fn from_parts(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    /// Panics on a non-finite value; matrices never hold NaN or infinity.
    pub fn set(&mut self, i: usize, j: usize, value: f64) {
        assert!(value.is_finite(), "matrix entries must be finite");
        self.data[i * self.cols + j] = value;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.rows.min(self.cols)).map(|i| self.get(i, i)).collect()
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = vec![0.0; self.data.len()];
        for i in 0..self.rows {
            for j in 0..self.cols {
                out[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        Matrix::from_parts(self.cols, self.rows, out)
    }

    pub fn matmul(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.cols != rhs.rows {
            return Err(Error::dims(
                "matmul",
                format!("{} inner rows", self.cols),
                rhs.rows,
            ));
        }
        let n = rhs.cols;
        let mut out = vec![0.0; self.rows * n];
        for i in 0..self.rows {
            let out_row = &mut out[i * n..(i + 1) * n];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a != 0.0 {
                    axpy(out_row, a, rhs.row(k));
                }
            }
        }
        Matrix::new(self.rows, n, out)
    }

    pub fn add(&self, rhs: &Matrix) -> Result<Matrix> {
        self.zip_with(rhs, "add", |a, b| a + b)
    }

    pub fn sub(&self, rhs: &Matrix) -> Result<Matrix> {
        self.zip_with(rhs, "sub", |a, b| a - b)
    }

    pub fn scale(&self, c: f64) -> Result<Matrix> {
        Matrix::new(self.rows, self.cols, self.data.iter().map(|x| x * c).collect())
    }

    fn zip_with(&self, rhs: &Matrix, ctx: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        if self.shape() != rhs.shape() {
            return Err(Error::dims(
                ctx,
                format!("{:?}", self.shape()),
                format!("{:?}", rhs.shape()),
            ));
        }
        let data = self.data.iter().zip(&rhs.data).map(|(a, b)| f(*a, *b)).collect();
        Matrix::new(self.rows, self.cols, data)
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|x| *x == 0.0)
    }

    /// Solves `self · X = rhs` by Gaussian elimination with partial pivoting.
    pub fn solve(&self, rhs: &Matrix) -> Result<Matrix> {
        let n = self.rows;
        if self.cols != n || rhs.rows != n {
            return Err(Error::dims("solve", format!("square {n}x{n} system"), format!("{:?} / {:?}", self.shape(), rhs.shape())));
        }
        let m = rhs.cols;
        let mut a = self.data.clone();
        let mut b = rhs.data.clone();
        for col in 0..n {
            let pivot = (col..n)
                .max_by(|&x, &y| a[x * n + col].abs().total_cmp(&a[y * n + col].abs()))
                .unwrap_or(col);
            if a[pivot * n + col].abs() < 1e-300 {
                return Err(Error::InvalidArgument("singular linear system".into()));
            }
            if pivot != col {
                for k in 0..n {
                    a.swap(col * n + k, pivot * n + k);
                }
                for k in 0..m {
                    b.swap(col * m + k, pivot * m + k);
                }
            }
            let d = a[col * n + col];
            for r in col + 1..n {
                let f = a[r * n + col] / d;
                if f == 0.0 {
                    continue;
                }
                for k in col..n {
                    a[r * n + k] -= f * a[col * n + k];
                }
                for k in 0..m {
                    b[r * m + k] -= f * b[col * m + k];
                }
            }
        }
        for col in (0..n).rev() {
            let d = a[col * n + col];
            for k in 0..m {
                let mut s = b[col * m + k];
                for j in col + 1..n {
                    s -= a[col * n + j] * b[j * m + k];
                }
                b[col * m + k] = s / d;
            }
        }
        Matrix::new(n, m, b)
    }
}

#[inline]
pub(crate) fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[inline]
fn dot(x: &[f64], y: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let xc = x.chunks_exact(4);
    let yc = y.chunks_exact(4);
    let (xr, yr) = (xc.remainder(), yc.remainder());
    for (a, b) in xc.zip(yc) {
        acc[0] += a[0] * b[0];
        acc[1] += a[1] * b[1];
        acc[2] += a[2] * b[2];
        acc[3] += a[3] * b[3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for (a, b) in xr.iter().zip(yr) {
        s += a * b;
    }
    s
}

/// Thin singular value decomposition `m = u · diag(s) · vᵀ`.
///
/// For an `r x c` input with `k = min(r, c)`: `u` is `r x k`, `v` is `c x k`,
/// both with orthonormal columns, and `singular_values` has length `k` in
/// non-increasing order. Each left singular vector has its first nonzero
/// entry non-negative.
#[derive(Debug, Clone)]
pub struct Svd {
    pub u: Matrix,
    pub singular_values: Vec<f64>,
    pub v: Matrix,
}

impl Svd {
    /// `u · diag(values) · vᵀ` for replacement singular values (e.g. after
    /// shrinkage). Zero entries are skipped.
    pub fn compose_with(&self, values: &[f64]) -> Matrix {
        let (r, c) = (self.u.rows, self.v.rows);
        let mut out = vec![0.0; r * c];
        let vt = self.v.transpose();
        for (k, &s) in values.iter().enumerate() {
            if s == 0.0 {
                continue;
            }
            let vk = vt.row(k);
            for i in 0..r {
                let a = self.u.get(i, k) * s;
                if a != 0.0 {
                    axpy(&mut out[i * c..(i + 1) * c], a, vk);
                }
            }
        }
        Matrix::from_parts(r, c, out)
    }

    pub fn reconstruct(&self) -> Matrix {
        self.compose_with(&self.singular_values)
    }
}

/// Column-major working copy of the tall orientation of a matrix.
struct TallColumns {
    m: usize,
    n: usize,
    cols: Vec<f64>,
    transposed: bool,
}

impl TallColumns {
    fn from_matrix(a: &Matrix) -> Self {
        let transposed = a.rows < a.cols;
        let (m, n) = if transposed { (a.cols, a.rows) } else { (a.rows, a.cols) };
        let mut cols = vec![0.0; m * n];
        for i in 0..a.rows {
            for j in 0..a.cols {
                let (r, c) = if transposed { (j, i) } else { (i, j) };
                cols[c * m + r] = a.get(i, j);
            }
        }
        Self { m, n, cols, transposed }
    }

    fn col(&self, j: usize) -> &[f64] {
        &self.cols[j * self.m..(j + 1) * self.m]
    }
}

fn rotate(x: &mut [f64], p: usize, q: usize, len: usize, c: f64, s: f64) {
    let (head, tail) = x.split_at_mut(q * len);
    let xp = &mut head[p * len..(p + 1) * len];
    let xq = &mut tail[..len];
    for (a, b) in xp.iter_mut().zip(xq.iter_mut()) {
        let (ap, aq) = (*a, *b);
        *a = c * ap - s * aq;
        *b = s * ap + c * aq;
    }
}

/// Orthogonalises the columns of `a` in place by plane rotations, applying
/// the same rotations to the columns of `v` when given. Returns the number
/// of sweeps used.
fn jacobi_sweeps(a: &mut [f64], m: usize, n: usize, mut v: Option<&mut [f64]>) -> usize {
    for sweep in 0..JACOBI_MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n.saturating_sub(1) {
            for q in p + 1..n {
                let (alpha, beta, gamma) = {
                    let ap = &a[p * m..(p + 1) * m];
                    let aq = &a[q * m..(q + 1) * m];
                    (dot(ap, ap), dot(aq, aq), dot(ap, aq))
                };
                if gamma == 0.0 || alpha == 0.0 || beta == 0.0 {
                    continue;
                }
                if gamma.abs() <= JACOBI_TOL * (alpha.sqrt() * beta.sqrt()) {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + 1f64.hypot(zeta));
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(a, p, q, m, c, s);
                if let Some(v) = v.as_deref_mut() {
                    rotate(v, p, q, n, c, s);
                }
            }
        }
        if !rotated {
            return sweep + 1;
        }
    }
    JACOBI_MAX_SWEEPS
}

fn check_finite(m: &Matrix) -> Result<()> {
    if m.data.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite("svd input"))
    }
}

/// Singular values only, in non-increasing order.
pub fn singular_values(m: &Matrix) -> Result<Vec<f64>> {
    check_finite(m)?;
    let mut t = TallColumns::from_matrix(m);
    jacobi_sweeps(&mut t.cols, t.m, t.n, None);
    let mut s: Vec<f64> = (0..t.n).map(|j| dot(t.col(j), t.col(j)).sqrt()).collect();
    s.sort_by(|a, b| b.total_cmp(a));
    Ok(s)
}

pub fn svd(m: &Matrix) -> Result<Svd> {
    check_finite(m)?;
    let mut t = TallColumns::from_matrix(m);
    let (rows, n) = (t.m, t.n);

    // Right factor in column-major order (column j = j-th right vector).
    let mut v = vec![0.0; n * n];
    for j in 0..n {
        v[j * n + j] = 1.0;
    }
    jacobi_sweeps(&mut t.cols, rows, n, Some(&mut v));

    let norms: Vec<f64> = (0..n).map(|j| dot(t.col(j), t.col(j)).sqrt()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| norms[b].total_cmp(&norms[a]).then(a.cmp(&b)));

    let mut u_cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut values = Vec::with_capacity(n);
    let mut v_cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    for &j in &order {
        let s = norms[j];
        let candidate = if s > 0.0 {
            Some(t.col(j).iter().map(|x| x / s).collect::<Vec<_>>())
        } else {
            None
        };
        let u = orthonormal_extension(&u_cols, candidate, rows);
        u_cols.push(u);
        values.push(s);
        v_cols.push(v[j * n..(j + 1) * n].to_vec());
    }

    // Sign convention: first clearly nonzero entry of each u column >= 0.
    for (u, vc) in u_cols.iter_mut().zip(v_cols.iter_mut()) {
        if let Some(first) = u.iter().find(|x| x.abs() > 1e-12) {
            if *first < 0.0 {
                u.iter_mut().for_each(|x| *x = -*x);
                vc.iter_mut().for_each(|x| *x = -*x);
            }
        }
    }

    let to_matrix = |cols: &[Vec<f64>], len: usize| {
        let k = cols.len();
        let mut data = vec![0.0; len * k];
        for (j, c) in cols.iter().enumerate() {
            for i in 0..len {
                data[i * k + j] = c[i];
            }
        }
        Matrix::from_parts(len, k, data)
    };
    let u_tall = to_matrix(&u_cols, rows);
    let v_tall = to_matrix(&v_cols, n);
    let (u, v) = if t.transposed { (v_tall, u_tall) } else { (u_tall, v_tall) };
    Ok(Svd {
        u,
        singular_values: values,
        v,
    })
}

/// Orthonormalises `candidate` against `basis` (two Gram-Schmidt passes).
/// Falls back to the standard basis vector with the largest residual when
/// the candidate is missing or numerically inside the span.
fn orthonormal_extension(basis: &[Vec<f64>], candidate: Option<Vec<f64>>, len: usize) -> Vec<f64> {
    let project_out = |mut x: Vec<f64>| {
        for _ in 0..2 {
            for b in basis {
                let c = dot(&x, b);
                axpy(&mut x, -c, b);
            }
        }
        let nrm = dot(&x, &x).sqrt();
        (x, nrm)
    };
    if let Some(c) = candidate {
        let (x, nrm) = project_out(c);
        if nrm > 0.5 {
            return x.into_iter().map(|v| v / nrm).collect();
        }
    }
    let mut best: Option<(Vec<f64>, f64)> = None;
    for i in 0..len {
        let mut e = vec![0.0; len];
        e[i] = 1.0;
        let (x, nrm) = project_out(e);
        if best.as_ref().map_or(true, |(_, b)| nrm > *b + 1e-12) {
            best = Some((x, nrm));
        }
    }
    let (x, nrm) = best.expect("non-empty basis search");
    x.into_iter().map(|v| v / nrm).collect()
}

/// Eigendecomposition `m = vectors · diag(values) · vectorsᵀ` of a
/// symmetric matrix. Values are in non-increasing order and column `k` of
/// `vectors` belongs to `values[k]`.
#[derive(Debug, Clone)]
pub struct SymmetricEigen {
    pub values: Vec<f64>,
    pub vectors: Matrix,
}

/// Householder tridiagonalisation followed by the implicit QL iteration.
pub fn symmetric_eigen(m: &Matrix) -> Result<SymmetricEigen> {
    check_finite(m)?;
    let n = m.rows;
    if m.cols != n {
        return Err(Error::dims("symmetric_eigen", format!("{n}x{n}"), format!("{}x{}", m.rows, m.cols)));
    }
    let scale = m.data.iter().fold(0.0f64, |a, x| a.max(x.abs()));
    for i in 0..n {
        for j in 0..i {
            if (m.get(i, j) - m.get(j, i)).abs() > 1e-12 * scale.max(1.0) {
                return Err(Error::InvalidArgument("symmetric_eigen needs a symmetric matrix".into()));
            }
        }
    }
    // Both phases index the transform column-major so their inner loops run
    // over contiguous memory; afterwards row `k` of `v` is eigenvector `k`.
    let mut v = m.transpose().data;
    let mut d = vec![0.0; n];
    let mut e = vec![0.0; n];
    tridiagonalize(&mut v, &mut d, &mut e, n);
    tridiagonal_ql(&mut v, &mut d, &mut e, n);

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| d[b].total_cmp(&d[a]).then(a.cmp(&b)));
    let values = order.iter().map(|&k| d[k]).collect();
    let vectors = Matrix::from_parts(n, n, (0..n * n).map(|x| v[order[x % n] * n + x / n]).collect());
    Ok(SymmetricEigen { values, vectors })
}

/// Reduces the symmetric `v` (column-major) to tridiagonal form; on return `v`
/// holds the accumulated orthogonal transform, `d` the diagonal and `e` the
/// sub-diagonal in `e[1..]`.
fn tridiagonalize(v: &mut [f64], d: &mut [f64], e: &mut [f64], n: usize) {
    if n == 0 {
        return;
    }
    let at = |i: usize, j: usize| j * n + i;
    for j in 0..n {
        d[j] = v[at(n - 1, j)];
    }
    for i in (1..n).rev() {
        let scale: f64 = d[..i].iter().map(|x| x.abs()).sum();
        let mut h = 0.0;
        if scale == 0.0 {
            e[i] = d[i - 1];
            for j in 0..i {
                d[j] = v[at(i - 1, j)];
                v[at(i, j)] = 0.0;
                v[at(j, i)] = 0.0;
            }
        } else {
            for k in 0..i {
                d[k] /= scale;
                h += d[k] * d[k];
            }
            let mut f = d[i - 1];
            let mut g = h.sqrt();
            if f > 0.0 {
                g = -g;
            }
            e[i] = scale * g;
            h -= f * g;
            d[i - 1] = f - g;
            e[..i].iter_mut().for_each(|x| *x = 0.0);
            for j in 0..i {
                f = d[j];
                v[at(j, i)] = f;
                let col = &v[j * n + j + 1..j * n + i];
                g = e[j] + v[at(j, j)] * f;
                for ((x, dk), ek) in col.iter().zip(&d[j + 1..i]).zip(&mut e[j + 1..i]) {
                    g += x * dk;
                    *ek += x * f;
                }
                e[j] = g;
            }
            f = 0.0;
            for j in 0..i {
                e[j] /= h;
                f += e[j] * d[j];
            }
            let hh = f / (h + h);
            for j in 0..i {
                e[j] -= hh * d[j];
            }
            for j in 0..i {
                f = d[j];
                g = e[j];
                for ((x, ek), dk) in v[j * n + j..j * n + i].iter_mut().zip(&e[j..i]).zip(&d[j..i]) {
                    *x -= f * ek + g * dk;
                }
                d[j] = v[at(i - 1, j)];
                v[at(i, j)] = 0.0;
            }
        }
        d[i] = h;
    }
    for i in 0..n - 1 {
        v[at(n - 1, i)] = v[at(i, i)];
        v[at(i, i)] = 1.0;
        let h = d[i + 1];
        if h != 0.0 {
            for k in 0..=i {
                d[k] = v[at(k, i + 1)] / h;
            }
            for j in 0..=i {
                let (head, tail) = v.split_at_mut((i + 1) * n);
                let pivot = &tail[..=i];
                let col = &mut head[j * n..j * n + i + 1];
                let g: f64 = pivot.iter().zip(col.iter()).map(|(a, b)| a * b).sum();
                for (x, dk) in col.iter_mut().zip(&d[..=i]) {
                    *x -= g * dk;
                }
            }
        }
        for k in 0..=i {
            v[at(k, i + 1)] = 0.0;
        }
    }
    for j in 0..n {
        d[j] = v[at(n - 1, j)];
        v[at(n - 1, j)] = 0.0;
    }
    v[at(n - 1, n - 1)] = 1.0;
    e[0] = 0.0;
}

/// Implicit QL with Wilkinson-style shifts on the tridiagonal `(d, e)`,
/// accumulating rotations into the columns of `v`.
fn tridiagonal_ql(v: &mut [f64], d: &mut [f64], e: &mut [f64], n: usize) {
    if n == 0 {
        return;
    }
    for i in 1..n {
        e[i - 1] = e[i];
    }
    e[n - 1] = 0.0;
    let mut f = 0.0;
    let mut tst1 = 0.0f64;
    let eps = f64::EPSILON;
    for l in 0..n {
        tst1 = tst1.max(d[l].abs() + e[l].abs());
        let mut m = l;
        while m < n - 1 && e[m].abs() > eps * tst1 {
            m += 1;
        }
        if m > l {
            for _ in 0..100 {
                let mut g = d[l];
                let mut p = (d[l + 1] - g) / (2.0 * e[l]);
                let mut r = norm2(p, 1.0);
                if p < 0.0 {
                    r = -r;
                }
                d[l] = e[l] / (p + r);
                d[l + 1] = e[l] * (p + r);
                let dl1 = d[l + 1];
                let mut h = g - d[l];
                for x in d.iter_mut().skip(l + 2) {
                    *x -= h;
                }
                f += h;

                p = d[m];
                let mut c = 1.0;
                let mut c2 = c;
                let mut c3 = c;
                let el1 = e[l + 1];
                let mut s = 0.0;
                let mut s2 = 0.0;
                for i in (l..m).rev() {
                    c3 = c2;
                    c2 = c;
                    s2 = s;
                    g = c * e[i];
                    h = c * p;
                    r = norm2(p, e[i]);
                    e[i + 1] = s * r;
                    s = e[i] / r;
                    c = p / r;
                    p = c * d[i] - s * g;
                    d[i + 1] = h + s * (c * g + s * d[i]);
                    let (left, right) = v[i * n..(i + 2) * n].split_at_mut(n);
                    for (x, y) in left.iter_mut().zip(right.iter_mut()) {
                        let h = *y;
                        *y = s * *x + c * h;
                        *x = c * *x - s * h;
                    }
                }
                p = -s * s2 * c3 * el1 * e[l] / dl1;
                e[l] = s * p;
                d[l] = c * p;
                if e[l].abs() <= eps * tst1 {
                    break;
                }
            }
        }
        d[l] += f;
        e[l] = 0.0;
    }
}

/// `sqrt(a^2 + b^2)` without `hypot`'s cost, rescaling only when squaring
/// would leave the normal range.
fn norm2(a: f64, b: f64) -> f64 {
    let sq = a * a + b * b;
    if sq.is_finite() && sq > f64::MIN_POSITIVE {
        sq.sqrt()
    } else {
        a.hypot(b)
    }
}

/// Sum of singular values.
pub fn nuclear_norm(m: &Matrix) -> Result<f64> {
    Ok(singular_values(m)?.iter().sum())
}

/// Smallest `k` whose leading singular values sum to at least `1 - delta`
/// of the total.
pub fn approximate_rank(m: &Matrix, delta: f64) -> Result<usize> {
    approximate_rank_of_values(&singular_values(m)?, delta)
}

/// Approximate rank from singular values already sorted in non-increasing
/// order.
pub fn approximate_rank_of_values(sorted: &[f64], delta: f64) -> Result<usize> {
    if !(0.0..1.0).contains(&delta) {
        return Err(Error::InvalidArgument(format!("delta must lie in [0, 1), got {delta}")));
    }
    let total: f64 = sorted.iter().sum();
    if !(total > 0.0) {
        return Err(Error::ZeroMatrix);
    }
    let threshold = (1.0 - delta) * total;
    // Singular values carry rounding of order eps * total; an exact tie on
    // the threshold must still qualify.
    let slack = 1e-12 * total;
    let mut acc = 0.0;
    for (k, s) in sorted.iter().enumerate() {
        acc += s;
        if acc >= threshold - slack {
            return Ok(k + 1);
        }
    }
    Ok(sorted.len())
}

/// Mean approximate rank over a sample of matrices.
pub fn average_approximate_rank(ms: &[Matrix], delta: f64) -> Result<f64> {
    if ms.is_empty() {
        return Err(Error::Empty("matrix sample"));
    }
    let mut sum = 0usize;
    for m in ms {
        sum += approximate_rank(m, delta)?;
    }
    Ok(sum as f64 / ms.len() as f64)
}

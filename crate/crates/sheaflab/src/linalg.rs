//! Dense row-major matrices and the small set of factorizations the rest of
//! the crate is built on: a symmetric eigensolver (Householder
//! tridiagonalization + implicit QL), LU with partial pivoting, Householder
//! reflection products, and power iteration for spectral norms.
//!
//! The eigensolver is kept in-repo on purpose; its contract is the residual
//! bound checked in [`SymEig::validate`], not a particular algorithm.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LinalgError {
    #[error("matrix is not square: {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("matrix is not symmetric: max |M - M^T| entry = {dev:e}")]
    Asymmetric { dev: f64 },
    #[error("eigensolver failed to converge within the iteration cap")]
    NoConvergence,
    #[error("matrix is singular or ill-conditioned (cond estimate {cond:e})")]
    IllConditioned { cond: f64 },
    #[error("zero vector where a nonzero vector is required")]
    ZeroVector,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
}

/// Dense row-major f64 matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn eye(n: usize) -> Self {
        let mut m = Mat::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = if r == 0 { 0 } else { rows[0].len() };
        assert!(rows.iter().all(|row| row.len() == c), "ragged rows");
        Mat { rows: r, cols: c, data: rows.concat() }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Mat::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                m[(i, j)] = f(i, j);
            }
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "data length mismatch");
        Mat { rows, cols, data }
    }

    pub fn diag(entries: &[f64]) -> Self {
        let mut m = Mat::zeros(entries.len(), entries.len());
        for (i, &v) in entries.iter().enumerate() {
            m[(i, i)] = v;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn col(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn transpose(&self) -> Mat {
        let mut t = Mat::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    pub fn matmul(&self, other: &Mat) -> Mat {
        assert_eq!(self.cols, other.rows, "matmul shape mismatch");
        let mut out = Mat::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == 0.0 {
                    continue;
                }
                let lhs = k * other.cols;
                let dst = i * other.cols;
                for j in 0..other.cols {
                    out.data[dst + j] += a * other.data[lhs + j];
                }
            }
        }
        out
    }

    pub fn add(&self, other: &Mat) -> Mat {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Mat { rows: self.rows, cols: self.cols, data }
    }

    pub fn sub(&self, other: &Mat) -> Mat {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Mat { rows: self.rows, cols: self.cols, data }
    }

    pub fn scale(&self, c: f64) -> Mat {
        let data = self.data.iter().map(|a| a * c).collect();
        Mat { rows: self.rows, cols: self.cols, data }
    }

    pub fn frob_norm(&self) -> f64 {
        self.data.iter().map(|a| a * a).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |acc, a| acc.max(a.abs()))
    }

    /// Frobenius inner product <A, B> = tr(A^T B).
    pub fn frob_dot(&self, other: &Mat) -> f64 {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn asymmetry(&self) -> f64 {
        let mut dev: f64 = 0.0;
        for i in 0..self.rows {
            for j in (i + 1)..self.cols {
                dev = dev.max((self[(i, j)] - self[(j, i)]).abs());
            }
        }
        dev
    }

    pub fn symmetrized(&self) -> Mat {
        assert!(self.is_square());
        Mat::from_fn(self.rows, self.cols, |i, j| 0.5 * (self[(i, j)] + self[(j, i)]))
    }

    /// Copies `block` into self with top-left corner at (r0, c0).
    pub fn set_block(&mut self, r0: usize, c0: usize, block: &Mat) {
        for i in 0..block.rows {
            for j in 0..block.cols {
                self[(r0 + i, c0 + j)] = block[(i, j)];
            }
        }
    }

    pub fn add_block(&mut self, r0: usize, c0: usize, block: &Mat) {
        for i in 0..block.rows {
            for j in 0..block.cols {
                self[(r0 + i, c0 + j)] += block[(i, j)];
            }
        }
    }

    pub fn block(&self, r0: usize, c0: usize, rows: usize, cols: usize) -> Mat {
        Mat::from_fn(rows, cols, |i, j| self[(r0 + i, c0 + j)])
    }
}

impl std::ops::Index<(usize, usize)> for Mat {
    type Output = f64;
    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Mat {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

/// Eigendecomposition of a symmetric matrix: values ascending, vectors
/// orthonormal columns.
#[derive(Debug, Clone)]
pub struct SymEig {
    pub values: Vec<f64>,
    pub vectors: Mat,
}

impl SymEig {
    /// Residual and orthonormality bounds; `a` is the matrix that was
    /// decomposed. Residual tolerance is 1e-8 * max(1, ||a||_2-estimate).
    pub fn validate(&self, a: &Mat) -> Result<(), LinalgError> {
        let n = self.values.len();
        let scale = self.values.iter().fold(1.0_f64, |m, v| m.max(v.abs()));
        for (k, &lam) in self.values.iter().enumerate() {
            let mut res = 0.0_f64;
            for i in 0..n {
                let mut av = 0.0;
                for j in 0..n {
                    av += a[(i, j)] * self.vectors[(j, k)];
                }
                res += (av - lam * self.vectors[(i, k)]).powi(2);
            }
            if res.sqrt() > 1e-8 * scale {
                return Err(LinalgError::NoConvergence);
            }
        }
        let vtv = self.vectors.transpose().matmul(&self.vectors);
        if vtv.sub(&Mat::eye(n)).frob_norm() > 1e-8 {
            return Err(LinalgError::NoConvergence);
        }
        Ok(())
    }
}

const TQL2_MAX_ITER: usize = 64;

/// Symmetric eigendecomposition, eigenvalues ascending. Input must be
/// symmetric within 1e-10 (relative to its largest entry); it is
/// symmetrized internally before factorization.
pub fn eigh(a: &Mat) -> Result<SymEig, LinalgError> {
    if !a.is_square() {
        return Err(LinalgError::NotSquare { rows: a.rows, cols: a.cols });
    }
    let dev = a.asymmetry();
    if dev > 1e-10 * a.max_abs().max(1.0) {
        return Err(LinalgError::Asymmetric { dev });
    }
    let n = a.rows;
    if n == 0 {
        return Ok(SymEig { values: vec![], vectors: Mat::zeros(0, 0) });
    }
    let mut v = a.symmetrized();
    let mut d = vec![0.0_f64; n];
    let mut e = vec![0.0_f64; n];
    tred2(n, &mut v, &mut d, &mut e);
    tql2(n, &mut v, &mut d, &mut e)?;
    Ok(SymEig { values: d, vectors: v })
}

// Householder reduction to tridiagonal form, accumulating the orthogonal
// transformation in `v`. Translated from the Algol tred2 procedure
// (Bowdler, Martin, Reinsch, Wilkinson) via the EISPACK/JAMA lineage.
fn tred2(n: usize, v: &mut Mat, d: &mut [f64], e: &mut [f64]) {
    for j in 0..n {
        d[j] = v[(n - 1, j)];
    }

    for i in (1..n).rev() {
        let mut scale = 0.0;
        let mut h = 0.0;
        for item in d.iter().take(i) {
            scale += item.abs();
        }
        if scale == 0.0 {
            e[i] = d[i - 1];
            for j in 0..i {
                d[j] = v[(i - 1, j)];
                v[(i, j)] = 0.0;
                v[(j, i)] = 0.0;
            }
        } else {
            for k in 0..i {
                d[k] /= scale;
                h += d[k] * d[k];
            }
            let f = d[i - 1];
            let mut g = h.sqrt();
            if f > 0.0 {
                g = -g;
            }
            e[i] = scale * g;
            h -= f * g;
            d[i - 1] = f - g;
            for j in 0..i {
                e[j] = 0.0;
            }

            for j in 0..i {
                let f = d[j];
                v[(j, i)] = f;
                let mut g = e[j] + v[(j, j)] * f;
                for k in (j + 1)..i {
                    g += v[(k, j)] * d[k];
                    e[k] += v[(k, j)] * f;
                }
                e[j] = g;
            }
            let mut f = 0.0;
            for j in 0..i {
                e[j] /= h;
                f += e[j] * d[j];
            }
            let hh = f / (h + h);
            for j in 0..i {
                e[j] -= hh * d[j];
            }
            for j in 0..i {
                let f = d[j];
                let g = e[j];
                for k in j..i {
                    v[(k, j)] -= f * e[k] + g * d[k];
                }
                d[j] = v[(i - 1, j)];
                v[(i, j)] = 0.0;
            }
        }
        d[i] = h;
    }

    for i in 0..n.saturating_sub(1) {
        v[(n - 1, i)] = v[(i, i)];
        v[(i, i)] = 1.0;
        let h = d[i + 1];
        if h != 0.0 {
            for k in 0..=i {
                d[k] = v[(k, i + 1)] / h;
            }
            for j in 0..=i {
                let mut g = 0.0;
                for k in 0..=i {
                    g += v[(k, i + 1)] * v[(k, j)];
                }
                for k in 0..=i {
                    v[(k, j)] -= g * d[k];
                }
            }
        }
        for k in 0..=i {
            v[(k, i + 1)] = 0.0;
        }
    }
    for j in 0..n {
        d[j] = v[(n - 1, j)];
        v[(n - 1, j)] = 0.0;
    }
    v[(n - 1, n - 1)] = 1.0;
    e[0] = 0.0;
}

// Implicit-shift QL iteration on the tridiagonal form, same lineage as
// tred2. Sorts eigenvalues ascending and permutes columns of `v` to match.
fn tql2(n: usize, v: &mut Mat, d: &mut [f64], e: &mut [f64]) -> Result<(), LinalgError> {
    for i in 1..n {
        e[i - 1] = e[i];
    }
    e[n - 1] = 0.0;

    let mut f = 0.0_f64;
    let mut tst1 = 0.0_f64;
    let eps = 2.0_f64.powi(-52);
    for l in 0..n {
        tst1 = tst1.max(d[l].abs() + e[l].abs());
        let mut m = l;
        while m < n {
            if e[m].abs() <= eps * tst1 {
                break;
            }
            m += 1;
        }

        if m > l {
            let mut iter = 0;
            loop {
                iter += 1;
                if iter > TQL2_MAX_ITER {
                    return Err(LinalgError::NoConvergence);
                }

                let g = d[l];
                let mut p = (d[l + 1] - g) / (2.0 * e[l]);
                let mut r = p.hypot(1.0);
                if p < 0.0 {
                    r = -r;
                }
                d[l] = e[l] / (p + r);
                d[l + 1] = e[l] * (p + r);
                let dl1 = d[l + 1];
                let mut h = g - d[l];
                for item in d.iter_mut().take(n).skip(l + 2) {
                    *item -= h;
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
                    let g = c * e[i];
                    h = c * p;
                    r = p.hypot(e[i]);
                    e[i + 1] = s * r;
                    s = e[i] / r;
                    c = p / r;
                    p = c * d[i] - s * g;
                    d[i + 1] = h + s * (c * g + s * d[i]);

                    for k in 0..n {
                        h = v[(k, i + 1)];
                        v[(k, i + 1)] = s * v[(k, i)] + c * h;
                        v[(k, i)] = c * v[(k, i)] - s * h;
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

    for i in 0..n.saturating_sub(1) {
        let mut k = i;
        let mut p = d[i];
        for j in (i + 1)..n {
            if d[j] < p {
                k = j;
                p = d[j];
            }
        }
        if k != i {
            d[k] = d[i];
            d[i] = p;
            for j in 0..n {
                let p = v[(j, i)];
                v[(j, i)] = v[(j, k)];
                v[(j, k)] = p;
            }
        }
    }
    Ok(())
}

/// Applies a scalar function to a symmetric matrix through its
/// eigendecomposition: f(A) = Q f(Lambda) Q^T.
pub fn sym_matfun(a: &Mat, f: impl Fn(f64) -> f64) -> Result<Mat, LinalgError> {
    let eig = eigh(a)?;
    let n = eig.values.len();
    let mut out = Mat::zeros(n, n);
    for (k, &lam) in eig.values.iter().enumerate() {
        let flam = f(lam);
        if flam == 0.0 {
            continue;
        }
        for i in 0..n {
            let qi = eig.vectors[(i, k)];
            if qi == 0.0 {
                continue;
            }
            for j in 0..n {
                out[(i, j)] += flam * qi * eig.vectors[(j, k)];
            }
        }
    }
    Ok(out)
}

/// LU factorization with partial pivoting of a square matrix.
pub struct Lu {
    lu: Mat,
    perm: Vec<usize>,
    sign: f64,
}

impl Lu {
    pub fn new(a: &Mat) -> Result<Lu, LinalgError> {
        if !a.is_square() {
            return Err(LinalgError::NotSquare { rows: a.rows, cols: a.cols });
        }
        let n = a.rows;
        let mut lu = a.clone();
        let mut perm: Vec<usize> = (0..n).collect();
        let mut sign = 1.0;
        for k in 0..n {
            let mut pivot = k;
            let mut max = lu[(k, k)].abs();
            for i in (k + 1)..n {
                if lu[(i, k)].abs() > max {
                    max = lu[(i, k)].abs();
                    pivot = i;
                }
            }
            if max == 0.0 {
                return Err(LinalgError::IllConditioned { cond: f64::INFINITY });
            }
            if pivot != k {
                for j in 0..n {
                    let t = lu[(k, j)];
                    lu[(k, j)] = lu[(pivot, j)];
                    lu[(pivot, j)] = t;
                }
                perm.swap(k, pivot);
                sign = -sign;
            }
            for i in (k + 1)..n {
                let factor = lu[(i, k)] / lu[(k, k)];
                lu[(i, k)] = factor;
                for j in (k + 1)..n {
                    let sub = factor * lu[(k, j)];
                    lu[(i, j)] -= sub;
                }
            }
        }
        Ok(Lu { lu, perm, sign })
    }

    pub fn solve_vec(&self, b: &[f64]) -> Vec<f64> {
        let n = self.lu.rows;
        assert_eq!(b.len(), n);
        let mut x: Vec<f64> = self.perm.iter().map(|&p| b[p]).collect();
        for i in 1..n {
            for j in 0..i {
                x[i] -= self.lu[(i, j)] * x[j];
            }
        }
        for i in (0..n).rev() {
            for j in (i + 1)..n {
                x[i] -= self.lu[(i, j)] * x[j];
            }
            x[i] /= self.lu[(i, i)];
        }
        x
    }

    pub fn det(&self) -> f64 {
        let mut det = self.sign;
        for i in 0..self.lu.rows {
            det *= self.lu[(i, i)];
        }
        det
    }
}

/// Matrix inverse via LU; errors if the 2-norm condition number estimate
/// exceeds `cond_cap`.
pub fn inverse(a: &Mat, cond_cap: f64) -> Result<Mat, LinalgError> {
    let n = a.rows;
    let cond = cond_2norm(a)?;
    if !cond.is_finite() || cond > cond_cap {
        return Err(LinalgError::IllConditioned { cond });
    }
    let lu = Lu::new(a)?;
    let mut inv = Mat::zeros(n, n);
    let mut unit = vec![0.0; n];
    for j in 0..n {
        unit[j] = 1.0;
        let col = lu.solve_vec(&unit);
        unit[j] = 0.0;
        for i in 0..n {
            inv[(i, j)] = col[i];
        }
    }
    Ok(inv)
}

/// Singular values (descending) via the eigendecomposition of A^T A.
pub fn singular_values(a: &Mat) -> Result<Vec<f64>, LinalgError> {
    let gram = a.transpose().matmul(a).symmetrized();
    let eig = eigh(&gram)?;
    let mut svs: Vec<f64> = eig.values.iter().map(|&l| l.max(0.0).sqrt()).collect();
    svs.reverse();
    Ok(svs)
}

/// 2-norm condition number sigma_max / sigma_min.
pub fn cond_2norm(a: &Mat) -> Result<f64, LinalgError> {
    let svs = singular_values(a)?;
    let smax = svs.first().copied().unwrap_or(0.0);
    let smin = svs.last().copied().unwrap_or(0.0);
    if smin == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(smax / smin)
}

/// Largest singular value via power iteration on A^T A; deterministic
/// start vector, Rayleigh tolerance 1e-10. Falls back to the exact Gram
/// eigensolve if the iteration stalls before converging.
pub fn spectral_norm(a: &Mat) -> f64 {
    if a.rows == 0 || a.cols == 0 {
        return 0.0;
    }
    let at = a.transpose();
    let n = a.cols;
    let mut v: Vec<f64> = (0..n).map(|i| 1.0 + 0.37 * (i as f64 + 1.0).sin()).collect();
    normalize(&mut v);
    let mut prev = 0.0_f64;
    for _ in 0..10_000 {
        let av = matvec(a, &v);
        let mut w = matvec(&at, &av);
        let ray = dot(&v, &w);
        let nw = normalize(&mut w);
        if nw == 0.0 {
            return 0.0;
        }
        v = w;
        if (ray - prev).abs() <= 1e-10 * ray.abs().max(1.0) {
            return ray.max(0.0).sqrt();
        }
        prev = ray;
    }
    singular_values(a).map(|s| s[0]).unwrap_or_else(|_| prev.max(0.0).sqrt())
}

fn matvec(a: &Mat, x: &[f64]) -> Vec<f64> {
    assert_eq!(a.cols, x.len());
    let mut y = vec![0.0; a.rows];
    for i in 0..a.rows {
        let row = a.row(i);
        let mut acc = 0.0;
        for (aij, xj) in row.iter().zip(x) {
            acc += aij * xj;
        }
        y[i] = acc;
    }
    y
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normalize(v: &mut [f64]) -> f64 {
    let n = dot(v, v).sqrt();
    if n > 0.0 {
        for x in v.iter_mut() {
            *x /= n;
        }
    }
    n
}

/// Product of Householder reflections H(v) = I - 2 v v^T / ||v||^2, applied
/// in listed order (the first vector acts first). The result is orthogonal
/// with determinant (-1)^k.
pub fn householder_product(vs: &[Vec<f64>], d: usize) -> Result<Mat, LinalgError> {
    assert!(!vs.is_empty() && vs.len() <= d, "need 1..=d reflection vectors");
    let mut m = Mat::eye(d);
    for v in vs {
        assert_eq!(v.len(), d, "reflection vector dimension mismatch");
        let s = dot(v, v);
        if s == 0.0 {
            return Err(LinalgError::ZeroVector);
        }
        // m <- H(v) m = m - (2/s) v (v^T m)
        let mut vtm = vec![0.0; d];
        for i in 0..d {
            let vi = v[i];
            if vi == 0.0 {
                continue;
            }
            for j in 0..d {
                vtm[j] += vi * m[(i, j)];
            }
        }
        let c = 2.0 / s;
        for i in 0..d {
            let cv = c * v[i];
            for j in 0..d {
                m[(i, j)] -= cv * vtm[j];
            }
        }
    }
    Ok(m)
}

/// Gram-Schmidt orthonormalization of the columns; columns below the rank
/// tolerance are dropped.
pub fn orthonormalize_cols(a: &Mat, tol: f64) -> Mat {
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for j in 0..a.cols() {
        let mut v = a.col(j);
        for _ in 0..2 {
            for b in &basis {
                let c = dot(&v, b);
                for (vi, bi) in v.iter_mut().zip(b) {
                    *vi -= c * bi;
                }
            }
        }
        let n = dot(&v, &v).sqrt();
        if n > tol {
            for x in v.iter_mut() {
                *x /= n;
            }
            basis.push(v);
        }
    }
    let mut out = Mat::zeros(a.rows(), basis.len());
    for (j, b) in basis.iter().enumerate() {
        for (i, &x) in b.iter().enumerate() {
            out[(i, j)] = x;
        }
    }
    out
}

/// Principal angles (radians, ascending) between the column spans of two
/// orthonormal-column matrices.
pub fn principal_angles(a: &Mat, b: &Mat) -> Result<Vec<f64>, LinalgError> {
    assert_eq!(a.rows(), b.rows());
    let m = a.transpose().matmul(b);
    let svs = singular_values(&m)?;
    let mut angles: Vec<f64> = svs.iter().map(|&s| s.clamp(-1.0, 1.0).acos()).collect();
    angles.sort_by(|x, y| x.partial_cmp(y).unwrap());
    Ok(angles)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_symmetric(n: usize, rng: &mut ChaCha8Rng) -> Mat {
        let mut a = Mat::zeros(n, n);
        for i in 0..n {
            for j in i..n {
                let v = rng.gen_range(-1.0..1.0);
                a[(i, j)] = v;
                a[(j, i)] = v;
            }
        }
        a
    }

    #[test]
    fn eigh_diagonal_sorts_ascending() {
        let a = Mat::diag(&[3.0, 1.0, 2.0]);
        let eig = eigh(&a).unwrap();
        assert_eq!(eig.values, vec![1.0, 2.0, 3.0]);
        eig.validate(&a).unwrap();
    }

    #[test]
    fn eigh_two_by_two_laplacian() {
        let a = Mat::from_rows(&[vec![1.0, -1.0], vec![-1.0, 1.0]]);
        let eig = eigh(&a).unwrap();
        assert!(eig.values[0].abs() < 1e-12);
        assert!((eig.values[1] - 2.0).abs() < 1e-12);
        eig.validate(&a).unwrap();
    }

    #[test]
    fn eigh_random_50x50_residuals() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random_symmetric(50, &mut rng);
        let eig = eigh(&a).unwrap();
        eig.validate(&a).unwrap();
    }

    #[test]
    fn eigh_repeated_eigenvalues() {
        // I (x) diag(1,1,2): eigenvalue 1 with multiplicity 4.
        let a = Mat::diag(&[1.0, 1.0, 2.0, 1.0, 1.0, 2.0]);
        let eig = eigh(&a).unwrap();
        eig.validate(&a).unwrap();
        assert!((eig.values[0] - 1.0).abs() < 1e-12);
        assert!((eig.values[5] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn eigh_rejects_asymmetric() {
        let a = Mat::from_rows(&[vec![1.0, 0.5], vec![0.0, 1.0]]);
        assert!(matches!(eigh(&a), Err(LinalgError::Asymmetric { .. })));
    }

    #[test]
    fn lu_solves_and_inverts() {
        let a = Mat::from_rows(&[vec![4.0, 3.0], vec![6.0, 3.0]]);
        let lu = Lu::new(&a).unwrap();
        let x = lu.solve_vec(&[10.0, 12.0]);
        assert!((a[(0, 0)] * x[0] + a[(0, 1)] * x[1] - 10.0).abs() < 1e-12);
        assert!((a[(1, 0)] * x[0] + a[(1, 1)] * x[1] - 12.0).abs() < 1e-12);
        let inv = inverse(&a, 1e12).unwrap();
        let prod = a.matmul(&inv);
        assert!(prod.sub(&Mat::eye(2)).frob_norm() < 1e-12);
    }

    #[test]
    fn inverse_rejects_singular() {
        let a = Mat::from_rows(&[vec![1.0, 2.0], vec![2.0, 4.0]]);
        assert!(inverse(&a, 1e12).is_err());
    }

    #[test]
    fn householder_axis_reflection() {
        let m = householder_product(&[vec![1.0, 0.0]], 2).unwrap();
        let expected = Mat::from_rows(&[vec![-1.0, 0.0], vec![0.0, 1.0]]);
        assert!(m.sub(&expected).frob_norm() < 1e-15);
    }

    #[test]
    fn householder_involution_gives_identity() {
        let v = vec![0.3, -1.2, 0.7];
        let m = householder_product(&[v.clone(), v], 3).unwrap();
        assert!(m.sub(&Mat::eye(3)).frob_norm() < 1e-14);
    }

    #[test]
    fn householder_orthogonal_and_determinant() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for k in 1..=3usize {
            let vs: Vec<Vec<f64>> =
                (0..k).map(|_| (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
            let m = householder_product(&vs, 3).unwrap();
            let mtm = m.transpose().matmul(&m);
            assert!(mtm.sub(&Mat::eye(3)).frob_norm() < 1e-12);
            let det = Lu::new(&m).unwrap().det();
            let expected = if k % 2 == 0 { 1.0 } else { -1.0 };
            assert!((det - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn householder_rejects_zero_vector() {
        assert!(matches!(
            householder_product(&[vec![0.0, 0.0]], 2),
            Err(LinalgError::ZeroVector)
        ));
    }

    #[test]
    fn spectral_norm_matches_singular_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            let a = Mat::from_fn(4, 3, |_, _| rng.gen_range(-2.0..2.0));
            let p = spectral_norm(&a);
            let s = singular_values(&a).unwrap()[0];
            assert!((p - s).abs() <= 1e-8 * s.max(1.0), "power {p} vs svd {s}");
        }
    }

    #[test]
    fn sym_matfun_exponential() {
        let a = Mat::from_rows(&[vec![1.0, -1.0], vec![-1.0, 1.0]]);
        let e = sym_matfun(&a, |l| (-l).exp()).unwrap();
        // exp(-A) for A = [[1,-1],[-1,1]]: eigenpairs (0, (1,1)/sqrt2), (2, (1,-1)/sqrt2).
        let c = (0.5) * (1.0 + (-2.0_f64).exp());
        let s = (0.5) * (1.0 - (-2.0_f64).exp());
        let expected = Mat::from_rows(&[vec![c, s], vec![s, c]]);
        assert!(e.sub(&expected).frob_norm() < 1e-12);
    }

    #[test]
    fn principal_angles_identical_and_orthogonal() {
        let a = Mat::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 0.0]]);
        let b = Mat::from_rows(&[vec![0.0], vec![0.0], vec![1.0]]);
        let same = principal_angles(&a, &a).unwrap();
        assert!(same.iter().all(|&t| t < 1e-8));
        let perp = principal_angles(&a, &b).unwrap();
        assert!((perp[0] - std::f64::consts::FRAC_PI_2).abs() < 1e-12);
    }
}

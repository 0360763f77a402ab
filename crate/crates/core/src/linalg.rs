//! Small dense real linear algebra.
//!
//! Everything here targets the tiny systems that show up in a single time
//! step (d ≤ 10): a Jacobi SVD, the Moore–Penrose pseudo-inverse, the
//! projector triple `P = A⁻A`, `Q = I − P`, `R = I − AA⁻`, and an LU solve
//! with partial pivoting. Matrix norms are Frobenius throughout.

use std::fmt;
use std::ops::{Index, IndexMut};

use thiserror::Error;

/// Default relative cutoff used to decide the numerical rank.
pub const DEFAULT_RANK_TOL: f64 = 1e-10;

/// Relative pivot threshold below which an LU factorization is declared singular.
pub const PIVOT_TOL: f64 = 1e-13;

const MAX_SWEEPS: usize = 80;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("expected a square matrix, got {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("matrix contains non-finite entries")]
    NonFinite,
    #[error("Jacobi SVD did not converge after {sweeps} sweeps (off-diagonal residual {residual:e})")]
    NoConvergence { sweeps: usize, residual: f64 },
    #[error("matrix is singular to working precision (pivot {pivot:e} in column {column})")]
    Singular { pivot: f64, column: usize },
}

/// Dense row-major real matrix.
#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows >= 1 && cols >= 1, "matrix dimensions must be positive");
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        let mut m = Self::zeros(diag.len(), diag.len());
        for (i, &v) in diag.iter().enumerate() {
            m[(i, i)] = v;
        }
        m
    }

    /// Builds a matrix from row slices. Panics on ragged input.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Self {
        let n_rows = rows.len();
        let n_cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut m = Self::zeros(n_rows, n_cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            assert_eq!(r.len(), n_cols, "ragged rows");
            m.data[i * n_cols..(i + 1) * n_cols].copy_from_slice(r);
        }
        m
    }

    pub fn from_row_major(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert!(rows >= 1 && cols >= 1, "matrix dimensions must be positive");
        assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.rows, "matmul dimension mismatch");
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == 0.0 {
                    continue;
                }
                for j in 0..other.cols {
                    out.data[i * other.cols + j] += a * other.data[k * other.cols + j];
                }
            }
        }
        out
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(self.cols, x.len(), "mul_vec dimension mismatch");
        (0..self.rows).map(|i| dot(self.row(i), x)).collect()
    }

    /// `self · x` accumulated into `out` (`out += self · x`).
    pub fn mul_vec_add(&self, x: &[f64], out: &mut [f64]) {
        assert_eq!(self.cols, x.len());
        assert_eq!(self.rows, out.len());
        for (i, o) in out.iter_mut().enumerate() {
            *o += dot(self.row(i), x);
        }
    }

    pub fn add(&self, other: &Matrix) -> Matrix {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Matrix {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn scale(&self, s: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    fn zip_with(&self, other: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
        assert_eq!(
            (self.rows, self.cols),
            (other.rows, other.cols),
            "elementwise dimension mismatch"
        );
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    /// Frobenius (trace) norm `sqrt(trace(BᵀB))`.
    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;

    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for i in 0..self.rows {
            writeln!(f, "  {:?}", self.row(i))?;
        }
        write!(f, "]")
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(x: &[f64]) -> f64 {
    dot(x, x).sqrt()
}

/// Max-norm; any NaN entry makes the result NaN.
pub fn norm_inf(x: &[f64]) -> f64 {
    x.iter().fold(0.0, |m: f64, v| if v.is_nan() || m.is_nan() { f64::NAN } else { m.max(v.abs()) })
}

pub fn sub_vec(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

/// Singular value decomposition `a = left · diag(singular_values) · right`.
#[derive(Debug, Clone)]
pub struct SvdFactors {
    pub left: Matrix,
    pub singular_values: Vec<f64>,
    pub right: Matrix,
    pub rank: usize,
}

impl SvdFactors {
    pub fn reconstruct(&self) -> Matrix {
        let n = self.singular_values.len();
        let mut scaled = self.left.clone();
        for i in 0..n {
            for j in 0..n {
                scaled[(i, j)] *= self.singular_values[j];
            }
        }
        scaled.matmul(&self.right)
    }
}

/// One-sided (Hestenes) Jacobi SVD of a square matrix.
///
/// The rank is the number of singular values strictly above
/// `rank_tol · σ_max`; a zero matrix has rank 0.
pub fn svd(a: &Matrix, rank_tol: f64) -> Result<SvdFactors, LinalgError> {
    if !a.is_square() {
        return Err(LinalgError::NotSquare {
            rows: a.rows(),
            cols: a.cols(),
        });
    }
    if !a.is_finite() {
        return Err(LinalgError::NonFinite);
    }
    let n = a.rows();
    // Column-major working copies: w[j] is column j of A·V.
    let mut w: Vec<Vec<f64>> = (0..n).map(|j| a.column(j)).collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|j| (0..n).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();

    let eps = f64::EPSILON;
    let mut converged = false;
    let mut last_off = 0.0f64;
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        last_off = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                let alpha = dot(&w[p], &w[p]);
                let beta = dot(&w[q], &w[q]);
                let gamma = dot(&w[p], &w[q]);
                if gamma == 0.0 {
                    continue;
                }
                let scale = (alpha * beta).sqrt();
                let off = gamma.abs() / scale.max(f64::MIN_POSITIVE);
                last_off = last_off.max(off);
                if gamma.abs() <= eps * scale {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut w, p, q, c, s);
                rotate(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(LinalgError::NoConvergence {
            sweeps: MAX_SWEEPS,
            residual: last_off,
        });
    }

    let sigma: Vec<f64> = w.iter().map(|c| norm2(c)).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| sigma[j].total_cmp(&sigma[i]));
    let singular_values: Vec<f64> = order.iter().map(|&j| sigma[j]).collect();
    let sigma_max = singular_values[0];
    let rank = if sigma_max > 0.0 {
        singular_values
            .iter()
            .filter(|&&s| s > rank_tol * sigma_max)
            .count()
    } else {
        0
    };

    // Left vectors: normalized columns of A·V where the singular value is
    // resolvable, completed to an orthonormal basis elsewhere.
    let floor = sigma_max * 1e-13;
    let mut u_cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    for (k, &j) in order.iter().enumerate() {
        let s = singular_values[k];
        if s > floor && s > 0.0 {
            u_cols.push(w[j].iter().map(|x| x / s).collect());
        } else {
            u_cols.push(complete_basis(&u_cols, n));
        }
    }
    reorthonormalize(&mut u_cols);

    let mut left = Matrix::zeros(n, n);
    let mut right = Matrix::zeros(n, n);
    for (k, &j) in order.iter().enumerate() {
        for i in 0..n {
            left[(i, k)] = u_cols[k][i];
            // right = Vᵀ, so row k of `right` is column j of V.
            right[(k, i)] = v[j][i];
        }
    }
    Ok(SvdFactors {
        left,
        singular_values,
        right,
        rank,
    })
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (head, tail) = cols.split_at_mut(q);
    let cp = &mut head[p];
    let cq = &mut tail[0];
    for (a, b) in cp.iter_mut().zip(cq.iter_mut()) {
        let x = *a;
        let y = *b;
        *a = c * x - s * y;
        *b = s * x + c * y;
    }
}

/// Returns a unit vector orthogonal to every vector in `basis`.
fn complete_basis(basis: &[Vec<f64>], n: usize) -> Vec<f64> {
    let mut best: Option<Vec<f64>> = None;
    let mut best_norm = 0.0;
    for e in 0..n {
        let mut cand = vec![0.0; n];
        cand[e] = 1.0;
        for b in basis {
            let proj = dot(&cand, b);
            for (c, bi) in cand.iter_mut().zip(b) {
                *c -= proj * bi;
            }
        }
        let nrm = norm2(&cand);
        if nrm > best_norm {
            best_norm = nrm;
            best = Some(cand);
        }
    }
    let mut cand = best.expect("n >= 1");
    for c in cand.iter_mut() {
        *c /= best_norm;
    }
    cand
}

fn reorthonormalize(cols: &mut [Vec<f64>]) {
    for k in 0..cols.len() {
        for j in 0..k {
            let proj = dot(&cols[k], &cols[j]);
            let (head, tail) = cols.split_at_mut(k);
            for (c, b) in tail[0].iter_mut().zip(&head[j]) {
                *c -= proj * b;
            }
        }
        let nrm = norm2(&cols[k]);
        for c in cols[k].iter_mut() {
            *c /= nrm;
        }
    }
}

/// Moore–Penrose pseudo-inverse `Nᵀ · diag(1/σ₁, …, 1/σ_r, 0, …) · Mᵀ`.
pub fn pinv(f: &SvdFactors) -> Matrix {
    let n = f.singular_values.len();
    let mut out = Matrix::zeros(n, n);
    for k in 0..f.rank {
        let inv = 1.0 / f.singular_values[k];
        for i in 0..n {
            let vik = f.right[(k, i)] * inv;
            if vik == 0.0 {
                continue;
            }
            for j in 0..n {
                out[(i, j)] += vik * f.left[(j, k)];
            }
        }
    }
    out
}

/// `A`, its pseudo-inverse and the projectors `P`, `Q`, `R` at one time.
#[derive(Debug, Clone)]
pub struct ProjectorBundle {
    pub a: Matrix,
    pub a_pinv: Matrix,
    /// `P = A⁻A`, projector along `Ker(A)`.
    pub p: Matrix,
    /// `Q = I − P`, projector onto `Ker(A)`.
    pub q: Matrix,
    /// `R = I − AA⁻`, projector along `Im(A)`.
    pub r_proj: Matrix,
    pub rank: usize,
    /// Orthonormal basis of `Ker(A)`, `d × (d − rank)`.
    pub kernel_basis: Vec<Vec<f64>>,
    /// Orthonormal basis of `Im(R) = Im(A)^⊥`, `d × (d − rank)`.
    pub coimage_basis: Vec<Vec<f64>>,
}

impl ProjectorBundle {
    pub fn dim(&self) -> usize {
        self.a.rows()
    }

    /// `A·A⁻`, the orthogonal projector onto `Im(A)`.
    pub fn range_projector(&self) -> Matrix {
        Matrix::identity(self.dim()).sub(&self.r_proj)
    }
}

/// Worst violation of the Moore–Penrose and projector identities for one
/// bundle, each relative to the size of the matrices involved.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IdentityDefects {
    /// `A A⁻ A = A`, `A⁻ A A⁻ = A⁻`, `(A A⁻)ᵀ = A A⁻`, `(A⁻ A)ᵀ = A⁻ A`.
    pub penrose: [f64; 4],
    /// `P² = P`, `Q² = Q`, `R² = R`.
    pub idempotence: [f64; 3],
    /// `PQ = 0`, `AQ = 0`, `RA = 0`, `A⁻R = 0`, `P + Q = I`, `P = A⁻A`.
    pub splitting: [f64; 6],
}

impl IdentityDefects {
    pub fn max(&self) -> f64 {
        self.penrose
            .iter()
            .chain(&self.idempotence)
            .chain(&self.splitting)
            .fold(0.0, |m, v| if v.is_nan() { f64::NAN } else { m.max(*v) })
    }
}

pub fn identity_defects(b: &ProjectorBundle) -> IdentityDefects {
    let n = b.dim();
    let a = &b.a;
    let ap = &b.a_pinv;
    let na = a.max_abs().max(1.0);
    let np = ap.max_abs().max(1.0);
    let aap = a.matmul(ap);
    let apa = ap.matmul(a);
    let err = |x: &Matrix, y: &Matrix| x.sub(y).max_abs();
    let zero = |x: &Matrix| x.max_abs();
    IdentityDefects {
        penrose: [
            err(&aap.matmul(a), a) / (na * na * np),
            err(&apa.matmul(ap), ap) / (np * np * na),
            err(&aap.transpose(), &aap) / (na * np),
            err(&apa.transpose(), &apa) / (na * np),
        ],
        idempotence: [
            err(&b.p.matmul(&b.p), &b.p),
            err(&b.q.matmul(&b.q), &b.q),
            err(&b.r_proj.matmul(&b.r_proj), &b.r_proj),
        ],
        splitting: [
            zero(&b.p.matmul(&b.q)),
            zero(&a.matmul(&b.q)) / na,
            zero(&b.r_proj.matmul(a)) / na,
            zero(&ap.matmul(&b.r_proj)) / np,
            err(&b.p.add(&b.q), &Matrix::identity(n)),
            err(&b.p, &apa) / (na * np),
        ],
    }
}

pub fn projectors(a: &Matrix, rank_tol: f64) -> Result<ProjectorBundle, LinalgError> {
    let f = svd(a, rank_tol)?;
    let n = a.rows();
    let a_pinv = pinv(&f);
    let r = f.rank;
    let mut p = Matrix::zeros(n, n);
    let mut range = Matrix::zeros(n, n);
    for k in 0..r {
        for i in 0..n {
            for j in 0..n {
                p[(i, j)] += f.right[(k, i)] * f.right[(k, j)];
                range[(i, j)] += f.left[(i, k)] * f.left[(j, k)];
            }
        }
    }
    let eye = Matrix::identity(n);
    let q = eye.sub(&p);
    let r_proj = eye.sub(&range);
    let kernel_basis = (r..n).map(|k| f.right.row(k).to_vec()).collect();
    let coimage_basis = (r..n).map(|k| f.left.column(k)).collect();
    Ok(ProjectorBundle {
        a: a.clone(),
        a_pinv,
        p,
        q,
        r_proj,
        rank: r,
        kernel_basis,
        coimage_basis,
    })
}

/// LU factorization with partial pivoting, stored compactly.
#[derive(Debug, Clone)]
pub struct Lu {
    lu: Matrix,
    perm: Vec<usize>,
}

impl Lu {
    pub fn factor(a: &Matrix) -> Result<Lu, LinalgError> {
        if !a.is_square() {
            return Err(LinalgError::NotSquare {
                rows: a.rows(),
                cols: a.cols(),
            });
        }
        if !a.is_finite() {
            return Err(LinalgError::NonFinite);
        }
        let n = a.rows();
        let threshold = PIVOT_TOL * a.max_abs();
        let mut lu = a.clone();
        let mut perm: Vec<usize> = (0..n).collect();
        for k in 0..n {
            let (piv_row, piv_val) = (k..n)
                .map(|i| (i, lu[(i, k)].abs()))
                .fold((k, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
            if piv_val <= threshold || piv_val == 0.0 {
                return Err(LinalgError::Singular {
                    pivot: piv_val,
                    column: k,
                });
            }
            if piv_row != k {
                perm.swap(piv_row, k);
                for j in 0..n {
                    let tmp = lu[(k, j)];
                    lu[(k, j)] = lu[(piv_row, j)];
                    lu[(piv_row, j)] = tmp;
                }
            }
            let pivot = lu[(k, k)];
            for i in (k + 1)..n {
                let factor = lu[(i, k)] / pivot;
                lu[(i, k)] = factor;
                if factor != 0.0 {
                    for j in (k + 1)..n {
                        lu[(i, j)] -= factor * lu[(k, j)];
                    }
                }
            }
        }
        Ok(Lu { lu, perm })
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.lu.rows();
        assert_eq!(b.len(), n);
        let mut x: Vec<f64> = self.perm.iter().map(|&p| b[p]).collect();
        for i in 0..n {
            let mut s = x[i];
            for j in 0..i {
                s -= self.lu[(i, j)] * x[j];
            }
            x[i] = s;
        }
        for i in (0..n).rev() {
            let mut s = x[i];
            for j in (i + 1)..n {
                s -= self.lu[(i, j)] * x[j];
            }
            x[i] = s / self.lu[(i, i)];
        }
        x
    }
}

/// Solves `a · x = b` by LU with partial pivoting.
pub fn solve_linear(a: &Matrix, b: &[f64]) -> Result<Vec<f64>, LinalgError> {
    if b.len() != a.rows() {
        return Err(LinalgError::DimensionMismatch(format!(
            "matrix has {} rows, right-hand side has {} entries",
            a.rows(),
            b.len()
        )));
    }
    Ok(Lu::factor(a)?.solve(b))
}

//! Small dense linear-algebra helpers shared by the rest of the crate.
//!
//! Everything here works on `nalgebra` dynamic matrices. Symmetric
//! eigen-decompositions use a cyclic Jacobi sweep, which is plenty for the
//! matrix sizes that show up in detectability LMIs (a few dozen rows).

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Matrix = DMatrix<f64>;
pub type Vector = DVector<f64>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumError {
    #[error("matrix is not positive definite (min eigenvalue {min_eig:e})")]
    NotPositiveDefinite { min_eig: f64 },
    #[error("matrix is not positive semidefinite (min eigenvalue {min_eig:e})")]
    NotPsd { min_eig: f64 },
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("non-finite entry")]
    NonFinite,
}

/// A symmetric matrix. Inputs are symmetrized on construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "Matrix", try_from = "Matrix")]
pub struct SymMatrix(Matrix);

impl SymMatrix {
    /// Builds `(a + aᵀ)/2`. Panics if `a` is not square.
    pub fn new(a: Matrix) -> Self {
        assert!(a.is_square(), "SymMatrix requires a square matrix");
        let t = a.transpose();
        SymMatrix((a + t) * 0.5)
    }

    pub fn zeros(dim: usize) -> Self {
        SymMatrix(Matrix::zeros(dim, dim))
    }

    pub fn identity(dim: usize) -> Self {
        SymMatrix(Matrix::identity(dim, dim))
    }

    pub fn from_diagonal(diag: &[f64]) -> Self {
        SymMatrix(Matrix::from_diagonal(&Vector::from_column_slice(diag)))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn as_matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn into_matrix(self) -> Matrix {
        self.0
    }

    pub fn eigen(&self) -> SymEigen {
        jacobi_eigen(&self.0)
    }

    pub fn min_eigenvalue(&self) -> f64 {
        if self.dim() == 0 {
            return f64::INFINITY;
        }
        self.eigen().values[0]
    }

    pub fn max_eigenvalue(&self) -> f64 {
        if self.dim() == 0 {
            return f64::NEG_INFINITY;
        }
        *self.eigen().values.last().unwrap()
    }

    /// `xᵀ A x`
    pub fn quad_form(&self, x: &Vector) -> f64 {
        x.dot(&(&self.0 * x))
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

impl From<SymMatrix> for Matrix {
    fn from(s: SymMatrix) -> Matrix {
        s.0
    }
}

impl TryFrom<Matrix> for SymMatrix {
    type Error = NumError;
    fn try_from(m: Matrix) -> Result<Self, NumError> {
        if !m.is_square() {
            return Err(NumError::DimMismatch(format!(
                "symmetric matrix must be square, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        if m.iter().any(|v| !v.is_finite()) {
            return Err(NumError::NonFinite);
        }
        let scale = m.amax().max(1.0);
        for i in 0..m.nrows() {
            for j in 0..i {
                if (m[(i, j)] - m[(j, i)]).abs() > 1e-12 * scale {
                    return Err(NumError::DimMismatch(format!(
                        "matrix not symmetric at ({i},{j})"
                    )));
                }
            }
        }
        // Keep the stored bits exactly; the check above bounds the asymmetry.
        Ok(SymMatrix(m))
    }
}

/// Eigen-decomposition of a symmetric matrix, eigenvalues ascending.
#[derive(Debug, Clone)]
pub struct SymEigen {
    pub values: Vec<f64>,
    /// Column `i` is the unit eigenvector for `values[i]`.
    pub vectors: Matrix,
}

/// Cyclic Jacobi eigen-decomposition. The input is read as symmetric
/// (only the average of the two triangles matters).
pub fn jacobi_eigen(a: &Matrix) -> SymEigen {
    let n = a.nrows();
    assert_eq!(n, a.ncols());
    let mut m = (a + a.transpose()) * 0.5;
    let mut v = Matrix::identity(n, n);
    let total: f64 = m.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 1 && total > 0.0 {
        for _sweep in 0..100 {
            let mut off = 0.0;
            for i in 0..n {
                for j in (i + 1)..n {
                    off += m[(i, j)] * m[(i, j)];
                }
            }
            if off.sqrt() <= 1e-17 * total {
                break;
            }
            for p in 0..n {
                for q in (p + 1)..n {
                    let apq = m[(p, q)];
                    if apq == 0.0 {
                        continue;
                    }
                    let app = m[(p, p)];
                    let aqq = m[(q, q)];
                    let theta = (aqq - app) / (2.0 * apq);
                    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                    let t = if theta == 0.0 { 1.0 } else { t };
                    let c = 1.0 / (t * t + 1.0).sqrt();
                    let s = t * c;
                    for k in 0..n {
                        let mkp = m[(k, p)];
                        let mkq = m[(k, q)];
                        m[(k, p)] = c * mkp - s * mkq;
                        m[(k, q)] = s * mkp + c * mkq;
                    }
                    for k in 0..n {
                        let mpk = m[(p, k)];
                        let mqk = m[(q, k)];
                        m[(p, k)] = c * mpk - s * mqk;
                        m[(q, k)] = s * mpk + c * mqk;
                    }
                    m[(p, q)] = 0.0;
                    m[(q, p)] = 0.0;
                    for k in 0..n {
                        let vkp = v[(k, p)];
                        let vkq = v[(k, q)];
                        v[(k, p)] = c * vkp - s * vkq;
                        v[(k, q)] = s * vkp + c * vkq;
                    }
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[(i, i)].total_cmp(&m[(j, j)]));
    let values = order.iter().map(|&i| m[(i, i)]).collect();
    let mut vectors = Matrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        vectors.set_column(dst, &v.column(src));
    }
    SymEigen { values, vectors }
}

/// Smallest eigenvalue of the symmetric part of `a`.
pub fn min_eig(a: &Matrix) -> f64 {
    if a.nrows() == 0 {
        return f64::INFINITY;
    }
    jacobi_eigen(a).values[0]
}

/// Largest eigenvalue of the symmetric part of `a`.
pub fn max_eig(a: &Matrix) -> f64 {
    if a.nrows() == 0 {
        return f64::NEG_INFINITY;
    }
    *jacobi_eigen(a).values.last().unwrap()
}

pub fn kron(a: &Matrix, b: &Matrix) -> Matrix {
    a.kronecker(b)
}

/// Block-diagonal concatenation.
pub fn block_diag(blocks: &[&Matrix]) -> Matrix {
    let rows: usize = blocks.iter().map(|b| b.nrows()).sum();
    let cols: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = Matrix::zeros(rows, cols);
    let (mut r, mut c) = (0, 0);
    for b in blocks {
        out.view_mut((r, c), (b.nrows(), b.ncols())).copy_from(*b);
        r += b.nrows();
        c += b.ncols();
    }
    out
}

/// Vertical concatenation; all blocks must share the column count `cols`.
pub fn vstack(blocks: &[&Matrix], cols: usize) -> Matrix {
    let rows: usize = blocks.iter().map(|b| b.nrows()).sum();
    let mut out = Matrix::zeros(rows, cols);
    let mut r = 0;
    for b in blocks {
        assert_eq!(b.ncols(), cols, "vstack column mismatch");
        out.view_mut((r, 0), (b.nrows(), cols)).copy_from(*b);
        r += b.nrows();
    }
    out
}

/// `B^{-1/2}` for symmetric positive definite `b`.
pub fn inv_sqrt_spd(b: &Matrix) -> Result<Matrix, NumError> {
    let e = jacobi_eigen(b);
    let n = b.nrows();
    let lo = e.values.first().copied().unwrap_or(1.0);
    if lo <= 1e-10 {
        return Err(NumError::NotPositiveDefinite { min_eig: lo });
    }
    let d = Matrix::from_diagonal(&Vector::from_iterator(
        n,
        e.values.iter().map(|v| 1.0 / v.sqrt()),
    ));
    Ok(&e.vectors * d * e.vectors.transpose())
}

/// Largest λ with `det(a − λ b) = 0`, computed through the similarity
/// `b^{-1/2} a b^{-1/2}`.
pub fn generalized_max_eig(a: &SymMatrix, b: &SymMatrix) -> Result<f64, NumError> {
    if a.dim() != b.dim() {
        return Err(NumError::DimMismatch(format!(
            "generalized eigenproblem {} vs {}",
            a.dim(),
            b.dim()
        )));
    }
    let s = inv_sqrt_spd(b.as_matrix())?;
    let c = &s * a.as_matrix() * &s;
    Ok(max_eig(&c))
}

/// Off-diagonals ≤ tol, row sums ≥ −tol and column sums ≥ −tol.
pub fn is_doubly_hyperdominant(w: &Matrix, tol: f64) -> bool {
    if !w.is_square() {
        return false;
    }
    let n = w.nrows();
    for i in 0..n {
        for j in 0..n {
            if i != j && w[(i, j)] > tol {
                return false;
            }
        }
    }
    (0..n).all(|i| w.row(i).sum() >= -tol) && (0..n).all(|j| w.column(j).sum() >= -tol)
}

/// Returns `L` with `LᵀL = a` (eigenvalues below `tol` truncated to zero).
pub fn psd_factor(a: &SymMatrix, tol: f64) -> Result<Matrix, NumError> {
    let n = a.dim();
    if n == 0 {
        return Ok(Matrix::zeros(0, 0));
    }
    let e = a.eigen();
    if e.values[0] < -tol {
        return Err(NumError::NotPsd { min_eig: e.values[0] });
    }
    let d = Matrix::from_diagonal(&Vector::from_iterator(
        n,
        e.values
            .iter()
            .map(|&v| if v < tol { 0.0 } else { v.sqrt() }),
    ));
    Ok(d * e.vectors.transpose())
}

/// Solves the symmetric positive definite system `a x = b`, falling back to
/// an eigen-based pseudo-inverse when Cholesky fails.
pub fn solve_spd(a: &Matrix, b: &Matrix) -> Matrix {
    if let Some(ch) = a.clone().cholesky() {
        return ch.solve(b);
    }
    let e = jacobi_eigen(a);
    let scale = e.values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let n = a.nrows();
    let dinv = Matrix::from_diagonal(&Vector::from_iterator(
        n,
        e.values.iter().map(|&v| {
            if v.abs() > 1e-14 * scale.max(1e-300) {
                1.0 / v
            } else {
                0.0
            }
        }),
    ));
    &e.vectors * dinv * e.vectors.transpose() * b
}

//! Dense f64 matrices, the skew-symmetric parameterization of rotations,
//! and the matrix exponential with its Fréchet-derivative adjoint.
//!
//! A basis-transformation block stores only the strict upper triangle of a
//! skew-symmetric matrix `A`; the orthonormal map it applies is `P = e^A`.
//! Gradients flow back through `e^A` via the block-augmented exponential
//! identity, so the blocks stay exactly orthonormal while training.

use thiserror::Error;

/// Defect tolerance enforced when an [`OrthonormalMatrix`] is constructed.
pub const ORTHONORMAL_TOL: f64 = 1e-8;

/// Skew-symmetry tolerance required of inputs to [`expm_skew`].
pub const SKEW_TOL: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum LinalgError {
    #[error("parameter shape error: dim {dim} needs {expected} skew parameters, got {got}")]
    ParamShape {
        dim: usize,
        expected: usize,
        got: usize,
    },
    #[error("domain error: matrix is {rows}x{cols}, expected square")]
    NotSquare { rows: usize, cols: usize },
    #[error("domain error: matrix is not skew-symmetric (max |A + A^T| entry = {defect:e})")]
    NotSkew { defect: f64 },
    #[error("domain error: shapes {a:?} and {b:?} are incompatible")]
    ShapeMismatch { a: (usize, usize), b: (usize, usize) },
    #[error("numeric error: non-finite matrix entry")]
    NonFinite,
    #[error("orthonormality defect {defect:e} exceeds tolerance {tol:e}")]
    DefectTooLarge { defect: f64, tol: f64 },
}

/// Row-major dense matrix of f64. Column vectors are `n x 1` matrices.
///
/// Values are immutable through the public interface; every operation
/// returns a fresh matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        DenseMatrix {
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

    /// Builds a matrix from row-major data; rejects length mismatches and
    /// non-finite entries.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, LinalgError> {
        if data.len() != rows * cols {
            return Err(LinalgError::ShapeMismatch {
                a: (rows, cols),
                b: (data.len(), 1),
            });
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(LinalgError::NonFinite);
        }
        Ok(DenseMatrix { rows, cols, data })
    }

    /// Column vector from a slice.
    pub fn column(values: &[f64]) -> Self {
        DenseMatrix {
            rows: values.len(),
            cols: 1,
            data: values.to_vec(),
        }
    }

    /// Unchecked construction for internal kernels. Non-finite values are
    /// allowed to flow so training-divergence checks can see them; external
    /// data must come through `from_vec`.
    pub(crate) fn from_raw(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        DenseMatrix { rows, cols, data }
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

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn matmul(&self, other: &Self) -> Result<Self, LinalgError> {
        if self.cols != other.rows {
            return Err(LinalgError::ShapeMismatch {
                a: self.shape(),
                b: other.shape(),
            });
        }
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let row = &self.data[i * self.cols..(i + 1) * self.cols];
            for (k, &aik) in row.iter().enumerate() {
                if aik == 0.0 {
                    continue;
                }
                let brow = &other.data[k * other.cols..(k + 1) * other.cols];
                let orow = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (o, &b) in orow.iter_mut().zip(brow.iter()) {
                    *o += aik * b;
                }
            }
        }
        Ok(out)
    }

    pub fn add(&self, other: &Self) -> Result<Self, LinalgError> {
        if self.shape() != other.shape() {
            return Err(LinalgError::ShapeMismatch {
                a: self.shape(),
                b: other.shape(),
            });
        }
        let data = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| a + b)
            .collect();
        Ok(DenseMatrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn scale(&self, c: f64) -> Self {
        DenseMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * c).collect(),
        }
    }

    /// Largest absolute entry.
    pub fn max_abs_entry(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    /// Induced 1-norm (maximum absolute column sum).
    pub fn one_norm(&self) -> f64 {
        let mut best = 0.0f64;
        for j in 0..self.cols {
            let mut s = 0.0;
            for i in 0..self.rows {
                s += self.data[i * self.cols + j].abs();
            }
            best = best.max(s);
        }
        best
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Euclidean norm of a slice.
pub fn vec_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `v / max(||v||, floor)`. The inference and gradient paths both call this
/// so their outputs agree bitwise. Divides per entry rather than multiplying
/// by a reciprocal, keeping results correctly rounded.
pub fn normalize_with_floor(v: &DenseMatrix, floor: f64) -> DenseMatrix {
    let denom = vec_norm(v.data()).max(floor);
    let data = v.data().iter().map(|x| x / denom).collect();
    DenseMatrix::from_raw(v.rows(), v.cols(), data)
}

/// Dot product of two equal-length slices.
pub fn vec_dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

/// Learnable parameters of a basis-transformation block: the strict upper
/// triangle of a skew-symmetric `dim x dim` matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SkewParams {
    dim: usize,
    theta: Vec<f64>,
}

/// Number of free parameters of a `dim x dim` skew-symmetric matrix.
pub fn skew_param_len(dim: usize) -> usize {
    dim * (dim - 1) / 2
}

impl SkewParams {
    pub fn new(dim: usize, theta: Vec<f64>) -> Result<Self, LinalgError> {
        let expected = skew_param_len(dim);
        if theta.len() != expected {
            return Err(LinalgError::ParamShape {
                dim,
                expected,
                got: theta.len(),
            });
        }
        Ok(SkewParams { dim, theta })
    }

    pub fn zeros(dim: usize) -> Self {
        SkewParams {
            dim,
            theta: vec![0.0; skew_param_len(dim)],
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }
}

/// Materializes the full skew-symmetric matrix: `A[i][j] = theta` entry for
/// `i < j`, `A[j][i] = -A[i][j]`, zero diagonal, so `A + A^T = 0` exactly.
pub fn build_skew(params: &SkewParams) -> DenseMatrix {
    let m = params.dim;
    let mut a = DenseMatrix::zeros(m, m);
    let mut k = 0;
    for i in 0..m {
        for j in (i + 1)..m {
            let v = params.theta[k];
            a.set(i, j, v);
            a.set(j, i, -v);
            k += 1;
        }
    }
    a
}

/// An orthonormal matrix; construction checks `||P^T P - I||_inf` against
/// [`ORTHONORMAL_TOL`]. Built only via [`expm_skew`], so it is a rotation.
#[derive(Debug, Clone, PartialEq)]
pub struct OrthonormalMatrix {
    p: DenseMatrix,
}

impl OrthonormalMatrix {
    pub fn new(p: DenseMatrix) -> Result<Self, LinalgError> {
        let defect = orthonormality_defect(&p)?;
        if defect > ORTHONORMAL_TOL {
            return Err(LinalgError::DefectTooLarge {
                defect,
                tol: ORTHONORMAL_TOL,
            });
        }
        Ok(OrthonormalMatrix { p })
    }

    pub fn matrix(&self) -> &DenseMatrix {
        &self.p
    }

    pub fn dim(&self) -> usize {
        self.p.rows()
    }

    /// Applies the map to a vector.
    pub fn apply(&self, v: &[f64]) -> Result<Vec<f64>, LinalgError> {
        let out = self.p.matmul(&DenseMatrix::column(v))?;
        Ok(out.data().to_vec())
    }
}

/// `||P^T P - I||_inf` over entries; zero for an exactly orthonormal matrix.
pub fn orthonormality_defect(p: &DenseMatrix) -> Result<f64, LinalgError> {
    if !p.is_square() {
        return Err(LinalgError::NotSquare {
            rows: p.rows(),
            cols: p.cols(),
        });
    }
    let n = p.rows();
    let mut defect = 0.0f64;
    for i in 0..n {
        for j in 0..n {
            // (P^T P)[i][j] = column i . column j
            let mut s = 0.0;
            for k in 0..n {
                s += p.at(k, i) * p.at(k, j);
            }
            let target = if i == j { 1.0 } else { 0.0 };
            defect = defect.max((s - target).abs());
        }
    }
    Ok(defect)
}

fn skew_defect(a: &DenseMatrix) -> f64 {
    let n = a.rows();
    let mut d = 0.0f64;
    for i in 0..n {
        for j in 0..n {
            d = d.max((a.at(i, j) + a.at(j, i)).abs());
        }
    }
    d
}

/// Scaling-and-squaring exponential: pick the smallest `s >= 0` with
/// `||A / 2^s||_1 <= 0.5`, sum the Taylor series to order 18 on the scaled
/// matrix, then square `s` times. Accurate far beyond the tolerances used
/// here for inputs this size.
fn expm_taylor(a: &DenseMatrix) -> DenseMatrix {
    const TAYLOR_ORDER: usize = 18;
    const NORM_LIMIT: f64 = 0.5;

    let norm = a.one_norm();
    let mut s = 0u32;
    while norm / f64::powi(2.0, s as i32) > NORM_LIMIT {
        s += 1;
    }
    let scaled = a.scale(1.0 / f64::powi(2.0, s as i32));

    let n = a.rows();
    let mut sum = DenseMatrix::identity(n);
    let mut term = DenseMatrix::identity(n);
    for k in 1..=TAYLOR_ORDER {
        term = term.matmul(&scaled).expect("square shapes").scale(1.0 / k as f64);
        sum = sum.add(&term).expect("square shapes");
    }
    for _ in 0..s {
        sum = sum.matmul(&sum).expect("square shapes");
    }
    sum
}

/// `P = e^A` for skew-symmetric `A`; the result is orthonormal within
/// [`ORTHONORMAL_TOL`] by construction.
pub fn expm_skew(a: &DenseMatrix) -> Result<OrthonormalMatrix, LinalgError> {
    if !a.is_square() {
        return Err(LinalgError::NotSquare {
            rows: a.rows(),
            cols: a.cols(),
        });
    }
    let defect = skew_defect(a);
    if defect > SKEW_TOL {
        return Err(LinalgError::NotSkew { defect });
    }
    OrthonormalMatrix::new(expm_taylor(a))
}

/// Adjoint of the differential of `exp` at a skew-symmetric `A`: given the
/// upstream gradient `G = dL/dP` for `P = e^A`, returns `dL/dA` in
/// full-matrix form.
///
/// Uses the block identity: the upper-right block of
/// `exp([[A^T, G], [0, A^T]])` is the Fréchet derivative of `exp` at `A^T`
/// in direction `G`, which is exactly the adjoint map needed here. Callers
/// project to theta coordinates with [`theta_gradient`].
pub fn expm_frechet_adjoint(a: &DenseMatrix, g: &DenseMatrix) -> Result<DenseMatrix, LinalgError> {
    if !a.is_square() {
        return Err(LinalgError::NotSquare {
            rows: a.rows(),
            cols: a.cols(),
        });
    }
    if a.shape() != g.shape() {
        return Err(LinalgError::ShapeMismatch {
            a: a.shape(),
            b: g.shape(),
        });
    }
    let defect = skew_defect(a);
    if defect > SKEW_TOL {
        return Err(LinalgError::NotSkew { defect });
    }

    let n = a.rows();
    let at = a.transpose();
    let mut block = DenseMatrix::zeros(2 * n, 2 * n);
    for i in 0..n {
        for j in 0..n {
            block.set(i, j, at.at(i, j));
            block.set(i, n + j, g.at(i, j));
            block.set(n + i, n + j, at.at(i, j));
        }
    }
    let e = expm_taylor(&block);
    let mut out = DenseMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            out.set(i, j, e.at(i, n + j));
        }
    }
    Ok(out)
}

/// Projects a full-matrix gradient `dL/dA` onto theta coordinates:
/// `grad_theta[(i,j)] = dL/dA[i][j] - dL/dA[j][i]` for `i < j`, because
/// theta enters `A` at `(i,j)` with `+1` and at `(j,i)` with `-1`.
pub fn theta_gradient(dlda: &DenseMatrix) -> Result<Vec<f64>, LinalgError> {
    if !dlda.is_square() {
        return Err(LinalgError::NotSquare {
            rows: dlda.rows(),
            cols: dlda.cols(),
        });
    }
    let m = dlda.rows();
    let mut g = Vec::with_capacity(skew_param_len(m));
    for i in 0..m {
        for j in (i + 1)..m {
            g.push(dlda.at(i, j) - dlda.at(j, i));
        }
    }
    Ok(g)
}

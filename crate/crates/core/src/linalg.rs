//! Dense and sparse matrix primitives used by the agents and by the analysis code.
//!
//! Every pseudoinverse goes through a thin SVD with the numerical rank rule
//! `sigma > RANK_TOL * sigma_max`. Sub-blocks are always dense; only the global
//! system matrix is stored as triplets.

use std::collections::{HashMap, HashSet};

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

pub type DenseMatrix = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Relative threshold below which a singular value counts as zero.
pub const RANK_TOL: f64 = 1e-10;

/// Coordinate-format sparse matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix {
    rows: usize,
    cols: usize,
    triplets: Vec<(usize, usize, f64)>,
}

impl SparseMatrix {
    /// Validates indices, finiteness and uniqueness of every `(row, col)` pair.
    pub fn new(rows: usize, cols: usize, triplets: Vec<(usize, usize, f64)>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(triplets.len());
        for &(r, c, v) in &triplets {
            if r >= rows {
                return Err(Error::InvalidIndex { index: r, len: rows });
            }
            if c >= cols {
                return Err(Error::InvalidIndex { index: c, len: cols });
            }
            if !v.is_finite() {
                return Err(Error::InvalidParameter(format!(
                    "non-finite entry at ({r}, {c})"
                )));
            }
            if !seen.insert((r, c)) {
                return Err(Error::InvalidParameter(format!(
                    "duplicate entry at ({r}, {c})"
                )));
            }
        }
        Ok(Self {
            rows,
            cols,
            triplets,
        })
    }

    pub fn from_dense(m: &DenseMatrix) -> Self {
        let mut triplets = Vec::new();
        for r in 0..m.nrows() {
            for c in 0..m.ncols() {
                let v = m[(r, c)];
                if v != 0.0 {
                    triplets.push((r, c, v));
                }
            }
        }
        Self {
            rows: m.nrows(),
            cols: m.ncols(),
            triplets,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn nnz(&self) -> usize {
        self.triplets.len()
    }

    pub fn triplets(&self) -> &[(usize, usize, f64)] {
        &self.triplets
    }

    pub fn to_dense(&self) -> DenseMatrix {
        let mut m = DenseMatrix::zeros(self.rows, self.cols);
        for &(r, c, v) in &self.triplets {
            m[(r, c)] = v;
        }
        m
    }

    /// Dense copy of the rows in `start..end`.
    pub fn dense_rows(&self, start: usize, end: usize) -> DenseMatrix {
        let mut m = DenseMatrix::zeros(end - start, self.cols);
        for &(r, c, v) in &self.triplets {
            if (start..end).contains(&r) {
                m[(r - start, c)] = v;
            }
        }
        m
    }

    pub fn mul_vec(&self, x: &Vector) -> Result<Vector> {
        if x.len() != self.cols {
            return Err(Error::Dimension(format!(
                "{}x{} matrix times vector of length {}",
                self.rows,
                self.cols,
                x.len()
            )));
        }
        let mut out = Vector::zeros(self.rows);
        for &(r, c, v) in &self.triplets {
            out[r] += v * x[c];
        }
        Ok(out)
    }

    /// Canonical row-major ordering of the triplets.
    pub fn sort(&mut self) {
        self.triplets.sort_by_key(|&(r, c, _)| (r, c));
    }
}

/// Thin SVD truncated to the numerical rank.
#[derive(Debug, Clone)]
pub struct SvdFactors {
    /// `m x r`, orthonormal columns.
    pub u: DenseMatrix,
    /// Descending, all strictly positive.
    pub singular_values: Vec<f64>,
    /// `n x r`, orthonormal columns spanning the row space.
    pub v: DenseMatrix,
}

impl SvdFactors {
    pub fn rank(&self) -> usize {
        self.singular_values.len()
    }

    pub fn sigma_max(&self) -> Option<f64> {
        self.singular_values.first().copied()
    }

    /// Smallest nonzero singular value.
    pub fn sigma_min(&self) -> Option<f64> {
        self.singular_values.last().copied()
    }

    /// `V diag(f(sigma)) U^T b` for a per-mode spectral filter `f`.
    pub fn filtered_apply(&self, b: &Vector, f: impl Fn(f64) -> f64) -> Vector {
        let mut coeffs = self.u.tr_mul(b);
        for (c, &s) in coeffs.iter_mut().zip(&self.singular_values) {
            *c *= f(s);
        }
        &self.v * coeffs
    }

    pub fn pinv(&self) -> DenseMatrix {
        let scaled = DenseMatrix::from_fn(self.v.nrows(), self.rank(), |i, j| {
            self.v[(i, j)] / self.singular_values[j]
        });
        scaled * self.u.transpose()
    }

    pub fn reconstruct(&self) -> DenseMatrix {
        let scaled = DenseMatrix::from_fn(self.u.nrows(), self.rank(), |i, j| {
            self.u[(i, j)] * self.singular_values[j]
        });
        scaled * self.v.transpose()
    }
}

pub fn svd(a: &DenseMatrix) -> SvdFactors {
    let (m, n) = a.shape();
    if m == 0 || n == 0 {
        return SvdFactors {
            u: DenseMatrix::zeros(m, 0),
            singular_values: Vec::new(),
            v: DenseMatrix::zeros(n, 0),
        };
    }
    let dec = a.clone().svd(true, true);
    let u_full = dec.u.expect("u requested");
    let vt_full = dec.v_t.expect("v_t requested");
    let mut order: Vec<usize> = (0..dec.singular_values.len()).collect();
    order.sort_by(|&i, &j| dec.singular_values[j].total_cmp(&dec.singular_values[i]));
    let smax = order
        .first()
        .map(|&i| dec.singular_values[i])
        .unwrap_or(0.0);
    let keep: Vec<usize> = order
        .into_iter()
        .filter(|&i| smax > 0.0 && dec.singular_values[i] > RANK_TOL * smax)
        .collect();
    let u = DenseMatrix::from_fn(m, keep.len(), |i, j| u_full[(i, keep[j])]);
    let v = DenseMatrix::from_fn(n, keep.len(), |i, j| vt_full[(keep[j], i)]);
    SvdFactors {
        u,
        singular_values: keep.iter().map(|&i| dec.singular_values[i]).collect(),
        v,
    }
}

pub fn pinv(a: &DenseMatrix) -> DenseMatrix {
    svd(a).pinv()
}

/// Orthonormal basis of `Row(A)`: the leading right singular vectors.
pub fn row_space_basis(a: &DenseMatrix) -> DenseMatrix {
    svd(a).v
}

pub fn rank(a: &DenseMatrix) -> usize {
    svd(a).rank()
}

/// Row selector: copies the rows listed in `idx`, in that order.
pub fn extract_rows(m: &DenseMatrix, idx: &[usize]) -> Result<DenseMatrix> {
    if let Some(&bad) = idx.iter().find(|&&i| i >= m.nrows()) {
        return Err(Error::InvalidIndex {
            index: bad,
            len: m.nrows(),
        });
    }
    Ok(m.select_rows(idx))
}

pub fn extract_entries(v: &Vector, idx: &[usize]) -> Result<Vector> {
    if let Some(&bad) = idx.iter().find(|&&i| i >= v.len()) {
        return Err(Error::InvalidIndex {
            index: bad,
            len: v.len(),
        });
    }
    Ok(Vector::from_iterator(idx.len(), idx.iter().map(|&i| v[i])))
}

fn check_cols(a: &DenseMatrix, v: &Vector, what: &str) -> Result<()> {
    if a.ncols() != v.len() {
        return Err(Error::Dimension(format!(
            "{what}: matrix has {} columns, vector has length {}",
            a.ncols(),
            v.len()
        )));
    }
    Ok(())
}

fn check_rows(a: &DenseMatrix, v: &Vector, what: &str) -> Result<()> {
    if a.nrows() != v.len() {
        return Err(Error::Dimension(format!(
            "{what}: matrix has {} rows, vector has length {}",
            a.nrows(),
            v.len()
        )));
    }
    Ok(())
}

/// `(I - A_J^+ A_J) v`: orthogonal projection onto the null space of `A_J`.
pub fn project_null(a_j: &DenseMatrix, v: &Vector) -> Result<Vector> {
    check_cols(a_j, v, "project_null")?;
    let basis = row_space_basis(a_j);
    let coeffs = basis.tr_mul(v);
    Ok(v - basis * coeffs)
}

/// `w + A_J^+ (b_J - A_J w)`.
pub fn kaczmarz_correction(a_j: &DenseMatrix, b_j: &Vector, w: &Vector) -> Result<Vector> {
    check_cols(a_j, w, "kaczmarz_correction")?;
    check_rows(a_j, b_j, "kaczmarz_correction")?;
    Ok(apply_correction(&pinv(a_j), a_j, b_j, w))
}

/// Same as [`kaczmarz_correction`] with a precomputed pseudoinverse.
pub(crate) fn apply_correction(
    a_pinv: &DenseMatrix,
    a_j: &DenseMatrix,
    b_j: &Vector,
    w: &Vector,
) -> Vector {
    let residual = b_j - a_j * w;
    w + a_pinv * residual
}

/// Cholesky factor of `A_J A_J^T + lambda^2 I`.
pub fn regularized_gram(a_j: &DenseMatrix, lambda: f64) -> Result<Cholesky<f64, Dyn>> {
    if !(lambda > 0.0) || !lambda.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "lambda must be positive, got {lambda}"
        )));
    }
    let mut gram = a_j * a_j.transpose();
    for i in 0..gram.nrows() {
        gram[(i, i)] += lambda * lambda;
    }
    Cholesky::new(gram).ok_or_else(|| {
        Error::InvalidParameter("regularized gram matrix is not positive definite".into())
    })
}

/// Solves `(A_J A_J^T + lambda^2 I) alpha = r`.
pub fn regularized_gram_solve(a_j: &DenseMatrix, lambda: f64, r: &Vector) -> Result<Vector> {
    check_rows(a_j, r, "regularized_gram_solve")?;
    Ok(regularized_gram(a_j, lambda)?.solve(r))
}

/// Minimum-norm least-squares solution `A^+ b`.
pub fn min_norm_solve(a: &DenseMatrix, b: &Vector) -> Result<Vector> {
    check_rows(a, b, "min_norm_solve")?;
    Ok(svd(a).filtered_apply(b, |s| 1.0 / s))
}

/// Upper bound on `||x* - x~*|| / ||x*||` for the augmented system with parameter `lambda`.
pub fn augmented_error_bound(sigma_min: f64, lambda: f64) -> Result<f64> {
    if !(sigma_min > 0.0) || !(lambda > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "sigma_min and lambda must be positive, got {sigma_min} and {lambda}"
        )));
    }
    let ratio = sigma_min / lambda;
    Ok(1.0 / (ratio * ratio + 1.0))
}

/// Splits `(A  lambda I)^+ b` into its `x` (length n) and `y` (length m) parts.
pub fn augmented_min_norm_solve(
    a: &DenseMatrix,
    b: &Vector,
    lambda: f64,
) -> Result<(Vector, Vector)> {
    check_rows(a, b, "augmented_min_norm_solve")?;
    if !(lambda > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "lambda must be positive, got {lambda}"
        )));
    }
    let f = svd(a);
    let lam2 = lambda * lambda;
    let x = f.filtered_apply(b, |s| s / (s * s + lam2));
    // y = lambda (A A^T + lambda^2 I)^{-1} b, split into Col(A) and its complement.
    let coeffs = f.u.tr_mul(b);
    let in_col = &f.u * &coeffs;
    let mut scaled = coeffs;
    for (c, &s) in scaled.iter_mut().zip(&f.singular_values) {
        *c /= s * s + lam2;
    }
    let y = (&f.u * scaled) * lambda + (b - in_col) / lambda;
    Ok((x, y))
}

/// Per-block cache of pseudoinverses and regularized gram factors, keyed by the
/// block's row index set.
#[derive(Debug, Default, Clone)]
pub struct BlockCache {
    pinvs: HashMap<Vec<usize>, DenseMatrix>,
    grams: HashMap<Vec<usize>, Cholesky<f64, Dyn>>,
}

impl BlockCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.pinvs.len() + self.grams.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn pinv(&mut self, key: &[usize], a_j: &DenseMatrix) -> &DenseMatrix {
        self.pinvs
            .entry(key.to_vec())
            .or_insert_with(|| pinv(a_j))
    }

    pub fn gram(
        &mut self,
        key: &[usize],
        a_j: &DenseMatrix,
        lambda: f64,
    ) -> Result<&Cholesky<f64, Dyn>> {
        if !self.grams.contains_key(key) {
            let chol = regularized_gram(a_j, lambda)?;
            self.grams.insert(key.to_vec(), chol);
        }
        Ok(&self.grams[key])
    }
}

/// Largest singular value.
pub fn spectral_norm(m: &DenseMatrix) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.clone()
        .singular_values()
        .iter()
        .cloned()
        .fold(0.0, f64::max)
}

//! Compressed-column sparse matrices with a fixed pattern, plus a direct LU
//! solver that reuses one symbolic analysis across numeric factorizations.

use std::sync::Arc;


use faer::prelude::Solve;
use faer::sparse::linalg::solvers::{Lu, SymbolicLu};
use faer::sparse::{SparseColMatRef, SymbolicSparseColMatRef};
use faer::MatMut;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinearSolveError {
    #[error("symbolic analysis failed: {0}")]
    Symbolic(String),
    #[error("matrix is singular")]
    Singular,
}

/// Square compressed-column sparsity pattern with sorted row indices.
#[derive(Debug, Clone, PartialEq)]
pub struct SparsePattern {
    n: usize,
    col_ptr: Vec<usize>,
    row_idx: Vec<usize>,
}

impl SparsePattern {
    /// Builds the pattern of an `n x n` matrix from `(row, col)` entries;
    /// duplicates are merged.
    pub fn from_entries(n: usize, entries: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let mut cols: Vec<Vec<usize>> = vec![Vec::new(); n];
        for (r, c) in entries {
            debug_assert!(r < n && c < n);
            cols[c].push(r);
        }
        let mut col_ptr = Vec::with_capacity(n + 1);
        let mut row_idx = Vec::new();
        col_ptr.push(0);
        for mut col in cols {
            col.sort_unstable();
            col.dedup();
            row_idx.extend_from_slice(&col);
            col_ptr.push(row_idx.len());
        }
        Self { n, col_ptr, row_idx }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.row_idx.len()
    }

    /// Index into the value array of entry `(row, col)`.
    pub fn position(&self, row: usize, col: usize) -> Option<usize> {
        let (s, e) = (self.col_ptr[col], self.col_ptr[col + 1]);
        self.row_idx[s..e].binary_search(&row).ok().map(|k| s + k)
    }

    pub fn rows_of(&self, col: usize) -> &[usize] {
        &self.row_idx[self.col_ptr[col]..self.col_ptr[col + 1]]
    }

        fn faer_ref(&self) -> SymbolicSparseColMatRef<'_, usize> {
        SymbolicSparseColMatRef::new_checked(self.n, self.n, &self.col_ptr, None, &self.row_idx)
    }
}

#[derive(Debug, Clone)]
pub struct SparseMatrix {
    pattern: Arc<SparsePattern>,
    values: Vec<f64>,
}

impl SparseMatrix {
    pub fn zeros(pattern: Arc<SparsePattern>) -> Self {
        let values = vec![0.0; pattern.nnz()];
        Self { pattern, values }
    }

    pub fn pattern(&self) -> &Arc<SparsePattern> {
        &self.pattern
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn dim(&self) -> usize {
        self.pattern.n
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.pattern
            .position(row, col)
            .map_or(0.0, |p| self.values[p])
    }

    /// `y = A x`
    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.dim()];
        for (c, xc) in x.iter().enumerate() {
            if *xc == 0.0 {
                continue;
            }
            let (s, e) = (self.pattern.col_ptr[c], self.pattern.col_ptr[c + 1]);
            for p in s..e {
                y[self.pattern.row_idx[p]] += self.values[p] * xc;
            }
        }
        y
    }

    /// `y = A^T x`
    pub fn mul_transpose_vec(&self, x: &[f64]) -> Vec<f64> {
        (0..self.dim())
            .map(|c| {
                let (s, e) = (self.pattern.col_ptr[c], self.pattern.col_ptr[c + 1]);
                (s..e)
                    .map(|p| self.values[p] * x[self.pattern.row_idx[p]])
                    .sum()
            })
            .collect()
    }
}

/// Direct solver bound to one sparsity pattern.
#[derive(Clone)]
pub struct LuSolver {
    pattern: Arc<SparsePattern>,
    symbolic: SymbolicLu<usize>,
}

impl std::fmt::Debug for LuSolver {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LuSolver")
            .field("dim", &self.pattern.n)
            .field("nnz", &self.pattern.nnz())
            .finish()
    }
}

impl LuSolver {
    pub fn new(pattern: Arc<SparsePattern>) -> Result<Self, LinearSolveError> {
        let symbolic = SymbolicLu::try_new(pattern.faer_ref())
            .map_err(|e| LinearSolveError::Symbolic(format!("{e:?}")))?;
        Ok(Self { pattern, symbolic })
    }

    pub fn factorize(&self, matrix: &SparseMatrix) -> Result<Factorization, LinearSolveError> {
        assert!(Arc::ptr_eq(&self.pattern, &matrix.pattern) || *self.pattern == *matrix.pattern);
        let mat = SparseColMatRef::new(self.pattern.faer_ref(), &matrix.values);
        // faer panics on an exactly zero pivot instead of returning an error.
        let lu = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| {
            Lu::try_new_with_symbolic(self.symbolic.clone(), mat)
        }))
        .map_err(|_| LinearSolveError::Singular)?
        .map_err(|_| LinearSolveError::Singular)?;
        Ok(Factorization {
            lu,
            n: self.pattern.n,
        })
    }
}

pub struct Factorization {
    lu: Lu<usize, f64>,
    n: usize,
}

impl Factorization {
    /// Solves `A x = b` in place.
    pub fn solve_in_place(&self, b: &mut [f64]) -> Result<(), LinearSolveError> {
        assert_eq!(b.len(), self.n);
        self.lu
            .solve_in_place(MatMut::from_column_major_slice_mut(b, self.n, 1));
        finite(b)
    }

    /// Solves `A^T x = b` in place.
    pub fn solve_transpose_in_place(&self, b: &mut [f64]) -> Result<(), LinearSolveError> {
        assert_eq!(b.len(), self.n);
        self.lu
            .solve_transpose_in_place(MatMut::from_column_major_slice_mut(b, self.n, 1));
        finite(b)
    }
}

fn finite(x: &[f64]) -> Result<(), LinearSolveError> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(LinearSolveError::Singular)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tridiagonal(n: usize) -> SparseMatrix {
        let entries = (0..n).flat_map(|i| {
            [(i, i)]
                .into_iter()
                .chain((i > 0).then(|| (i, i - 1)))
                .chain((i + 1 < n).then(|| (i, i + 1)))
        });
        let pattern = Arc::new(SparsePattern::from_entries(n, entries));
        let mut a = SparseMatrix::zeros(pattern.clone());
        for i in 0..n {
            let p = pattern.position(i, i).unwrap();
            a.values_mut()[p] = 4.0 + i as f64;
            if i + 1 < n {
                let p = pattern.position(i, i + 1).unwrap();
                a.values_mut()[p] = -1.0;
                let p = pattern.position(i + 1, i).unwrap();
                a.values_mut()[p] = 2.0;
            }
        }
        a
    }

    #[test]
    fn solves_and_transposes() {
        let a = tridiagonal(7);
        let solver = LuSolver::new(a.pattern().clone()).unwrap();
        let lu = solver.factorize(&a).unwrap();
        let x: Vec<f64> = (0..7).map(|i| (i as f64).sin() + 0.3).collect();
        let mut b = a.mul_vec(&x);
        lu.solve_in_place(&mut b).unwrap();
        for (u, v) in b.iter().zip(&x) {
            assert!((u - v).abs() < 1e-13);
        }
        let mut bt = a.mul_transpose_vec(&x);
        lu.solve_transpose_in_place(&mut bt).unwrap();
        for (u, v) in bt.iter().zip(&x) {
            assert!((u - v).abs() < 1e-13);
        }
    }

    #[test]
    fn transpose_product_is_adjoint() {
        let a = tridiagonal(5);
        let v = [1.0, -2.0, 0.5, 3.0, 0.25];
        let w = [0.3, 0.1, -1.0, 2.0, 4.0];
        let av = a.mul_vec(&v);
        let atw = a.mul_transpose_vec(&w);
        let lhs: f64 = av.iter().zip(&w).map(|(a, b)| a * b).sum();
        let rhs: f64 = atw.iter().zip(&v).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn singular_matrix_is_reported() {
        let pattern = Arc::new(SparsePattern::from_entries(2, [(0, 0), (0, 1), (1, 0), (1, 1)]));
        let mut a = SparseMatrix::zeros(pattern.clone());
        a.values_mut().copy_from_slice(&[1.0, 2.0, 2.0, 4.0]);
        let solver = LuSolver::new(pattern).unwrap();
        let result = solver.factorize(&a).and_then(|lu| lu.solve_in_place(&mut [1.0, 1.0]));
        assert_eq!(result, Err(LinearSolveError::Singular));
    }
}

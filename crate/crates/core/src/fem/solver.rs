//! Sparse direct solver behind the `Factorization` contract.
//!
//! Backed by faer's sparse LU with row/column permutations. The symbolic
//! analysis of a fixed sparsity pattern can be cached and reused across time
//! steps (`SparseLuSymbolic`), which is what the ensemble stepper does: one
//! numeric factorization per step serves all right-hand sides.
//!
//! faer's global parallelism is pinned to sequential the first time a solver
//! is built, keeping factorization results identical from run to run.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Once;

use faer::linalg::solvers::Solve;
use faer::sparse::linalg::solvers as sp_solvers;
use faer::sparse::{SparseColMatRef, SymbolicSparseColMat};
use faer::Mat;

use super::sparse::SparseMatrix;
use super::FemError;

static PIN_PARALLELISM: Once = Once::new();

fn pin_sequential() {
    PIN_PARALLELISM.call_once(|| faer::set_global_parallelism(faer::Par::Seq));
}

/// Opaque LU decomposition serving any number of right-hand sides.
pub struct Factorization {
    lu: sp_solvers::Lu<usize, f64>,
    n: usize,
    solves: AtomicU64,
}

impl Factorization {
    /// Solves a single right-hand side.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        assert_eq!(b.len(), self.n);
        let mut rhs = Mat::<f64>::from_fn(self.n, 1, |i, _| b[i]);
        self.lu.solve_in_place(rhs.as_mut());
        self.solves.fetch_add(1, Ordering::Relaxed);
        (0..self.n).map(|i| rhs[(i, 0)]).collect()
    }

    /// Solves a block of right-hand sides against the single factorization.
    pub fn solve_many(&self, rhs_cols: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let j = rhs_cols.len();
        if j == 0 {
            return Vec::new();
        }
        for col in rhs_cols {
            assert_eq!(col.len(), self.n);
        }
        let mut rhs = Mat::<f64>::from_fn(self.n, j, |i, c| rhs_cols[c][i]);
        self.lu.solve_in_place(rhs.as_mut());
        self.solves.fetch_add(j as u64, Ordering::Relaxed);
        (0..j)
            .map(|c| (0..self.n).map(|i| rhs[(i, c)]).collect())
            .collect()
    }

    /// Number of right-hand-side columns solved so far.
    pub fn solve_count(&self) -> u64 {
        self.solves.load(Ordering::Relaxed)
    }

    pub fn dim(&self) -> usize {
        self.n
    }
}

/// Cached symbolic analysis for one sparsity pattern in column-major form.
pub struct SparseLuSymbolic {
    n: usize,
    symbolic: SymbolicSparseColMat<usize>,
    symbolic_lu: sp_solvers::SymbolicLu<usize>,
}

impl SparseLuSymbolic {
    /// `col_ptr`/`row_idx` describe the fixed CSC pattern of a square matrix.
    pub fn new(n: usize, col_ptr: Vec<usize>, row_idx: Vec<usize>) -> Result<Self, FemError> {
        pin_sequential();
        let symbolic = SymbolicSparseColMat::new_checked(n, n, col_ptr, None, row_idx);
        let symbolic_lu = sp_solvers::SymbolicLu::try_new(symbolic.as_ref())
            .map_err(|e| FemError::Solver(format!("symbolic analysis failed: {e:?}")))?;
        Ok(SparseLuSymbolic {
            n,
            symbolic,
            symbolic_lu,
        })
    }

    pub fn nnz(&self) -> usize {
        self.symbolic.row_idx().len()
    }

    /// Numeric factorization of the pattern with the given values.
    pub fn factor(&self, values: &[f64]) -> Result<Factorization, FemError> {
        assert_eq!(values.len(), self.nnz());
        let mat = SparseColMatRef::new(self.symbolic.as_ref(), values);
        let lu = sp_solvers::Lu::try_new_with_symbolic(self.symbolic_lu.clone(), mat)
            .map_err(|e| FemError::Solver(format!("numeric factorization failed: {e:?}")))?;
        Ok(Factorization {
            lu,
            n: self.n,
            solves: AtomicU64::new(0),
        })
    }
}

/// One-shot LU of a square CSR matrix (symbolic + numeric).
pub fn lu_factor(a: &SparseMatrix) -> Result<Factorization, FemError> {
    if a.nrows != a.ncols {
        return Err(FemError::Solver(format!(
            "matrix not square: {} x {}",
            a.nrows, a.ncols
        )));
    }
    pin_sequential();
    let (col_ptr, row_idx, values) = csr_to_csc(a);
    let symbolic = SparseLuSymbolic::new(a.nrows, col_ptr, row_idx)?;
    symbolic.factor(&values)
}

/// Column-compressed copy of a CSR matrix; row indices per column ascend.
pub fn csr_to_csc(a: &SparseMatrix) -> (Vec<usize>, Vec<usize>, Vec<f64>) {
    let mut col_counts = vec![0usize; a.ncols];
    for &j in &a.col_idx {
        col_counts[j] += 1;
    }
    let mut col_ptr = vec![0usize; a.ncols + 1];
    for j in 0..a.ncols {
        col_ptr[j + 1] = col_ptr[j] + col_counts[j];
    }
    let mut row_idx = vec![0usize; a.nnz()];
    let mut values = vec![0.0; a.nnz()];
    let mut cursor = col_ptr.clone();
    for i in 0..a.nrows {
        let (cols, vals) = a.row(i);
        for (j, v) in cols.iter().zip(vals) {
            let p = cursor[*j];
            row_idx[p] = i;
            values[p] = *v;
            cursor[*j] += 1;
        }
    }
    (col_ptr, row_idx, values)
}

//! Compressed-row sparse matrices with a deterministic triplet builder.

use super::FemError;

#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix {
    pub nrows: usize,
    pub ncols: usize,
    pub row_ptr: Vec<usize>,
    pub col_idx: Vec<usize>,
    pub values: Vec<f64>,
}

impl SparseMatrix {
    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn identity(n: usize) -> Self {
        SparseMatrix {
            nrows: n,
            ncols: n,
            row_ptr: (0..=n).collect(),
            col_idx: (0..n).collect(),
            values: vec![1.0; n],
        }
    }

    pub fn row(&self, i: usize) -> (&[usize], &[f64]) {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        (&self.col_idx[r.clone()], &self.values[r])
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (cols, vals) = self.row(i);
        match cols.binary_search(&j) {
            Ok(p) => vals[p],
            Err(_) => 0.0,
        }
    }

    /// `y = A x`.
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.ncols);
        let mut y = vec![0.0; self.nrows];
        for i in 0..self.nrows {
            let (cols, vals) = self.row(i);
            let mut acc = 0.0;
            for (c, v) in cols.iter().zip(vals) {
                acc += v * x[*c];
            }
            y[i] = acc;
        }
        y
    }

    /// `y = A^T x`.
    pub fn matvec_transpose(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.nrows);
        let mut y = vec![0.0; self.ncols];
        for i in 0..self.nrows {
            let (cols, vals) = self.row(i);
            for (c, v) in cols.iter().zip(vals) {
                y[*c] += v * x[i];
            }
        }
        y
    }

    /// Quadratic form `x^T A y`.
    pub fn bilinear(&self, x: &[f64], y: &[f64]) -> f64 {
        assert_eq!(x.len(), self.nrows);
        let ay = self.matvec(y);
        x.iter().zip(&ay).map(|(a, b)| a * b).sum()
    }

    /// True when the two matrices share dimensions and sparsity pattern.
    pub fn same_pattern(&self, other: &SparseMatrix) -> bool {
        self.nrows == other.nrows
            && self.ncols == other.ncols
            && self.row_ptr == other.row_ptr
            && self.col_idx == other.col_idx
    }

    /// Applies a block-diagonal scalar operator to an interleaved
    /// two-component vector: `out[2i+c] = sum_j A[i,j] x[2j+c]`.
    pub fn apply_interleaved2(&self, x: &[f64], out: &mut [f64]) {
        assert_eq!(x.len(), 2 * self.ncols);
        assert_eq!(out.len(), 2 * self.nrows);
        for i in 0..self.nrows {
            let (cols, vals) = self.row(i);
            let mut acc0 = 0.0;
            let mut acc1 = 0.0;
            for (c, v) in cols.iter().zip(vals) {
                acc0 += v * x[2 * c];
                acc1 += v * x[2 * c + 1];
            }
            out[2 * i] = acc0;
            out[2 * i + 1] = acc1;
        }
    }

    /// Quadratic form over both components of interleaved vectors:
    /// `sum_c x_c^T A y_c`.
    pub fn bilinear_interleaved2(&self, x: &[f64], y: &[f64]) -> f64 {
        assert_eq!(self.nrows, self.ncols);
        assert_eq!(x.len(), 2 * self.nrows);
        assert_eq!(y.len(), 2 * self.nrows);
        let mut acc = 0.0;
        for i in 0..self.nrows {
            let (cols, vals) = self.row(i);
            let mut ay0 = 0.0;
            let mut ay1 = 0.0;
            for (c, v) in cols.iter().zip(vals) {
                ay0 += v * y[2 * c];
                ay1 += v * y[2 * c + 1];
            }
            acc += x[2 * i] * ay0 + x[2 * i + 1] * ay1;
        }
        acc
    }
}

/// Accumulating triplet builder; duplicate entries are summed. Inserting
/// elements in a fixed order yields a bit-for-bit reproducible matrix.
#[derive(Debug, Clone)]
pub struct CsrBuilder {
    nrows: usize,
    ncols: usize,
    entries: Vec<(usize, usize, f64)>,
}

impl CsrBuilder {
    pub fn new(nrows: usize, ncols: usize) -> Self {
        CsrBuilder {
            nrows,
            ncols,
            entries: Vec::new(),
        }
    }

    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        debug_assert!(i < self.nrows && j < self.ncols);
        self.entries.push((i, j, v));
    }

    pub fn build(mut self) -> SparseMatrix {
        // Stable sort keeps duplicate contributions in insertion order, so
        // the accumulation order (and hence rounding) is deterministic.
        self.entries.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        let mut row_ptr = vec![0usize; self.nrows + 1];
        let mut col_idx = Vec::new();
        let mut values = Vec::new();
        let mut last: Option<(usize, usize)> = None;
        for (i, j, v) in self.entries {
            if last == Some((i, j)) {
                *values.last_mut().unwrap() += v;
            } else {
                col_idx.push(j);
                values.push(v);
                row_ptr[i + 1] += 1;
                last = Some((i, j));
            }
        }
        for i in 0..self.nrows {
            row_ptr[i + 1] += row_ptr[i];
        }
        SparseMatrix {
            nrows: self.nrows,
            ncols: self.ncols,
            row_ptr,
            col_idx,
            values,
        }
    }
}

/// Writes values into an existing pattern; entries outside it are an error.
pub fn scatter_into_pattern(
    target: &mut SparseMatrix,
    i: usize,
    j: usize,
    v: f64,
) -> Result<(), FemError> {
    let r = target.row_ptr[i]..target.row_ptr[i + 1];
    match target.col_idx[r.clone()].binary_search(&j) {
        Ok(p) => {
            target.values[r.start + p] += v;
            Ok(())
        }
        Err(_) => Err(FemError::PatternMismatch),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn builder_sums_duplicates_and_sorts() {
        let mut b = CsrBuilder::new(2, 3);
        b.add(1, 2, 1.0);
        b.add(0, 1, 2.0);
        b.add(1, 2, 0.5);
        b.add(0, 0, -1.0);
        let a = b.build();
        assert_eq!(a.nnz(), 3);
        assert_eq!(a.get(0, 0), -1.0);
        assert_eq!(a.get(0, 1), 2.0);
        assert_eq!(a.get(1, 2), 1.5);
        assert_eq!(a.get(1, 0), 0.0);
    }

    #[test]
    fn matvec_and_transpose() {
        let mut b = CsrBuilder::new(2, 2);
        b.add(0, 0, 2.0);
        b.add(0, 1, 1.0);
        b.add(1, 1, 3.0);
        let a = b.build();
        let y = a.matvec(&[1.0, 2.0]);
        assert_eq!(y, vec![4.0, 6.0]);
        let z = a.matvec_transpose(&[1.0, 1.0]);
        assert_eq!(z, vec![2.0, 4.0]);
        assert_relative_eq!(a.bilinear(&[1.0, 0.0], &[0.0, 1.0]), 1.0);
    }

    #[test]
    fn interleaved_block_apply() {
        let mut b = CsrBuilder::new(2, 2);
        b.add(0, 0, 1.0);
        b.add(0, 1, 2.0);
        b.add(1, 0, 3.0);
        let a = b.build();
        let x = [1.0, 10.0, 2.0, 20.0]; // nodes (1,10), (2,20)
        let mut out = [0.0; 4];
        a.apply_interleaved2(&x, &mut out);
        assert_eq!(out, [5.0, 50.0, 3.0, 30.0]);
        assert_relative_eq!(
            a.bilinear_interleaved2(&x, &x),
            1.0 * 5.0 + 10.0 * 50.0 + 2.0 * 3.0 + 20.0 * 30.0
        );
    }
}

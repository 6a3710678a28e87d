//! Sparse kernels, the synthetic Poisson problem and their distributed
//! counterparts.

mod dist;
mod mmio;

use std::ops::{Deref, DerefMut, Range};

use thiserror::Error;

pub use dist::{dist_dot, dist_frobenius_norm, dist_norm2, dist_spmv};
pub use mmio::{read_matrix_market, MatrixMarketError};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LinalgError {
    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("invalid CSR structure: {0}")]
    InvalidCsr(String),
    #[error("grid dimensions must be at least 1")]
    EmptyGrid,
    #[error("problem size overflows the index type")]
    Overflow,
    #[error("cannot partition over zero ranks")]
    ZeroRanks,
}

/// Compressed sparse row matrix. Column indices are global.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    n_rows: usize,
    n_cols: usize,
    row_offsets: Vec<usize>,
    col_indices: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    pub fn new(
        n_rows: usize,
        n_cols: usize,
        row_offsets: Vec<usize>,
        col_indices: Vec<usize>,
        values: Vec<f64>,
    ) -> Result<Self, LinalgError> {
        let bad = |m: String| Err(LinalgError::InvalidCsr(m));
        if row_offsets.len() != n_rows + 1 {
            return bad(format!(
                "row_offsets has {} entries for {} rows",
                row_offsets.len(),
                n_rows
            ));
        }
        if row_offsets[0] != 0 {
            return bad("row_offsets[0] != 0".into());
        }
        if row_offsets[n_rows] != values.len() || values.len() != col_indices.len() {
            return bad("row_offsets, col_indices and values disagree on nnz".into());
        }
        for r in 0..n_rows {
            let (lo, hi) = (row_offsets[r], row_offsets[r + 1]);
            if lo > hi {
                return bad(format!("row_offsets decreases at row {r}"));
            }
            let cols = &col_indices[lo..hi];
            if cols.windows(2).any(|w| w[0] >= w[1]) {
                return bad(format!("columns of row {r} not strictly increasing"));
            }
            if cols.last().is_some_and(|&c| c >= n_cols) {
                return bad(format!("column index out of range in row {r}"));
            }
        }
        Ok(CsrMatrix {
            n_rows,
            n_cols,
            row_offsets,
            col_indices,
            values,
        })
    }

    pub fn identity(n: usize) -> Self {
        Self::diagonal(&vec![1.0; n])
    }

    pub fn diagonal(d: &[f64]) -> Self {
        let n = d.len();
        CsrMatrix {
            n_rows: n,
            n_cols: n,
            row_offsets: (0..=n).collect(),
            col_indices: (0..n).collect(),
            values: d.to_vec(),
        }
    }

    /// Builds from a dense row-major array, dropping exact zeros.
    pub fn from_dense(rows: &[Vec<f64>]) -> Self {
        let n_cols = rows.first().map_or(0, |r| r.len());
        let mut row_offsets = vec![0];
        let mut col_indices = Vec::new();
        let mut values = Vec::new();
        for row in rows {
            for (c, &v) in row.iter().enumerate() {
                if v != 0.0 {
                    col_indices.push(c);
                    values.push(v);
                }
            }
            row_offsets.push(values.len());
        }
        CsrMatrix {
            n_rows: rows.len(),
            n_cols,
            row_offsets,
            col_indices,
            values,
        }
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row_offsets(&self) -> &[usize] {
        &self.row_offsets
    }

    pub fn col_indices(&self) -> &[usize] {
        &self.col_indices
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.row_offsets[r]..self.row_offsets[r + 1];
        self.col_indices[span.clone()]
            .iter()
            .copied()
            .zip(self.values[span].iter().copied())
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        let span = self.row_offsets[r]..self.row_offsets[r + 1];
        match self.col_indices[span.clone()].binary_search(&c) {
            Ok(i) => self.values[span.start + i],
            Err(_) => 0.0,
        }
    }

    /// Copy of a contiguous block of rows, keeping global column indices.
    pub fn row_block(&self, rows: Range<usize>) -> CsrMatrix {
        let lo = self.row_offsets[rows.start];
        let hi = self.row_offsets[rows.end];
        CsrMatrix {
            n_rows: rows.len(),
            n_cols: self.n_cols,
            row_offsets: self.row_offsets[rows.start..=rows.end]
                .iter()
                .map(|o| o - lo)
                .collect(),
            col_indices: self.col_indices[lo..hi].to_vec(),
            values: self.values[lo..hi].to_vec(),
        }
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut out = vec![vec![0.0; self.n_cols]; self.n_rows];
        for (r, row) in out.iter_mut().enumerate() {
            for (c, v) in self.row(r) {
                row[c] = v;
            }
        }
        out
    }
}

/// A dense vector, or one rank's block of a distributed vector.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DenseVector {
    pub values: Vec<f64>,
    /// Global index of `values[0]` when used as a distributed block.
    pub global_offset: usize,
}

impl DenseVector {
    pub fn new(values: Vec<f64>) -> Self {
        DenseVector {
            values,
            global_offset: 0,
        }
    }

    pub fn block(values: Vec<f64>, global_offset: usize) -> Self {
        DenseVector {
            values,
            global_offset,
        }
    }

    pub fn zeros(n: usize) -> Self {
        Self::new(vec![0.0; n])
    }

    pub fn global_range(&self) -> Range<usize> {
        self.global_offset..self.global_offset + self.values.len()
    }
}

impl Deref for DenseVector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.values
    }
}

impl DerefMut for DenseVector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }
}

impl From<Vec<f64>> for DenseVector {
    fn from(values: Vec<f64>) -> Self {
        DenseVector::new(values)
    }
}

/// Grid of a 7-point Laplacian with homogeneous Dirichlet boundaries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Poisson3DSpec {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
}

impl Poisson3DSpec {
    pub fn new(nx: usize, ny: usize, nz: usize) -> Self {
        Poisson3DSpec { nx, ny, nz }
    }

    pub fn order(&self) -> Result<usize, LinalgError> {
        if self.nx == 0 || self.ny == 0 || self.nz == 0 {
            return Err(LinalgError::EmptyGrid);
        }
        self.nx
            .checked_mul(self.ny)
            .and_then(|v| v.checked_mul(self.nz))
            .ok_or(LinalgError::Overflow)
    }
}

/// 7-point Laplacian (diagonal 6, −1 per existing neighbour) and an
/// all-ones right-hand side.
pub fn build_poisson3d(spec: Poisson3DSpec) -> Result<(CsrMatrix, DenseVector), LinalgError> {
    let n = spec.order()?;
    let (nx, ny, nz) = (spec.nx, spec.ny, spec.nz);
    let plane = nx * ny;
    n.checked_mul(7).ok_or(LinalgError::Overflow)?;
    let mut row_offsets = Vec::with_capacity(n + 1);
    let mut col_indices = Vec::with_capacity(7 * n);
    let mut values = Vec::with_capacity(7 * n);
    row_offsets.push(0);
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                let id = i + nx * (j + ny * k);
                // Ascending column order.
                let mut push = |c: usize, v: f64| {
                    col_indices.push(c);
                    values.push(v);
                };
                if k > 0 {
                    push(id - plane, -1.0);
                }
                if j > 0 {
                    push(id - nx, -1.0);
                }
                if i > 0 {
                    push(id - 1, -1.0);
                }
                push(id, 6.0);
                if i + 1 < nx {
                    push(id + 1, -1.0);
                }
                if j + 1 < ny {
                    push(id + nx, -1.0);
                }
                if k + 1 < nz {
                    push(id + plane, -1.0);
                }
                row_offsets.push(values.len());
            }
        }
    }
    let a = CsrMatrix {
        n_rows: n,
        n_cols: n,
        row_offsets,
        col_indices,
        values,
    };
    Ok((a, DenseVector::new(vec![1.0; n])))
}

fn check_len(expected: usize, got: usize) -> Result<(), LinalgError> {
    if expected == got {
        Ok(())
    } else {
        Err(LinalgError::LengthMismatch { expected, got })
    }
}

/// `y = A x`, summing each row left to right in storage order.
pub fn spmv(a: &CsrMatrix, x: &[f64]) -> Result<Vec<f64>, LinalgError> {
    check_len(a.n_cols, x.len())?;
    Ok((0..a.n_rows)
        .map(|r| a.row(r).fold(0.0, |acc, (c, v)| acc + v * x[c]))
        .collect())
}

pub fn frobenius_norm(a: &CsrMatrix) -> f64 {
    local_frobenius_sq(a).sqrt()
}

pub(crate) fn local_frobenius_sq(a: &CsrMatrix) -> f64 {
    a.values.iter().map(|v| v * v).sum()
}

pub fn dot(u: &[f64], v: &[f64]) -> Result<f64, LinalgError> {
    check_len(u.len(), v.len())?;
    Ok(u.iter().zip(v).fold(0.0, |acc, (a, b)| acc + a * b))
}

pub fn norm2(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |acc, a| acc + a * a).sqrt()
}

/// `alpha·x + y`.
pub fn axpy(alpha: f64, x: &[f64], y: &[f64]) -> Result<Vec<f64>, LinalgError> {
    check_len(x.len(), y.len())?;
    Ok(x.iter().zip(y).map(|(a, b)| alpha * a + b).collect())
}

/// In-place `y += alpha·x`.
pub fn axpy_in_place(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Contiguous row ranges; the first `n_rows % n_ranks` ranks get one
/// extra row.
pub fn partition_rows(n_rows: usize, n_ranks: usize) -> Result<Vec<Range<usize>>, LinalgError> {
    if n_ranks == 0 {
        return Err(LinalgError::ZeroRanks);
    }
    let base = n_rows / n_ranks;
    let extra = n_rows % n_ranks;
    let mut start = 0;
    Ok((0..n_ranks)
        .map(|r| {
            let len = base + usize::from(r < extra);
            let range = start..start + len;
            start += len;
            range
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn poisson_single_cell() {
        let (a, b) = build_poisson3d(Poisson3DSpec::new(1, 1, 1)).unwrap();
        assert_eq!(a.to_dense(), vec![vec![6.0]]);
        assert_eq!(b.values, vec![1.0]);
    }

    #[test]
    fn poisson_cube_corners() {
        let (a, _) = build_poisson3d(Poisson3DSpec::new(2, 2, 2)).unwrap();
        assert_eq!(a.n_rows(), 8);
        assert_eq!(a.nnz(), 32);
        for r in 0..8 {
            let row: Vec<_> = a.row(r).collect();
            assert_eq!(row.len(), 4);
            assert_eq!(a.get(r, r), 6.0);
            assert_eq!(row.iter().filter(|(_, v)| *v == -1.0).count(), 3);
        }
    }

    #[test]
    fn poisson_chain() {
        let (a, _) = build_poisson3d(Poisson3DSpec::new(3, 1, 1)).unwrap();
        assert_eq!(a.nnz(), 7);
        assert_eq!(
            a.to_dense(),
            vec![
                vec![6.0, -1.0, 0.0],
                vec![-1.0, 6.0, -1.0],
                vec![0.0, -1.0, 6.0]
            ]
        );
        assert_eq!(spmv(&a, &[1.0, 1.0, 1.0]).unwrap(), vec![5.0, 4.0, 5.0]);
    }

    #[test]
    fn poisson_rejects_empty_and_overflow() {
        assert_eq!(
            build_poisson3d(Poisson3DSpec::new(0, 2, 2)).unwrap_err(),
            LinalgError::EmptyGrid
        );
        assert_eq!(
            build_poisson3d(Poisson3DSpec::new(usize::MAX, 2, 2)).unwrap_err(),
            LinalgError::Overflow
        );
    }

    #[test]
    fn spmv_small_cases() {
        assert_eq!(
            spmv(&CsrMatrix::identity(3), &[1.0, 2.0, 3.0]).unwrap(),
            vec![1.0, 2.0, 3.0]
        );
        assert_eq!(
            spmv(&CsrMatrix::diagonal(&[2.0, 3.0]), &[1.0, 1.0]).unwrap(),
            vec![2.0, 3.0]
        );
        assert!(matches!(
            spmv(&CsrMatrix::identity(3), &[1.0]),
            Err(LinalgError::LengthMismatch {
                expected: 3,
                got: 1
            })
        ));
    }

    #[test]
    fn frobenius_cases() {
        assert_eq!(frobenius_norm(&CsrMatrix::identity(3)), 3f64.sqrt());
        assert_eq!(frobenius_norm(&CsrMatrix::diagonal(&[3.0, 4.0])), 5.0);
        assert_eq!(
            frobenius_norm(&CsrMatrix::new(2, 2, vec![0, 0, 0], vec![], vec![]).unwrap()),
            0.0
        );
    }

    #[test]
    fn dot_norm_axpy() {
        assert_eq!(dot(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert_eq!(norm2(&[3.0, 4.0]), 5.0);
        let v = [1.0, 2.0, 2.0];
        assert_eq!(dot(&v, &v).unwrap(), 9.0);
        assert_eq!(norm2(&v).powi(2), 9.0);
        assert!(dot(&[1.0], &[1.0, 2.0]).is_err());
        assert_eq!(axpy(0.0, &[5.0, 6.0], &[2.0, 3.0]).unwrap(), vec![2.0, 3.0]);
        assert_eq!(axpy(1.0, &[1.0, 1.0], &[2.0, 3.0]).unwrap(), vec![3.0, 4.0]);
        assert_eq!(
            axpy(-2.0, &[1.0, 0.0], &[2.0, 5.0]).unwrap(),
            vec![0.0, 5.0]
        );
        assert!(axpy(1.0, &[1.0], &[]).is_err());
    }

    #[test]
    fn partition_cases() {
        assert_eq!(partition_rows(10, 1).unwrap(), vec![0..10]);
        assert_eq!(partition_rows(10, 3).unwrap(), vec![0..4, 4..7, 7..10]);
        assert_eq!(
            partition_rows(4, 8).unwrap(),
            vec![0..1, 1..2, 2..3, 3..4, 4..4, 4..4, 4..4, 4..4]
        );
        assert_eq!(partition_rows(4, 0).unwrap_err(), LinalgError::ZeroRanks);
    }

    #[test]
    fn csr_validation() {
        assert!(CsrMatrix::new(1, 2, vec![0, 2], vec![1, 0], vec![1.0, 1.0]).is_err());
        assert!(CsrMatrix::new(1, 2, vec![0, 1], vec![2], vec![1.0]).is_err());
        assert!(CsrMatrix::new(1, 2, vec![1, 1], vec![], vec![]).is_err());
        assert!(CsrMatrix::new(2, 2, vec![0, 1, 2], vec![0, 1], vec![1.0, 1.0]).is_ok());
    }

    #[test]
    fn row_block_keeps_global_columns() {
        let (a, _) = build_poisson3d(Poisson3DSpec::new(3, 1, 1)).unwrap();
        let blk = a.row_block(1..3);
        assert_eq!(blk.n_rows(), 2);
        assert_eq!(blk.n_cols(), 3);
        assert_eq!(
            blk.to_dense(),
            vec![vec![-1.0, 6.0, -1.0], vec![0.0, -1.0, 6.0]]
        );
    }
}

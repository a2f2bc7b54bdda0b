//! Compressed sparse row matrices over f64.
//!
//! Just enough sparse support for symmetric-normalized adjacencies: CSR
//! storage with strictly increasing column indices per row, no explicit
//! zeros, and dense right-multiplication in both plain and transposed form.

use ndarray::Array2;

/// CSR matrix. `indptr` has `rows + 1` entries; row `i` occupies
/// `indices[indptr[i]..indptr[i+1]]`, sorted strictly increasing.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    rows: usize,
    cols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    data: Vec<f64>,
}

impl CsrMatrix {
    /// Builds from (row, col, value) triplets. Triplets may arrive in any
    /// order; duplicates are summed and exact zeros are dropped.
    pub fn from_triplets(rows: usize, cols: usize, triplets: &[(usize, usize, f64)]) -> Self {
        let mut sorted: Vec<(usize, usize, f64)> = triplets.to_vec();
        sorted.sort_by_key(|&(r, c, _)| (r, c));
        let mut indptr = vec![0usize; rows + 1];
        let mut indices = Vec::with_capacity(sorted.len());
        let mut data: Vec<f64> = Vec::with_capacity(sorted.len());
        for &(r, c, v) in &sorted {
            assert!(r < rows && c < cols, "triplet ({r}, {c}) out of bounds");
            if let (Some(&last_c), true) = (indices.last(), indptr[r + 1] > 0) {
                // Same row as the previous triplet and same column: merge.
                if indptr[r + 1] == indices.len() && last_c == c {
                    *data.last_mut().unwrap() += v;
                    continue;
                }
            }
            if v == 0.0 {
                continue;
            }
            indices.push(c);
            data.push(v);
            indptr[r + 1] = indices.len();
        }
        // Rows without entries inherit the previous offset.
        for i in 1..=rows {
            if indptr[i] < indptr[i - 1] {
                indptr[i] = indptr[i - 1];
            }
        }
        // Merged duplicates may have produced zeros; squeeze them out.
        let mut m = CsrMatrix { rows, cols, indptr, indices, data };
        m.drop_zeros();
        m
    }

    /// Builds directly from validated CSR parts.
    pub fn from_parts(
        rows: usize,
        cols: usize,
        indptr: Vec<usize>,
        indices: Vec<usize>,
        data: Vec<f64>,
    ) -> Self {
        assert_eq!(indptr.len(), rows + 1, "indptr length mismatch");
        assert_eq!(indices.len(), data.len(), "indices/data length mismatch");
        assert_eq!(*indptr.last().unwrap(), indices.len(), "indptr tail mismatch");
        for i in 0..rows {
            let row = &indices[indptr[i]..indptr[i + 1]];
            for w in row.windows(2) {
                assert!(w[0] < w[1], "row {i}: column indices not strictly increasing");
            }
            for &c in row {
                assert!(c < cols, "row {i}: column {c} out of bounds");
            }
        }
        assert!(data.iter().all(|v| *v != 0.0), "explicit zero stored");
        CsrMatrix { rows, cols, indptr, indices, data }
    }

    fn drop_zeros(&mut self) {
        if self.data.iter().all(|v| *v != 0.0) {
            return;
        }
        let mut indptr = vec![0usize; self.rows + 1];
        let mut indices = Vec::with_capacity(self.indices.len());
        let mut data = Vec::with_capacity(self.data.len());
        for r in 0..self.rows {
            for k in self.indptr[r]..self.indptr[r + 1] {
                if self.data[k] != 0.0 {
                    indices.push(self.indices[k]);
                    data.push(self.data[k]);
                }
            }
            indptr[r + 1] = indices.len();
        }
        self.indptr = indptr;
        self.indices = indices;
        self.data = data;
    }

    #[must_use]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[must_use]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[must_use]
    pub fn nnz(&self) -> usize {
        self.data.len()
    }

    /// Iterates the (col, value) entries of one row.
    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let lo = self.indptr[i];
        let hi = self.indptr[i + 1];
        self.indices[lo..hi].iter().copied().zip(self.data[lo..hi].iter().copied())
    }

    /// Value at (i, j), zero if absent.
    #[must_use]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        let lo = self.indptr[i];
        let hi = self.indptr[i + 1];
        match self.indices[lo..hi].binary_search(&j) {
            Ok(k) => self.data[lo + k],
            Err(_) => 0.0,
        }
    }

    /// Dense product `self * rhs`.
    #[must_use]
    pub fn matmul_dense(&self, rhs: &Array2<f64>) -> Array2<f64> {
        assert_eq!(self.cols, rhs.nrows(), "spmm shape mismatch");
        let n = rhs.ncols();
        let mut out = Array2::<f64>::zeros((self.rows, n));
        for i in 0..self.rows {
            for k in self.indptr[i]..self.indptr[i + 1] {
                let j = self.indices[k];
                let w = self.data[k];
                for c in 0..n {
                    out[(i, c)] += w * rhs[(j, c)];
                }
            }
        }
        out
    }

    /// Dense product `self^T * rhs`, without materializing the transpose.
    #[must_use]
    pub fn transpose_matmul_dense(&self, rhs: &Array2<f64>) -> Array2<f64> {
        assert_eq!(self.rows, rhs.nrows(), "spmm^T shape mismatch");
        let n = rhs.ncols();
        let mut out = Array2::<f64>::zeros((self.cols, n));
        for i in 0..self.rows {
            for k in self.indptr[i]..self.indptr[i + 1] {
                let j = self.indices[k];
                let w = self.data[k];
                for c in 0..n {
                    out[(j, c)] += w * rhs[(i, c)];
                }
            }
        }
        out
    }

    /// Dense copy, for tests and small-scale inspection.
    #[must_use]
    pub fn to_dense(&self) -> Array2<f64> {
        let mut out = Array2::<f64>::zeros((self.rows, self.cols));
        for i in 0..self.rows {
            for (j, v) in self.row(i) {
                out[(i, j)] = v;
            }
        }
        out
    }

    /// True when the matrix equals its transpose exactly.
    #[must_use]
    pub fn is_symmetric(&self) -> bool {
        if self.rows != self.cols {
            return false;
        }
        for i in 0..self.rows {
            for (j, v) in self.row(i) {
                if self.get(j, i) != v {
                    return false;
                }
            }
        }
        true
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn triplets_sort_merge_and_drop_zeros() {
        let m = CsrMatrix::from_triplets(
            2,
            3,
            &[(1, 2, 4.0), (0, 1, 1.0), (0, 1, 2.0), (1, 0, 0.0)],
        );
        assert_eq!(m.nnz(), 2);
        assert_eq!(m.get(0, 1), 3.0);
        assert_eq!(m.get(1, 2), 4.0);
        assert_eq!(m.get(1, 0), 0.0);
    }

    #[test]
    fn matmul_matches_dense() {
        let m = CsrMatrix::from_triplets(3, 2, &[(0, 0, 2.0), (1, 1, -1.0), (2, 0, 0.5)]);
        let x = array![[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]];
        let got = m.matmul_dense(&x);
        let want = m.to_dense().dot(&x);
        assert_eq!(got, want);
        let g = array![[1.0, 0.0], [0.0, 1.0], [2.0, 2.0]];
        let got_t = m.transpose_matmul_dense(&g);
        let want_t = m.to_dense().t().dot(&g);
        assert_eq!(got_t, want_t);
    }

    #[test]
    fn symmetry_check() {
        let sym = CsrMatrix::from_triplets(2, 2, &[(0, 1, 0.5), (1, 0, 0.5)]);
        assert!(sym.is_symmetric());
        let asym = CsrMatrix::from_triplets(2, 2, &[(0, 1, 0.5)]);
        assert!(!asym.is_symmetric());
    }

    #[test]
    #[should_panic(expected = "strictly increasing")]
    fn from_parts_rejects_unsorted_row() {
        let _ = CsrMatrix::from_parts(1, 3, vec![0, 2], vec![2, 1], vec![1.0, 1.0]);
    }
}

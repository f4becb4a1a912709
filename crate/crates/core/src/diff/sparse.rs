//! Unweighted sparse matrices in CSR form, stored in both orientations so
//! forward and transposed products share one deterministic code path.

use ndarray::{Array2, ArrayView2};

#[derive(Clone, Debug)]
pub struct SparseMatrix {
    n_rows: usize,
    n_cols: usize,
    fwd_ptr: Vec<usize>,
    fwd_idx: Vec<usize>,
    bwd_ptr: Vec<usize>,
    bwd_idx: Vec<usize>,
}

impl SparseMatrix {
    /// Build from 0/1 entries given as `(row, col)` pairs. Duplicates are not
    /// expected and would double-count.
    pub fn from_edges(
        n_rows: usize,
        n_cols: usize,
        entries: impl Iterator<Item = (usize, usize)>,
    ) -> Self {
        let mut fwd: Vec<(usize, usize)> = entries.collect();
        fwd.sort_unstable();
        let mut bwd: Vec<(usize, usize)> = fwd.iter().map(|&(r, c)| (c, r)).collect();
        bwd.sort_unstable();
        let build = |n: usize, list: &[(usize, usize)]| {
            let mut ptr = vec![0usize; n + 1];
            for &(r, _) in list {
                ptr[r + 1] += 1;
            }
            for i in 0..n {
                ptr[i + 1] += ptr[i];
            }
            (ptr, list.iter().map(|&(_, c)| c).collect::<Vec<_>>())
        };
        let (fwd_ptr, fwd_idx) = build(n_rows, &fwd);
        let (bwd_ptr, bwd_idx) = build(n_cols, &bwd);
        Self { n_rows, n_cols, fwd_ptr, fwd_idx, bwd_ptr, bwd_idx }
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn nnz(&self) -> usize {
        self.fwd_idx.len()
    }

    /// `y = M x` (or `y = M^T x` with `transpose`); row sums over the stored
    /// column indices in ascending order, so results are bit-reproducible.
    pub fn matmul(&self, x: &ArrayView2<f64>, transpose: bool) -> Array2<f64> {
        let (out_rows, in_rows, ptr, idx) = if transpose {
            (self.n_cols, self.n_rows, &self.bwd_ptr, &self.bwd_idx)
        } else {
            (self.n_rows, self.n_cols, &self.fwd_ptr, &self.fwd_idx)
        };
        assert_eq!(x.nrows(), in_rows, "sparse matmul dimension mismatch");
        let f = x.ncols();
        let mut y = Array2::zeros((out_rows, f));
        for r in 0..out_rows {
            let mut acc = y.row_mut(r);
            for &c in &idx[ptr[r]..ptr[r + 1]] {
                let src = x.row(c);
                for k in 0..f {
                    acc[k] += src[k];
                }
            }
        }
        y
    }

    pub fn to_dense(&self) -> Array2<f64> {
        let mut a = Array2::zeros((self.n_rows, self.n_cols));
        for r in 0..self.n_rows {
            for &c in &self.fwd_idx[self.fwd_ptr[r]..self.fwd_ptr[r + 1]] {
                a[[r, c]] = 1.0;
            }
        }
        a
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn matmul_matches_dense() {
        let m = SparseMatrix::from_edges(3, 2, [(0, 1), (2, 0), (2, 1)].into_iter());
        let x = array![[1.0, 2.0], [3.0, 4.0]];
        let y = m.matmul(&x.view(), false);
        assert_eq!(y, m.to_dense().dot(&x));
        let g = array![[1.0, 0.5], [0.0, 1.0], [2.0, 2.0]];
        let yt = m.matmul(&g.view(), true);
        assert_eq!(yt, m.to_dense().t().dot(&g));
    }
}

//! Compressed sparse rows, reverse Cuthill-McKee ordering and an envelope
//! (skyline) Cholesky factorization for the FEM systems.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct CsrMatrix {
    pub n_rows: usize,
    pub n_cols: usize,
    pub indptr: Vec<usize>,
    pub indices: Vec<usize>,
    pub values: Vec<f64>,
}

impl CsrMatrix {
    /// Builds from triplets, summing duplicates. Columns are sorted within a row.
    pub fn from_triplets(n_rows: usize, n_cols: usize, triplets: &[(usize, usize, f64)]) -> Self {
        let mut counts = vec![0usize; n_rows + 1];
        for &(r, _, _) in triplets {
            counts[r + 1] += 1;
        }
        for i in 0..n_rows {
            counts[i + 1] += counts[i];
        }
        let mut cols = vec![0usize; triplets.len()];
        let mut vals = vec![0.0; triplets.len()];
        let mut next = counts.clone();
        for &(r, c, v) in triplets {
            cols[next[r]] = c;
            vals[next[r]] = v;
            next[r] += 1;
        }
        let mut indptr = Vec::with_capacity(n_rows + 1);
        let mut indices = Vec::with_capacity(triplets.len());
        let mut values = Vec::with_capacity(triplets.len());
        indptr.push(0);
        let mut row: Vec<(usize, f64)> = Vec::new();
        for r in 0..n_rows {
            row.clear();
            row.extend((counts[r]..counts[r + 1]).map(|k| (cols[k], vals[k])));
            row.sort_by_key(|&(c, _)| c);
            let mut k = 0;
            while k < row.len() {
                let c = row[k].0;
                let mut v = 0.0;
                while k < row.len() && row[k].0 == c {
                    v += row[k].1;
                    k += 1;
                }
                indices.push(c);
                values.push(v);
            }
            indptr.push(indices.len());
        }
        Self {
            n_rows,
            n_cols,
            indptr,
            indices,
            values,
        }
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        (self.indptr[r]..self.indptr[r + 1]).map(move |k| (self.indices[k], self.values[k]))
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        let lo = self.indptr[r];
        let hi = self.indptr[r + 1];
        match self.indices[lo..hi].binary_search(&c) {
            Ok(k) => self.values[lo + k],
            Err(_) => 0.0,
        }
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.n_cols);
        (0..self.n_rows)
            .map(|r| self.row(r).map(|(c, v)| v * x[c]).sum())
            .collect()
    }

    /// `selfᵀ x`.
    pub fn tr_mul_vec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.n_rows);
        let mut out = vec![0.0; self.n_cols];
        for (r, &xr) in x.iter().enumerate() {
            for (c, v) in self.row(r) {
                out[c] += v * xr;
            }
        }
        out
    }

    /// `self · h` for a dense column-major `h`.
    pub fn mul_dense(&self, h: &DMatrix<f64>) -> DMatrix<f64> {
        assert_eq!(h.nrows(), self.n_cols);
        let mut out = DMatrix::zeros(self.n_rows, h.ncols());
        for j in 0..h.ncols() {
            let src = h.column(j);
            let src = src.as_slice();
            let mut dst = out.column_mut(j);
            let dst = dst.as_mut_slice();
            for r in 0..self.n_rows {
                let mut acc = 0.0;
                for k in self.indptr[r]..self.indptr[r + 1] {
                    acc += self.values[k] * src[self.indices[k]];
                }
                dst[r] = acc;
            }
        }
        out
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.n_rows, self.n_cols);
        for r in 0..self.n_rows {
            for (c, v) in self.row(r) {
                m[(r, c)] += v;
            }
        }
        m
    }

    pub fn transpose(&self) -> CsrMatrix {
        let trip: Vec<_> = (0..self.n_rows)
            .flat_map(|r| self.row(r).map(move |(c, v)| (c, r, v)))
            .collect();
        CsrMatrix::from_triplets(self.n_cols, self.n_rows, &trip)
    }
}

/// Reverse Cuthill-McKee permutation of an undirected graph given as
/// adjacency lists. `perm[new] = old`.
pub fn reverse_cuthill_mckee(adj: &[Vec<usize>]) -> Vec<usize> {
    let n = adj.len();
    let mut visited = vec![false; n];
    let mut order = Vec::with_capacity(n);
    let degree = |v: usize| adj[v].len();
    while order.len() < n {
        let start = (0..n)
            .filter(|&v| !visited[v])
            .min_by_key(|&v| (degree(v), v))
            .unwrap();
        let start = pseudo_peripheral(adj, start);
        let mut queue = VecDeque::new();
        visited[start] = true;
        queue.push_back(start);
        while let Some(v) = queue.pop_front() {
            order.push(v);
            let mut nbrs: Vec<usize> = adj[v].iter().copied().filter(|&u| !visited[u]).collect();
            nbrs.sort_by_key(|&u| (degree(u), u));
            for u in nbrs {
                visited[u] = true;
                queue.push_back(u);
            }
        }
    }
    order.reverse();
    order
}

fn pseudo_peripheral(adj: &[Vec<usize>], start: usize) -> usize {
    let mut node = start;
    let mut ecc = 0;
    for _ in 0..8 {
        let levels = bfs_levels(adj, node);
        let max_level = levels.iter().filter_map(|&l| l).max().unwrap_or(0);
        if max_level <= ecc && ecc > 0 {
            break;
        }
        ecc = max_level;
        node = (0..adj.len())
            .filter(|&v| levels[v] == Some(max_level))
            .min_by_key(|&v| (adj[v].len(), v))
            .unwrap();
    }
    node
}

fn bfs_levels(adj: &[Vec<usize>], start: usize) -> Vec<Option<usize>> {
    let mut level = vec![None; adj.len()];
    let mut q = VecDeque::new();
    level[start] = Some(0);
    q.push_back(start);
    while let Some(v) = q.pop_front() {
        let l = level[v].unwrap();
        for &u in &adj[v] {
            if level[u].is_none() {
                level[u] = Some(l + 1);
                q.push_back(u);
            }
        }
    }
    level
}

/// Lower-triangular envelope storage: row `i` keeps columns `first[i]..=i`.
#[derive(Clone, Debug)]
pub struct EnvelopeMatrix {
    n: usize,
    first: Vec<usize>,
    offset: Vec<usize>,
    data: Vec<f64>,
}

impl EnvelopeMatrix {
    /// Envelope profile from the lower-triangle sparsity (`first[i] <= i`).
    pub fn with_profile(first: Vec<usize>) -> Self {
        let n = first.len();
        let mut offset = Vec::with_capacity(n + 1);
        offset.push(0);
        for (i, &f) in first.iter().enumerate() {
            debug_assert!(f <= i);
            offset.push(offset[i] + (i - f + 1));
        }
        let data = vec![0.0; offset[n]];
        Self {
            n,
            first,
            offset,
            data,
        }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn stored(&self) -> usize {
        self.data.len()
    }

    pub fn clear(&mut self) {
        self.data.iter_mut().for_each(|v| *v = 0.0);
    }

    /// Adds `v` at `(i, j)` with `j <= i`; the entry must lie in the envelope.
    #[inline]
    pub fn add_lower(&mut self, i: usize, j: usize, v: f64) {
        debug_assert!(j <= i && j >= self.first[i]);
        let k = self.offset[i] + (j - self.first[i]);
        self.data[k] += v;
    }

    pub fn get_lower(&self, i: usize, j: usize) -> f64 {
        if j < self.first[i] {
            0.0
        } else {
            self.data[self.offset[i] + (j - self.first[i])]
        }
    }

    /// `b − A x` for the symmetric matrix stored by its lower envelope,
    /// accumulated in compensated (twice-working) precision.
    pub fn residual_compensated(&self, x: &[f64], b: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.n);
        assert_eq!(b.len(), self.n);
        let mut hi = b.to_vec();
        let mut lo = vec![0.0; self.n];
        let mut acc = |k: usize, a: f64, v: f64| {
            let p = -a * v;
            let e = (-a).mul_add(v, -p);
            let s = hi[k] + p;
            let z = s - hi[k];
            let t = (hi[k] - (s - z)) + (p - z);
            hi[k] = s;
            lo[k] += t + e;
        };
        for i in 0..self.n {
            let fi = self.first[i];
            let oi = self.offset[i];
            for j in fi..i {
                let a = self.data[oi + (j - fi)];
                if a != 0.0 {
                    acc(i, a, x[j]);
                    acc(j, a, x[i]);
                }
            }
            acc(i, self.data[oi + (i - fi)], x[i]);
        }
        hi.iter().zip(&lo).map(|(h, l)| h + l).collect()
    }

    /// In-place Cholesky `A = L Lᵀ`.
    pub fn factor(mut self) -> Result<EnvelopeCholesky> {
        for i in 0..self.n {
            let fi = self.first[i];
            let oi = self.offset[i];
            for j in fi..i {
                let fj = self.first[j];
                let oj = self.offset[j];
                let start = fi.max(fj);
                let len = j - start;
                let ri = &self.data[oi + (start - fi)..oi + (start - fi) + len];
                let rj = &self.data[oj + (start - fj)..oj + (start - fj) + len];
                let dot: f64 = dot(ri, rj);
                let djj = self.data[oj + (j - fj)];
                let k = oi + (j - fi);
                self.data[k] = (self.data[k] - dot) / djj;
            }
            let row = &self.data[oi..oi + (i - fi)];
            let d = self.data[oi + (i - fi)] - dot(row, row);
            if !(d > 0.0) || !d.is_finite() {
                return Err(Error::numerical(format!(
                    "matrix is not positive definite (pivot {i} = {d:e})"
                )));
            }
            self.data[oi + (i - fi)] = d.sqrt();
        }
        Ok(EnvelopeCholesky { l: self })
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    // Four accumulators let the compiler vectorize the reduction.
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        for k in 0..4 {
            acc[k] += a[4 * c + k] * b[4 * c + k];
        }
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for k in 4 * chunks..a.len() {
        s += a[k] * b[k];
    }
    s
}

/// Factor produced by [`EnvelopeMatrix::factor`].
#[derive(Clone, Debug)]
pub struct EnvelopeCholesky {
    l: EnvelopeMatrix,
}

impl EnvelopeCholesky {
    pub fn dim(&self) -> usize {
        self.l.n
    }

    /// Solves `A x = b` in place.
    pub fn solve_in_place(&self, b: &mut [f64]) {
        let l = &self.l;
        assert_eq!(b.len(), l.n);
        // Forward: L y = b (row oriented).
        for i in 0..l.n {
            let fi = l.first[i];
            let oi = l.offset[i];
            let row = &l.data[oi..oi + (i - fi)];
            let s = dot(row, &b[fi..i]);
            b[i] = (b[i] - s) / l.data[oi + (i - fi)];
        }
        // Backward: Lᵀ x = y (column sweep over stored rows).
        for i in (0..l.n).rev() {
            let fi = l.first[i];
            let oi = l.offset[i];
            b[i] /= l.data[oi + (i - fi)];
            let xi = b[i];
            let row = &l.data[oi..oi + (i - fi)];
            for (bj, &lij) in b[fi..i].iter_mut().zip(row) {
                *bj -= lij * xi;
            }
        }
    }

    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        let mut x = b.clone();
        self.solve_in_place(x.as_mut_slice());
        x
    }
}

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};

use crate::mesh::{dist, Mesh};
use crate::sparse::CsrMatrix;

/// Discrete gradient over element interfaces: one row per pair of elements
/// sharing an edge, `+w` on the lower element index and `−w` on the higher,
/// with `w` the interface length in mm.
#[derive(Clone, Debug, PartialEq)]
pub struct TvOperator {
    matrix: CsrMatrix,
    pairs: Vec<(usize, usize)>,
    weights: Vec<f64>,
}

pub fn build_tv_matrix(mesh: &Mesh) -> TvOperator {
    let mut owner: HashMap<(usize, usize), usize> = HashMap::new();
    let mut pairs: Vec<(usize, usize, f64)> = Vec::new();
    for (e, el) in mesh.elements.iter().enumerate() {
        for k in 0..3 {
            let (a, b) = (el[k], el[(k + 1) % 3]);
            let key = (a.min(b), a.max(b));
            match owner.remove(&key) {
                Some(other) => {
                    let w = dist(mesh.nodes[a], mesh.nodes[b]);
                    pairs.push((other.min(e), other.max(e), w));
                }
                None => {
                    owner.insert(key, e);
                }
            }
        }
    }
    pairs.sort_by(|x, y| (x.0, x.1).cmp(&(y.0, y.1)));
    TvOperator::from_pairs(mesh.n_elements(), pairs)
}

impl TvOperator {
    /// Operator from explicit `(i, j, weight)` interfaces, `i < j`.
    pub fn from_pairs(n_elements: usize, pairs: Vec<(usize, usize, f64)>) -> Self {
        let mut trip = Vec::with_capacity(2 * pairs.len());
        for (r, &(i, j, w)) in pairs.iter().enumerate() {
            trip.push((r, i, w));
            trip.push((r, j, -w));
        }
        Self {
            matrix: CsrMatrix::from_triplets(pairs.len(), n_elements, &trip),
            pairs: pairs.iter().map(|&(i, j, _)| (i, j)).collect(),
            weights: pairs.iter().map(|&(_, _, w)| w).collect(),
        }
    }

    pub fn matrix(&self) -> &CsrMatrix {
        &self.matrix
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn n_rows(&self) -> usize {
        self.pairs.len()
    }

    pub fn n_elements(&self) -> usize {
        self.matrix.n_cols
    }

    pub fn apply(&self, sigma: &DVector<f64>) -> DVector<f64> {
        DVector::from_vec(self.matrix.mul_vec(sigma.as_slice()))
    }

    /// `λ Σ_i sqrt((𝓛σ)_i² + γ)`.
    pub fn penalty(&self, sigma: &DVector<f64>, lambda: f64, gamma: f64) -> f64 {
        lambda * self.apply(sigma).iter().map(|g| (g * g + gamma).sqrt()).sum::<f64>()
    }

    /// Adds `c · 𝓛ᵀ diag(d) 𝓛` to the dense matrix `a`.
    pub(crate) fn add_weighted_gram(&self, a: &mut DMatrix<f64>, d: &[f64], c: f64) {
        for (r, &(i, j)) in self.pairs.iter().enumerate() {
            let w = self.weights[r];
            let v = c * d[r] * w * w;
            a[(i, i)] += v;
            a[(j, j)] += v;
            a[(i, j)] -= v;
            a[(j, i)] -= v;
        }
    }
}

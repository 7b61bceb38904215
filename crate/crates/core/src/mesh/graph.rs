use nalgebra::DMatrix;

use super::Mesh;
use crate::sparse::CsrMatrix;

/// Undirected graph whose nodes are mesh elements. Edges are stored once
/// with `i < j`, sorted.
#[derive(Clone, Debug, PartialEq)]
pub struct ElementGraph {
    pub n_nodes: usize,
    pub edges: Vec<(usize, usize)>,
}

impl ElementGraph {
    /// Builds from an arbitrary edge list, dropping self loops and duplicates.
    pub fn from_edges(n_nodes: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let mut e: Vec<(usize, usize)> = edges
            .into_iter()
            .filter(|(a, b)| a != b)
            .map(|(a, b)| (a.min(b), a.max(b)))
            .collect();
        assert!(e.iter().all(|&(_, b)| b < n_nodes), "edge endpoint out of range");
        e.sort_unstable();
        e.dedup();
        Self { n_nodes, edges: e }
    }

    pub fn degrees(&self) -> Vec<usize> {
        let mut d = vec![0; self.n_nodes];
        for &(a, b) in &self.edges {
            d[a] += 1;
            d[b] += 1;
        }
        d
    }

    pub fn neighbors(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.n_nodes];
        for &(a, b) in &self.edges {
            adj[a].push(b);
            adj[b].push(a);
        }
        adj
    }

    /// Stable identifier of the edge set.
    pub fn fingerprint(&self) -> String {
        let mut buf = Vec::with_capacity(8 + self.edges.len() * 8);
        crate::binio::put_i32s(&mut buf, [self.n_nodes]);
        crate::binio::put_i32s(&mut buf, self.edges.iter().flat_map(|&(a, b)| [a, b]));
        crate::binio::sha256_hex(&buf)
    }
}

/// Elements `i != j` are adjacent when they share at least one mesh node.
pub fn element_adjacency(mesh: &Mesh) -> ElementGraph {
    let mut incident = vec![Vec::new(); mesh.n_nodes()];
    for (e, el) in mesh.elements.iter().enumerate() {
        for &v in el {
            incident[v].push(e);
        }
    }
    let mut edges = Vec::new();
    for elems in &incident {
        for (k, &a) in elems.iter().enumerate() {
            for &b in &elems[k + 1..] {
                edges.push((a, b));
            }
        }
    }
    ElementGraph::from_edges(mesh.n_elements(), edges)
}

/// Symmetrically normalized adjacency with self loops,
/// `D̃^{-1/2} (A + I) D̃^{-1/2}`.
#[derive(Clone, Debug, PartialEq)]
pub struct PropagationOperator {
    matrix: CsrMatrix,
    source: String,
}

impl PropagationOperator {
    pub fn matrix(&self) -> &CsrMatrix {
        &self.matrix
    }

    pub fn dim(&self) -> usize {
        self.matrix.n_rows
    }

    /// Fingerprint of the graph this operator was built from.
    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn apply(&self, h: &DMatrix<f64>) -> DMatrix<f64> {
        self.matrix.mul_dense(h)
    }

    /// Operator under the node relabelling `perm[new] = old`.
    pub fn permuted(&self, perm: &[usize]) -> PropagationOperator {
        let n = self.dim();
        let mut inv = vec![0; n];
        for (new, &old) in perm.iter().enumerate() {
            inv[old] = new;
        }
        let trip: Vec<_> = (0..n)
            .flat_map(|r| {
                let inv = &inv;
                self.matrix.row(r).map(move |(c, v)| (inv[r], inv[c], v))
            })
            .collect();
        PropagationOperator {
            matrix: CsrMatrix::from_triplets(n, n, &trip),
            source: format!("{}:permuted", self.source),
        }
    }
}

pub fn normalized_adjacency(graph: &ElementGraph) -> PropagationOperator {
    let n = graph.n_nodes;
    let deg: Vec<f64> = graph.degrees().iter().map(|&d| (d + 1) as f64).collect();
    let mut trip = Vec::with_capacity(n + 2 * graph.edges.len());
    for (i, &d) in deg.iter().enumerate() {
        trip.push((i, i, 1.0 / d));
    }
    for &(a, b) in &graph.edges {
        let v = 1.0 / (deg[a] * deg[b]).sqrt();
        trip.push((a, b, v));
        trip.push((b, a, v));
    }
    PropagationOperator {
        matrix: CsrMatrix::from_triplets(n, n, &trip),
        source: graph.fingerprint(),
    }
}

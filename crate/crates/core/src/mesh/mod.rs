//! Triangular meshes with boundary electrodes, and the element graph the
//! graph convolutional layers run on.

mod boundary;
mod generate;
mod graph;
mod io;

pub use boundary::{polygon_area, ArcLength, BoundaryCurve, CHEST_COS, CHEST_SIN};
pub use generate::{generate_boundary_mesh, generate_disk_mesh, MeshSpec, DEFAULT_EDGE_REFINEMENT};
pub use graph::{element_adjacency, normalized_adjacency, ElementGraph, PropagationOperator};
pub use io::MeshHeader;
pub(crate) use generate::point_in_polygon;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape tag and generator parameters, stored alongside the mesh.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainDescriptor {
    pub curve: BoundaryCurve,
    pub n_electrodes: usize,
    /// mm
    pub electrode_width: f64,
    /// Electrode centres as arc length from the curve origin (mm).
    pub electrode_centers: Vec<f64>,
    /// Electrode height (mm), used as the thickness of the 2D slab.
    pub electrode_height: Option<f64>,
    /// Boundary grading used by the generator (see [`MeshSpec::edge_refinement`]).
    #[serde(default = "default_edge_refinement")]
    pub edge_refinement: f64,
    pub target_elements: usize,
    pub seed: u64,
}

/// One electrode: the boundary edges it covers, in boundary order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ElectrodeArc {
    pub edges: Vec<[usize; 2]>,
}

impl ElectrodeArc {
    /// Sum of the covered edge lengths (mm).
    pub fn length(&self, nodes: &[[f64; 2]]) -> f64 {
        self.edges.iter().map(|&[a, b]| dist(nodes[a], nodes[b])).sum()
    }
}

/// 2D triangulation (coordinates in mm) with counter-clockwise elements.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mesh {
    pub nodes: Vec<[f64; 2]>,
    pub elements: Vec<[usize; 3]>,
    /// Boundary edges in counter-clockwise traversal order.
    pub boundary_edges: Vec<[usize; 2]>,
    pub electrodes: Vec<ElectrodeArc>,
    pub domain: DomainDescriptor,
}

fn default_edge_refinement() -> f64 {
    DEFAULT_EDGE_REFINEMENT
}

pub(crate) fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (b[0] - a[0]).hypot(b[1] - a[1])
}

impl Mesh {
    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn n_elements(&self) -> usize {
        self.elements.len()
    }

    pub fn n_electrodes(&self) -> usize {
        self.electrodes.len()
    }

    /// Signed area of element `e` (mm²).
    pub fn element_area(&self, e: usize) -> f64 {
        let [a, b, c] = self.elements[e];
        let (p, q, r) = (self.nodes[a], self.nodes[b], self.nodes[c]);
        0.5 * ((q[0] - p[0]) * (r[1] - p[1]) - (r[0] - p[0]) * (q[1] - p[1]))
    }

    pub fn total_area(&self) -> f64 {
        (0..self.n_elements()).map(|e| self.element_area(e)).sum()
    }

    pub fn centroid(&self, e: usize) -> [f64; 2] {
        let [a, b, c] = self.elements[e];
        let (p, q, r) = (self.nodes[a], self.nodes[b], self.nodes[c]);
        [(p[0] + q[0] + r[0]) / 3.0, (p[1] + q[1] + r[1]) / 3.0]
    }

    pub fn centroids(&self) -> Vec<[f64; 2]> {
        (0..self.n_elements()).map(|e| self.centroid(e)).collect()
    }

    pub fn boundary_length(&self) -> f64 {
        self.boundary_edges
            .iter()
            .map(|&[a, b]| dist(self.nodes[a], self.nodes[b]))
            .sum()
    }

    /// Content hash over the canonical binary encoding.
    pub fn content_hash(&self) -> String {
        crate::binio::sha256_hex(&io::encode_blob(self))
    }

    /// Checks the structural invariants: positive element areas, every
    /// boundary edge owned by exactly one element, disjoint non-empty
    /// electrode arcs made of boundary edges.
    pub fn validate(&self) -> Result<()> {
        let n = self.n_nodes();
        for (e, el) in self.elements.iter().enumerate() {
            if el.iter().any(|&v| v >= n) {
                return Err(Error::Geometry(format!("element {e} references a missing node")));
            }
            if !(self.element_area(e) > 0.0) {
                return Err(Error::Geometry(format!("element {e} has non-positive area")));
            }
        }
        let mut edge_count = std::collections::HashMap::new();
        for el in &self.elements {
            for k in 0..3 {
                let (a, b) = (el[k], el[(k + 1) % 3]);
                *edge_count.entry((a.min(b), a.max(b))).or_insert(0usize) += 1;
            }
        }
        let mut free: Vec<(usize, usize)> = edge_count
            .iter()
            .filter(|(_, &c)| c == 1)
            .map(|(&k, _)| k)
            .collect();
        free.sort_unstable();
        let mut listed: Vec<(usize, usize)> =
            self.boundary_edges.iter().map(|&[a, b]| (a.min(b), a.max(b))).collect();
        listed.sort_unstable();
        if free != listed {
            return Err(Error::Geometry(
                "boundary edge list does not match the free edges of the triangulation".into(),
            ));
        }
        let mut seen = std::collections::HashSet::new();
        for (l, arc) in self.electrodes.iter().enumerate() {
            if arc.edges.is_empty() {
                return Err(Error::Geometry(format!("electrode {l} covers no boundary edge")));
            }
            for &[a, b] in &arc.edges {
                let key = (a.min(b), a.max(b));
                if listed.binary_search(&key).is_err() {
                    return Err(Error::Geometry(format!("electrode {l} edge is not on the boundary")));
                }
                if !seen.insert(key) {
                    return Err(Error::Geometry(format!("electrode {l} overlaps another electrode")));
                }
            }
        }
        Ok(())
    }
}

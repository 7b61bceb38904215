#![allow(dead_code)]

use std::f64::consts::PI;

use gcnm_core::mesh::{BoundaryCurve, DomainDescriptor, ElectrodeArc, Mesh};

/// Disk mesh with exact `L`-fold rotational symmetry: ring `j` carries
/// `L·j` nodes and electrode `ℓ` covers the `2·half_width` boundary edges
/// centred on angle `2πℓ/L`.
pub fn polar_disk(radius: f64, l: usize, rings: usize, half_width: usize) -> Mesh {
    let mut nodes = vec![[0.0, 0.0]];
    let mut ring_start = vec![0usize];
    for j in 1..=rings {
        ring_start.push(nodes.len());
        let r = radius * j as f64 / rings as f64;
        let n = l * j;
        for i in 0..n {
            let t = 2.0 * PI * i as f64 / n as f64;
            nodes.push([r * t.cos(), r * t.sin()]);
        }
    }
    let mut elements = Vec::new();
    for i in 0..l {
        elements.push([0, ring_start[1] + i, ring_start[1] + (i + 1) % l]);
    }
    for j in 1..rings {
        let (ni, no) = (l * j, l * (j + 1));
        let (si, so) = (ring_start[j], ring_start[j + 1]);
        let (mut a, mut b) = (0usize, 0usize);
        while a < ni || b < no {
            // Advance whichever ring's next node has the smaller angle;
            // compare (a+1)/ni with (b+1)/no exactly in integers.
            let advance_inner = b == no || (a < ni && (a + 1) * (j + 1) <= (b + 1) * j);
            if advance_inner {
                elements.push([si + a % ni, so + b % no, si + (a + 1) % ni]);
                a += 1;
            } else {
                elements.push([si + a % ni, so + b % no, so + (b + 1) % no]);
                b += 1;
            }
        }
    }
    let nb = l * rings;
    let sb = ring_start[rings];
    let boundary_edges: Vec<[usize; 2]> = (0..nb).map(|i| [sb + i, sb + (i + 1) % nb]).collect();
    let electrodes = (0..l)
        .map(|e| ElectrodeArc {
            edges: (0..2 * half_width)
                .map(|q| {
                    let i = (e * rings + nb + q - half_width) % nb;
                    boundary_edges[i]
                })
                .collect(),
        })
        .collect();
    let h = 2.0 * PI * radius / nb as f64;
    Mesh {
        nodes,
        elements,
        boundary_edges,
        electrodes,
        domain: DomainDescriptor {
            curve: BoundaryCurve::Circle { radius },
            n_electrodes: l,
            electrode_width: 2.0 * half_width as f64 * h,
            electrode_centers: (0..l).map(|e| 2.0 * PI * radius * e as f64 / l as f64).collect(),
            electrode_height: None,
            edge_refinement: 1.0,
            target_elements: l * rings * rings,
            seed: 0,
        },
    }
}

/// Index map of the rotation by one electrode pitch, via centroid matching.
pub fn rotation_map(mesh: &Mesh, l: usize) -> Vec<usize> {
    let c = mesh.centroids();
    let (s, co) = (2.0 * PI / l as f64).sin_cos();
    c.iter()
        .map(|p| {
            let q = [co * p[0] - s * p[1], s * p[0] + co * p[1]];
            let (best, d) = c
                .iter()
                .enumerate()
                .map(|(i, r)| (i, (r[0] - q[0]).hypot(r[1] - q[1])))
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .unwrap();
            assert!(d < 1e-8, "mesh is not rotationally symmetric");
            best
        })
        .collect()
}

use gcnm_core::mesh::{normalized_adjacency, ElementGraph, PropagationOperator};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Connected random graph: a path plus `extra` random chords.
pub fn random_operator(n: usize, extra: usize, seed: u64) -> PropagationOperator {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut edges: Vec<(usize, usize)> = (1..n).map(|i| (i - 1, i)).collect();
    for _ in 0..extra {
        edges.push((rng.random_range(0..n), rng.random_range(0..n)));
    }
    normalized_adjacency(&ElementGraph::from_edges(n, edges))
}

pub fn path_operator(n: usize) -> PropagationOperator {
    normalized_adjacency(&ElementGraph::from_edges(n, (1..n).map(|i| (i - 1, i))))
}

/// Central difference of `f` with respect to `x[i]`.
pub fn central_difference(x: &mut [f64], i: usize, h: f64, mut f: impl FnMut(&[f64]) -> f64) -> f64 {
    let x0 = x[i];
    x[i] = x0 + h;
    let fp = f(x);
    x[i] = x0 - h;
    let fm = f(x);
    x[i] = x0;
    (fp - fm) / (2.0 * h)
}

/// `max |a − b| / max(|b|, 0.01·max|b|)` over entries.
pub fn max_relative_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let scale = b.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if scale == 0.0 {
        return a.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    }
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / y.abs().max(0.01 * scale))
        .fold(0.0, f64::max)
}

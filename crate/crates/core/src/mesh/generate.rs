use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spade::{
    AngleLimit, ConstrainedDelaunayTriangulation, Point2, RefinementParameters, Triangulation,
};

use super::boundary::{polygon_area, ArcLength, BoundaryCurve};
use super::{DomainDescriptor, ElectrodeArc, Mesh};
use crate::error::{Error, Result};

/// Everything needed to build a mesh deterministically.
#[derive(Clone, Debug, PartialEq)]
pub struct MeshSpec {
    pub curve: BoundaryCurve,
    pub n_electrodes: usize,
    /// mm
    pub electrode_width: f64,
    pub target_elements: usize,
    pub seed: u64,
    /// Explicit electrode centres (arc length, mm). Equally spaced when `None`.
    pub electrode_centers: Option<Vec<f64>>,
    /// mm
    pub electrode_height: Option<f64>,
    /// Ratio of the interior size `h` to the boundary spacing at electrode ends.
    pub edge_refinement: f64,
}

/// Default [`MeshSpec::edge_refinement`].
pub const DEFAULT_EDGE_REFINEMENT: f64 = 4.0;

impl MeshSpec {
    pub fn new(
        curve: BoundaryCurve,
        n_electrodes: usize,
        electrode_width: f64,
        target_elements: usize,
        seed: u64,
    ) -> Self {
        Self {
            curve,
            n_electrodes,
            electrode_width,
            target_elements,
            seed,
            electrode_centers: None,
            electrode_height: Some(crate::fem::DEFAULT_SLAB_THICKNESS),
            edge_refinement: DEFAULT_EDGE_REFINEMENT,
        }
    }

    pub fn with_edge_refinement(mut self, ratio: f64) -> Self {
        self.edge_refinement = ratio;
        self
    }

    pub fn with_electrode_centers(mut self, centers: Vec<f64>) -> Self {
        self.electrode_centers = Some(centers);
        self
    }

    pub fn generate(&self) -> Result<Mesh> {
        self.curve.validate()?;
        if self.target_elements < 50 {
            return Err(Error::Config(format!(
                "target_elements = {} is below the minimum of 50",
                self.target_elements
            )));
        }
        if !(self.edge_refinement >= 1.0) || !self.edge_refinement.is_finite() {
            return Err(Error::Config(format!(
                "edge_refinement must be a finite ratio >= 1, got {}",
                self.edge_refinement
            )));
        }
        if self.n_electrodes == 0 || !(self.electrode_width > 0.0) {
            return Err(Error::Config(
                "need at least one electrode of positive width".into(),
            ));
        }
        let arc = ArcLength::new(&self.curve);
        let perimeter = arc.perimeter();
        let covered = self.n_electrodes as f64 * self.electrode_width;
        if covered >= perimeter {
            return Err(Error::Config(format!(
                "electrodes do not fit: n_electrodes × electrode_width = {covered:.3} mm \
                 must be below the perimeter {perimeter:.3} mm"
            )));
        }
        let centers = self.resolve_centers(perimeter)?;

        let outline: Vec<[f64; 2]> = (0..4096)
            .map(|i| arc.point_at(perimeter * i as f64 / 4096.0))
            .collect();
        let area = polygon_area(&outline);
        let target = self.target_elements as f64;
        let mut h = (4.0 * area / (3f64.sqrt() * target)).sqrt();

        let mut best: Option<Mesh> = None;
        for _ in 0..8 {
            let mesh = self.build(&arc, &centers, h)?;
            let count = mesh.n_elements() as f64;
            let rel = (count - target).abs() / target;
            let better = best
                .as_ref()
                .is_none_or(|b| (b.n_elements() as f64 - target).abs() > (count - target).abs());
            if better {
                best = Some(mesh);
            }
            if rel < 0.08 {
                break;
            }
            h *= (count / target).sqrt();
        }
        let mesh = best.unwrap();
        let count = mesh.n_elements() as f64;
        if (count - target).abs() > 0.25 * target {
            return Err(Error::Geometry(format!(
                "could not reach {} elements (got {})",
                self.target_elements,
                mesh.n_elements()
            )));
        }
        mesh.validate()?;
        Ok(mesh)
    }

    fn resolve_centers(&self, perimeter: f64) -> Result<Vec<f64>> {
        let l = self.n_electrodes;
        let w = self.electrode_width;
        let centers = match &self.electrode_centers {
            None => (0..l).map(|i| perimeter * i as f64 / l as f64).collect::<Vec<_>>(),
            Some(c) => {
                if c.len() != l {
                    return Err(Error::Config(format!(
                        "{} electrode centres given for {l} electrodes",
                        c.len()
                    )));
                }
                // Unwrap into an increasing sequence starting at c[0].
                let mut out = Vec::with_capacity(l);
                for &s in c {
                    let mut s = s;
                    if let Some(&prev) = out.last() {
                        while s <= prev {
                            s += perimeter;
                        }
                    }
                    out.push(s);
                }
                out
            }
        };
        for i in 0..l {
            let next = if i + 1 < l {
                centers[i + 1]
            } else {
                centers[0] + perimeter
            };
            if next - centers[i] <= w {
                return Err(Error::Config(format!(
                    "electrodes {i} and {} overlap",
                    (i + 1) % l
                )));
            }
        }
        Ok(centers)
    }

    fn build(&self, arc: &ArcLength, centers: &[f64], h: f64) -> Result<Mesh> {
        let perimeter = arc.perimeter();
        let w = self.electrode_width;
        let l = self.n_electrodes;

        // Boundary nodes by arc length, electrode by electrode. Spacing is
        // graded towards electrode ends, where the current density is singular.
        let mut s_nodes: Vec<f64> = Vec::new();
        let mut electrode_ranges = Vec::with_capacity(l);
        for i in 0..l {
            let a = centers[i] - 0.5 * w;
            let b = centers[i] + 0.5 * w;
            let start = s_nodes.len();
            let on_electrode = graded_nodes(a, b, 0.5 * h, h, self.edge_refinement, 2);
            electrode_ranges.push((start, on_electrode.len()));
            s_nodes.extend(on_electrode);
            let next_a = if i + 1 < l {
                centers[i + 1] - 0.5 * w
            } else {
                centers[0] + perimeter - 0.5 * w
            };
            s_nodes.extend(graded_nodes(b, next_a, h, h, self.edge_refinement, 1));
        }
        let nb = s_nodes.len();
        let boundary: Vec<[f64; 2]> = s_nodes.iter().map(|&s| arc.point_at(s)).collect();

        let interior = lattice_points(&boundary, h, self.seed);

        let mut cdt = ConstrainedDelaunayTriangulation::<Point2<f64>>::new();
        let mut handles = Vec::with_capacity(nb);
        for p in &boundary {
            let hnd = cdt
                .insert(Point2::new(p[0], p[1]))
                .map_err(|e| Error::Geometry(format!("boundary insertion failed: {e:?}")))?;
            handles.push(hnd);
        }
        if cdt.num_vertices() != nb {
            return Err(Error::Geometry("coincident boundary nodes".into()));
        }
        for i in 0..nb {
            let (a, b) = (handles[i], handles[(i + 1) % nb]);
            if cdt.can_add_constraint(a, b) {
                cdt.add_constraint(a, b);
            } else {
                return Err(Error::Geometry(format!(
                    "boundary segment {i} crosses another boundary segment"
                )));
            }
        }
        for p in &interior {
            cdt.insert(Point2::new(p[0], p[1]))
                .map_err(|e| Error::Geometry(format!("interior insertion failed: {e:?}")))?;
        }
        let params = RefinementParameters::<f64>::new()
            .exclude_outer_faces(true)
            .keep_constraint_edges()
            .with_angle_limit(AngleLimit::from_deg(25.0))
            .with_max_allowed_area(0.75 * h * h)
            .with_max_additional_vertices(10 * (nb + interior.len()) + 1000);
        let result = cdt.refine(params);
        let excluded: HashSet<_> = result.excluded_faces.into_iter().collect();

        let mut raw_elements = Vec::new();
        for face in cdt.inner_faces() {
            if excluded.contains(&face.fix()) {
                continue;
            }
            let v = face.vertices().map(|v| v.fix().index());
            raw_elements.push(v);
        }

        // Renumber: boundary nodes keep indices 0..nb, then used vertices in order.
        let positions: Vec<[f64; 2]> = cdt
            .vertices()
            .map(|v| {
                let p = v.position();
                [p.x, p.y]
            })
            .collect();
        let mut used = vec![false; positions.len()];
        for el in &raw_elements {
            for &v in el {
                used[v] = true;
            }
        }
        let mut map = vec![usize::MAX; positions.len()];
        let mut nodes = Vec::with_capacity(positions.len());
        for i in 0..nb {
            // Boundary coordinates are taken from the exact curve evaluation.
            map[i] = nodes.len();
            nodes.push(boundary[i]);
        }
        for (i, p) in positions.iter().enumerate().skip(nb) {
            if used[i] {
                map[i] = nodes.len();
                nodes.push(*p);
            }
        }
        let mut elements: Vec<[usize; 3]> = raw_elements
            .into_iter()
            .map(|el| el.map(|v| map[v]))
            .collect();
        for el in &mut elements {
            let (p, q, r) = (nodes[el[0]], nodes[el[1]], nodes[el[2]]);
            let area2 = (q[0] - p[0]) * (r[1] - p[1]) - (r[0] - p[0]) * (q[1] - p[1]);
            if area2 < 0.0 {
                el.swap(1, 2);
            }
        }

        let boundary_edges: Vec<[usize; 2]> = (0..nb).map(|i| [i, (i + 1) % nb]).collect();
        let electrodes = electrode_ranges
            .iter()
            .map(|&(start, count)| ElectrodeArc {
                edges: (start..start + count).map(|i| [i, (i + 1) % nb]).collect(),
            })
            .collect();

        Ok(Mesh {
            nodes,
            elements,
            boundary_edges,
            electrodes,
            domain: DomainDescriptor {
                curve: self.curve.clone(),
                n_electrodes: l,
                electrode_width: w,
                electrode_centers: centers.iter().map(|c| c.rem_euclid(perimeter)).collect(),
                electrode_height: self.electrode_height,
                edge_refinement: self.edge_refinement,
                target_elements: self.target_elements,
                seed: self.seed,
            },
        })
    }
}

/// Nodes on `[a, b)` with local spacing `min(h_max, h/edge_refinement +
/// (distance to the nearer end)/2)`, equidistributed in that metric.
fn graded_nodes(a: f64, b: f64, h_max: f64, h: f64, edge_refinement: f64, min_count: usize) -> Vec<f64> {
    const SAMPLES: usize = 256;
    let len = b - a;
    let spacing = |t: f64| {
        let d = (t * len).min((1.0 - t) * len);
        h_max.min(h / edge_refinement + 0.5 * d)
    };
    let mut cum = vec![0.0; SAMPLES + 1];
    for k in 0..SAMPLES {
        let (t0, t1) = (k as f64 / SAMPLES as f64, (k + 1) as f64 / SAMPLES as f64);
        let mid = 0.5 * (t0 + t1);
        cum[k + 1] = cum[k] + len / SAMPLES as f64 / spacing(mid);
    }
    let total = cum[SAMPLES];
    let n = (total.round() as usize).max(min_count);
    let mut out = Vec::with_capacity(n);
    let mut k = 0;
    for j in 0..n {
        let target = total * j as f64 / n as f64;
        while k < SAMPLES - 1 && cum[k + 1] < target {
            k += 1;
        }
        let f = (target - cum[k]) / (cum[k + 1] - cum[k]);
        out.push(a + len * (k as f64 + f) / SAMPLES as f64);
    }
    out
}

/// Jittered triangular lattice of spacing `h` strictly inside the polygon,
/// kept at least `0.7 h` from the boundary.
fn lattice_points(polygon: &[[f64; 2]], h: f64, seed: u64) -> Vec<[f64; 2]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut x0, mut y0, mut x1, mut y1) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
    for p in polygon {
        x0 = x0.min(p[0]);
        y0 = y0.min(p[1]);
        x1 = x1.max(p[0]);
        y1 = y1.max(p[1]);
    }
    let dy = h * 3f64.sqrt() / 2.0;
    let rows = ((y1 - y0) / dy).ceil() as usize + 1;
    let cols = ((x1 - x0) / h).ceil() as usize + 1;
    let mut pts = Vec::new();
    for j in 0..rows {
        for i in 0..cols {
            let jx = rng.random_range(-0.15..0.15) * h;
            let jy = rng.random_range(-0.15..0.15) * h;
            let shift = if j % 2 == 1 { 0.5 * h } else { 0.0 };
            let p = [x0 + i as f64 * h + shift + jx, y0 + j as f64 * dy + jy];
            if point_in_polygon(p, polygon) && distance_to_polygon(p, polygon) > 0.7 * h {
                pts.push(p);
            }
        }
    }
    pts
}

pub(crate) fn point_in_polygon(p: [f64; 2], poly: &[[f64; 2]]) -> bool {
    let n = poly.len();
    let mut inside = false;
    let mut j = n - 1;
    for i in 0..n {
        let (a, b) = (poly[i], poly[j]);
        if (a[1] > p[1]) != (b[1] > p[1]) {
            let x = a[0] + (p[1] - a[1]) * (b[0] - a[0]) / (b[1] - a[1]);
            if p[0] < x {
                inside = !inside;
            }
        }
        j = i;
    }
    inside
}

fn distance_to_polygon(p: [f64; 2], poly: &[[f64; 2]]) -> f64 {
    let n = poly.len();
    (0..n)
        .map(|i| segment_distance(p, poly[i], poly[(i + 1) % n]))
        .fold(f64::INFINITY, f64::min)
}

fn segment_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = dx * dx + dy * dy;
    let t = (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / len2).clamp(0.0, 1.0);
    (p[0] - a[0] - t * dx).hypot(p[1] - a[1] - t * dy)
}

/// Disk of `radius` mm with equally spaced electrodes.
pub fn generate_disk_mesh(
    radius: f64,
    n_electrodes: usize,
    electrode_width: f64,
    target_elements: usize,
    seed: u64,
) -> Result<Mesh> {
    MeshSpec::new(
        BoundaryCurve::Circle { radius },
        n_electrodes,
        electrode_width,
        target_elements,
        seed,
    )
    .generate()
}

/// Mesh of the region enclosed by `curve`, electrodes equally spaced by arc length.
pub fn generate_boundary_mesh(
    curve: BoundaryCurve,
    n_electrodes: usize,
    electrode_width: f64,
    target_elements: usize,
    seed: u64,
) -> Result<Mesh> {
    MeshSpec::new(curve, n_electrodes, electrode_width, target_elements, seed).generate()
}

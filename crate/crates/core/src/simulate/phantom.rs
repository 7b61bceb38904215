use std::f64::consts::PI;

use nalgebra::DVector;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::fem::ConductivityField;
use crate::mesh::{point_in_polygon, ArcLength, BoundaryCurve, Mesh};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case")]
pub enum InclusionShape {
    Ellipse {
        center: [f64; 2],
        semi_axes: [f64; 2],
        rotation: f64,
    },
    Polygon {
        vertices: Vec<[f64; 2]>,
    },
}

impl InclusionShape {
    pub fn contains(&self, p: [f64; 2]) -> bool {
        match self {
            InclusionShape::Ellipse {
                center,
                semi_axes,
                rotation,
            } => {
                let (s, c) = rotation.sin_cos();
                let (dx, dy) = (p[0] - center[0], p[1] - center[1]);
                let u = c * dx + s * dy;
                let v = -s * dx + c * dy;
                (u / semi_axes[0]).powi(2) + (v / semi_axes[1]).powi(2) <= 1.0
            }
            InclusionShape::Polygon { vertices } => point_in_polygon(p, vertices),
        }
    }

    /// Points on the outline, used for containment and overlap tests.
    pub fn outline(&self, n: usize) -> Vec<[f64; 2]> {
        match self {
            InclusionShape::Ellipse {
                center,
                semi_axes,
                rotation,
            } => {
                let (s, c) = rotation.sin_cos();
                (0..n)
                    .map(|i| {
                        let t = 2.0 * PI * i as f64 / n as f64;
                        let (u, v) = (semi_axes[0] * t.cos(), semi_axes[1] * t.sin());
                        [center[0] + c * u - s * v, center[1] + s * u + c * v]
                    })
                    .collect()
            }
            InclusionShape::Polygon { vertices } => {
                let k = vertices.len();
                let per = n.div_ceil(k).max(1);
                let mut out = Vec::with_capacity(per * k);
                for i in 0..k {
                    let (a, b) = (vertices[i], vertices[(i + 1) % k]);
                    for j in 0..per {
                        let t = j as f64 / per as f64;
                        out.push([a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])]);
                    }
                }
                out
            }
        }
    }

    fn overlaps(&self, other: &InclusionShape) -> bool {
        self.outline(96).iter().any(|&p| other.contains(p))
            || other.outline(96).iter().any(|&p| self.contains(p))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Inclusion {
    #[serde(flatten)]
    pub shape: InclusionShape,
    pub conductivity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Phantom {
    pub background: f64,
    pub inclusions: Vec<Inclusion>,
}

impl Phantom {
    pub fn homogeneous(background: f64) -> Self {
        Self {
            background,
            inclusions: Vec::new(),
        }
    }

    /// Conductivity at `p`; later inclusions are painted over earlier ones.
    pub fn conductivity_at(&self, p: [f64; 2]) -> f64 {
        self.inclusions
            .iter()
            .rev()
            .find(|inc| inc.shape.contains(p))
            .map_or(self.background, |inc| inc.conductivity)
    }
}

/// Element value = phantom conductivity at the element centroid.
pub fn rasterize_phantom(phantom: &Phantom, mesh: &Mesh) -> Result<ConductivityField> {
    let values = DVector::from_iterator(
        mesh.n_elements(),
        mesh.centroids().into_iter().map(|c| phantom.conductivity_at(c)),
    );
    ConductivityField::new(mesh, values)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetKind {
    Ellipses,
    LShape,
}

/// Distribution of random phantoms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSpec {
    pub target: TargetKind,
    /// Inclusion count range, inclusive.
    pub n_range: (usize, usize),
    pub background: (f64, f64),
    pub low: (f64, f64),
    pub high: (f64, f64),
    /// Ellipse semi-axis range (mm).
    pub semi_axes: (f64, f64),
    /// Centres are drawn inside the domain shrunk by this factor about its centroid.
    pub center_fraction: f64,
    /// L-shape arm length and width (mm).
    pub l_arm: f64,
    pub l_width: f64,
}

impl PhantomSpec {
    /// Training distribution: 1-4 inclusions.
    pub fn training() -> Self {
        Self {
            target: TargetKind::Ellipses,
            n_range: (1, 4),
            background: (0.40, 0.43),
            low: (0.15, 0.25),
            high: (0.65, 0.95),
            semi_axes: (15.0, 35.0),
            center_fraction: 0.75,
            l_arm: 140.0,
            l_width: 50.0,
        }
    }

    /// Test distribution, 1-3 inclusions.
    pub fn test_cases() -> Self {
        Self {
            n_range: (1, 3),
            ..Self::training()
        }
    }

    /// One large L-shaped target.
    pub fn l_shape() -> Self {
        Self {
            target: TargetKind::LShape,
            n_range: (1, 1),
            ..Self::test_cases()
        }
    }
}

/// Boundary polygon of a domain for containment tests.
pub fn domain_outline(curve: &BoundaryCurve, n: usize) -> Vec<[f64; 2]> {
    let arc = ArcLength::new(curve);
    let p = arc.perimeter();
    (0..n).map(|i| arc.point_at(p * i as f64 / n as f64)).collect()
}

const MAX_ATTEMPTS: usize = 100;
const MAX_PLACEMENT_TRIES: usize = 10_000;

pub fn sample_phantom<R: Rng + ?Sized>(rng: &mut R, spec: &PhantomSpec, domain: &BoundaryCurve) -> Phantom {
    let outline = domain_outline(domain, 512);
    let centroid = {
        let n = outline.len() as f64;
        let s = outline.iter().fold([0.0, 0.0], |a, p| [a[0] + p[0], a[1] + p[1]]);
        [s[0] / n, s[1] / n]
    };
    let shrunk: Vec<[f64; 2]> = outline
        .iter()
        .map(|p| {
            [
                centroid[0] + spec.center_fraction * (p[0] - centroid[0]),
                centroid[1] + spec.center_fraction * (p[1] - centroid[1]),
            ]
        })
        .collect();
    let (x0, x1, y0, y1) = shrunk.iter().fold(
        (f64::MAX, f64::MIN, f64::MAX, f64::MIN),
        |(a, b, c, d), p| (a.min(p[0]), b.max(p[0]), c.min(p[1]), d.max(p[1])),
    );
    let center = |rng: &mut R| loop {
        let p = [rng.random_range(x0..=x1), rng.random_range(y0..=y1)];
        if point_in_polygon(p, &shrunk) {
            return p;
        }
    };
    let inside = |shape: &InclusionShape| shape.outline(96).iter().all(|&p| point_in_polygon(p, &outline));

    let background = rng.random_range(spec.background.0..=spec.background.1);
    let n = rng.random_range(spec.n_range.0..=spec.n_range.1);
    let mut inclusions: Vec<Inclusion> = Vec::with_capacity(n);
    let draw_shape = |rng: &mut R| -> InclusionShape {
        let mut tries = 0;
        match spec.target {
            TargetKind::Ellipses => loop {
                tries += 1;
                let shape = InclusionShape::Ellipse {
                    center: center(rng),
                    semi_axes: [
                        rng.random_range(spec.semi_axes.0..=spec.semi_axes.1),
                        rng.random_range(spec.semi_axes.0..=spec.semi_axes.1),
                    ],
                    rotation: rng.random_range(0.0..PI),
                };
                if inside(&shape) || tries >= MAX_PLACEMENT_TRIES {
                    if tries >= MAX_PLACEMENT_TRIES {
                        log::warn!("inclusion does not fit inside the domain; keeping it anyway");
                    }
                    return shape;
                }
            },
            TargetKind::LShape => loop {
                tries += 1;
                let (a, w) = (spec.l_arm, spec.l_width);
                let base = [[0.0, 0.0], [a, 0.0], [a, w], [w, w], [w, a], [0.0, a]];
                // area-weighted centroid of the two arms
                let (a1, a2) = (a * w, (a - w) * w);
                let cx = (a1 * a / 2.0 + a2 * w / 2.0) / (a1 + a2);
                let cy = (a1 * w / 2.0 + a2 * (w + (a - w) / 2.0)) / (a1 + a2);
                let c = center(rng);
                let (s, co) = rng.random_range(0.0..2.0 * PI).sin_cos();
                let vertices = base
                    .iter()
                    .map(|p| {
                        let (u, v) = (p[0] - cx, p[1] - cy);
                        [c[0] + co * u - s * v, c[1] + s * u + co * v]
                    })
                    .collect();
                let shape = InclusionShape::Polygon { vertices };
                if inside(&shape) || tries >= MAX_PLACEMENT_TRIES {
                    if tries >= MAX_PLACEMENT_TRIES {
                        log::warn!("inclusion does not fit inside the domain; keeping it anyway");
                    }
                    return shape;
                }
            },
        }
    };
    for _ in 0..n {
        let mut shape = draw_shape(rng);
        let mut attempts = 1;
        while inclusions.iter().any(|inc| inc.shape.overlaps(&shape)) {
            if attempts >= MAX_ATTEMPTS {
                log::warn!("accepting an overlapping inclusion after {MAX_ATTEMPTS} attempts");
                break;
            }
            shape = draw_shape(rng);
            attempts += 1;
        }
        let range = if rng.random_bool(0.5) { spec.low } else { spec.high };
        inclusions.push(Inclusion {
            shape,
            conductivity: rng.random_range(range.0..=range.1),
        });
    }
    Phantom {
        background,
        inclusions,
    }
}

//! Closed boundary curves and their arc-length parametrization.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Fourier coefficients of the default chest outline,
/// `r(θ) = 1 + 0.18 cos 2θ + 0.06 cos 3θ − 0.05 sin 4θ`.
pub const CHEST_COS: [(u32, f64); 2] = [(2, 0.18), (3, 0.06)];
pub const CHEST_SIN: [(u32, f64); 1] = [(4, -0.05)];

/// A simple closed curve traversed counter-clockwise. Coordinates in mm.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case")]
pub enum BoundaryCurve {
    Circle {
        radius: f64,
    },
    Ellipse {
        semi_x: f64,
        semi_y: f64,
    },
    /// Star-shaped curve `r(θ) = scale · (1 + Σ a_n cos nθ + Σ b_n sin nθ)`.
    Fourier {
        scale: f64,
        cos: Vec<(u32, f64)>,
        sin: Vec<(u32, f64)>,
    },
    /// Sampled closed polyline; the closing segment is implicit.
    Polyline {
        points: Vec<[f64; 2]>,
    },
}

impl BoundaryCurve {
    /// The chest outline scaled so that its perimeter equals `perimeter` mm.
    pub fn chest(perimeter: f64) -> Self {
        let unit = BoundaryCurve::Fourier {
            scale: 1.0,
            cos: CHEST_COS.to_vec(),
            sin: CHEST_SIN.to_vec(),
        };
        let p = ArcLength::new(&unit).perimeter();
        BoundaryCurve::Fourier {
            scale: perimeter / p,
            cos: CHEST_COS.to_vec(),
            sin: CHEST_SIN.to_vec(),
        }
    }

    /// Regular polyline sampling of a circle, starting at `(radius, 0)`.
    pub fn sampled_circle(radius: f64, samples: usize) -> Self {
        let points = (0..samples)
            .map(|i| {
                let t = 2.0 * PI * i as f64 / samples as f64;
                [radius * t.cos(), radius * t.sin()]
            })
            .collect();
        BoundaryCurve::Polyline { points }
    }

    pub fn tag(&self) -> &'static str {
        match self {
            BoundaryCurve::Circle { .. } => "circle",
            BoundaryCurve::Ellipse { .. } => "ellipse",
            BoundaryCurve::Fourier { .. } => "fourier",
            BoundaryCurve::Polyline { .. } => "polyline",
        }
    }

    /// Checks the curve is usable: positive sizes, a star-shaped Fourier radius,
    /// and a non-self-intersecting polyline.
    pub fn validate(&self) -> Result<()> {
        match self {
            BoundaryCurve::Circle { radius } if !(*radius > 0.0) => {
                Err(Error::Geometry(format!("circle radius {radius} must be positive")))
            }
            BoundaryCurve::Ellipse { semi_x, semi_y } if !(*semi_x > 0.0 && *semi_y > 0.0) => {
                Err(Error::Geometry("ellipse semi-axes must be positive".into()))
            }
            BoundaryCurve::Fourier { scale, .. } => {
                if !(*scale > 0.0) {
                    return Err(Error::Geometry("fourier scale must be positive".into()));
                }
                let min_r = (0..4096)
                    .map(|i| self.fourier_radius(2.0 * PI * i as f64 / 4096.0).0)
                    .fold(f64::INFINITY, f64::min);
                if min_r <= 0.0 {
                    return Err(Error::Geometry("fourier radius must stay positive".into()));
                }
                Ok(())
            }
            BoundaryCurve::Polyline { points } => validate_polyline(points),
            _ => Ok(()),
        }
    }

    fn fourier_radius(&self, theta: f64) -> (f64, f64) {
        let BoundaryCurve::Fourier { scale, cos, sin } = self else {
            unreachable!()
        };
        let mut r = 1.0;
        let mut dr = 0.0;
        for &(n, a) in cos {
            let n = n as f64;
            r += a * (n * theta).cos();
            dr -= a * n * (n * theta).sin();
        }
        for &(n, b) in sin {
            let n = n as f64;
            r += b * (n * theta).sin();
            dr += b * n * (n * theta).cos();
        }
        (scale * r, scale * dr)
    }

    /// Point and derivative at parameter `t ∈ [0, 1)` for the smooth shapes.
    fn eval_smooth(&self, t: f64) -> ([f64; 2], [f64; 2]) {
        let th = 2.0 * PI * t;
        let (s, c) = th.sin_cos();
        match self {
            BoundaryCurve::Circle { radius } => (
                [radius * c, radius * s],
                [-2.0 * PI * radius * s, 2.0 * PI * radius * c],
            ),
            BoundaryCurve::Ellipse { semi_x, semi_y } => (
                [semi_x * c, semi_y * s],
                [-2.0 * PI * semi_x * s, 2.0 * PI * semi_y * c],
            ),
            BoundaryCurve::Fourier { .. } => {
                let (r, dr) = self.fourier_radius(th);
                (
                    [r * c, r * s],
                    [2.0 * PI * (dr * c - r * s), 2.0 * PI * (dr * s + r * c)],
                )
            }
            BoundaryCurve::Polyline { .. } => unreachable!(),
        }
    }
}

fn validate_polyline(points: &[[f64; 2]]) -> Result<()> {
    let n = points.len();
    if n < 3 {
        return Err(Error::Geometry("polyline needs at least 3 points".into()));
    }
    for i in 0..n {
        let a = points[i];
        let b = points[(i + 1) % n];
        if a == b {
            return Err(Error::Geometry(format!("repeated polyline vertex {i}")));
        }
    }
    // Non-adjacent segment pairs must not intersect.
    for i in 0..n {
        let (a, b) = (points[i], points[(i + 1) % n]);
        for j in (i + 2)..n {
            if i == 0 && j == n - 1 {
                continue;
            }
            let (c, d) = (points[j], points[(j + 1) % n]);
            if segments_intersect(a, b, c, d) {
                return Err(Error::Geometry(format!(
                    "boundary curve self-intersects (segments {i} and {j})"
                )));
            }
        }
    }
    Ok(())
}

fn orient(a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> f64 {
    (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
}

fn segments_intersect(a: [f64; 2], b: [f64; 2], c: [f64; 2], d: [f64; 2]) -> bool {
    let d1 = orient(c, d, a);
    let d2 = orient(c, d, b);
    let d3 = orient(a, b, c);
    let d4 = orient(a, b, d);
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0))
        && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0))
    {
        return true;
    }
    let on = |p: [f64; 2], q: [f64; 2], r: [f64; 2]| {
        r[0] >= p[0].min(q[0])
            && r[0] <= p[0].max(q[0])
            && r[1] >= p[1].min(q[1])
            && r[1] <= p[1].max(q[1])
    };
    (d1 == 0.0 && on(c, d, a))
        || (d2 == 0.0 && on(c, d, b))
        || (d3 == 0.0 && on(a, b, c))
        || (d4 == 0.0 && on(a, b, d))
}

/// Signed area of a closed polygon (positive when counter-clockwise).
pub fn polygon_area(points: &[[f64; 2]]) -> f64 {
    let n = points.len();
    0.5 * (0..n)
        .map(|i| {
            let a = points[i];
            let b = points[(i + 1) % n];
            a[0] * b[1] - b[0] * a[1]
        })
        .sum::<f64>()
}

const TABLE_INTERVALS: usize = 2048;

// 5-point Gauss-Legendre on [0, 1].
const GL_X: [f64; 5] = [
    0.046_910_077_030_668,
    0.230_765_344_947_158,
    0.5,
    0.769_234_655_052_841,
    0.953_089_922_969_332,
];
const GL_W: [f64; 5] = [
    0.118_463_442_528_095,
    0.239_314_335_249_683,
    0.284_444_444_444_444,
    0.239_314_335_249_683,
    0.118_463_442_528_095,
];

/// Arc-length lookup for a [`BoundaryCurve`]: maps distance along the curve
/// (mm, from the parameter origin, counter-clockwise) to a point on it.
#[derive(Clone, Debug)]
pub struct ArcLength {
    curve: BoundaryCurve,
    /// Cumulative arc length at the table knots (smooth curves) or vertices (polyline).
    cumulative: Vec<f64>,
    polyline: Option<Vec<[f64; 2]>>,
}

impl ArcLength {
    pub fn new(curve: &BoundaryCurve) -> Self {
        match curve {
            BoundaryCurve::Polyline { points } => {
                let mut pts = points.clone();
                if polygon_area(&pts) < 0.0 {
                    pts.reverse();
                }
                let n = pts.len();
                let mut cumulative = Vec::with_capacity(n + 1);
                cumulative.push(0.0);
                for i in 0..n {
                    let a = pts[i];
                    let b = pts[(i + 1) % n];
                    let len = (b[0] - a[0]).hypot(b[1] - a[1]);
                    cumulative.push(cumulative[i] + len);
                }
                Self {
                    curve: curve.clone(),
                    cumulative,
                    polyline: Some(pts),
                }
            }
            _ => {
                let mut cumulative = Vec::with_capacity(TABLE_INTERVALS + 1);
                cumulative.push(0.0);
                let dt = 1.0 / TABLE_INTERVALS as f64;
                for i in 0..TABLE_INTERVALS {
                    let t0 = i as f64 * dt;
                    let seg: f64 = GL_X
                        .iter()
                        .zip(GL_W)
                        .map(|(x, w)| w * speed(curve, t0 + x * dt))
                        .sum::<f64>()
                        * dt;
                    cumulative.push(cumulative[i] + seg);
                }
                Self {
                    curve: curve.clone(),
                    cumulative,
                    polyline: None,
                }
            }
        }
    }

    pub fn perimeter(&self) -> f64 {
        *self.cumulative.last().unwrap()
    }

    pub fn curve(&self) -> &BoundaryCurve {
        &self.curve
    }

    /// Point at arc length `s` (wrapped into `[0, perimeter)`).
    pub fn point_at(&self, s: f64) -> [f64; 2] {
        let p = self.perimeter();
        let s = s.rem_euclid(p);
        if let BoundaryCurve::Circle { radius } = self.curve {
            let th = s / radius;
            return [radius * th.cos(), radius * th.sin()];
        }
        let i = match self
            .cumulative
            .binary_search_by(|c| c.partial_cmp(&s).unwrap())
        {
            Ok(i) => i.min(self.cumulative.len() - 2),
            Err(i) => i - 1,
        };
        if let Some(pts) = &self.polyline {
            let n = pts.len();
            let a = pts[i % n];
            let b = pts[(i + 1) % n];
            let len = self.cumulative[i + 1] - self.cumulative[i];
            let f = (s - self.cumulative[i]) / len;
            return [a[0] + f * (b[0] - a[0]), a[1] + f * (b[1] - a[1])];
        }
        // Newton on the parameter within the bracketing table interval.
        let dt = 1.0 / TABLE_INTERVALS as f64;
        let t0 = i as f64 * dt;
        let target = s - self.cumulative[i];
        let mut t = t0 + dt * target / (self.cumulative[i + 1] - self.cumulative[i]);
        for _ in 0..30 {
            let g = segment_length(&self.curve, t0, t) - target;
            let step = g / speed(&self.curve, t);
            t -= step;
            if step.abs() < 1e-15 {
                break;
            }
        }
        self.curve.eval_smooth(t).0
    }
}

fn speed(curve: &BoundaryCurve, t: f64) -> f64 {
    let d = curve.eval_smooth(t).1;
    d[0].hypot(d[1])
}

fn segment_length(curve: &BoundaryCurve, a: f64, b: f64) -> f64 {
    let h = b - a;
    GL_X.iter()
        .zip(GL_W)
        .map(|(x, w)| w * speed(curve, a + x * h))
        .sum::<f64>()
        * h
}

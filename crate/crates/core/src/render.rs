//! Flat-shaded PNG rendering of element-wise fields.
//!
//! Each pixel centre is tested against the triangles of the mesh; pixels
//! outside the domain get the background colour. Values beyond the range
//! get a marker colour.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::fem::ConductivityField;
use crate::mesh::Mesh;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Colormap {
    Viridis,
    Jet,
    Gray,
}

const VIRIDIS: [[f64; 3]; 9] = [
    [68.0, 1.0, 84.0],
    [71.0, 44.0, 122.0],
    [59.0, 81.0, 139.0],
    [44.0, 113.0, 142.0],
    [33.0, 144.0, 141.0],
    [39.0, 173.0, 129.0],
    [92.0, 200.0, 99.0],
    [170.0, 220.0, 50.0],
    [253.0, 231.0, 37.0],
];

const JET: [[f64; 3]; 5] = [
    [0.0, 0.0, 143.0],
    [0.0, 128.0, 255.0],
    [128.0, 255.0, 128.0],
    [255.0, 128.0, 0.0],
    [128.0, 0.0, 0.0],
];

fn interpolate(stops: &[[f64; 3]], t: f64) -> [u8; 3] {
    let x = t.clamp(0.0, 1.0) * (stops.len() - 1) as f64;
    let i = (x.floor() as usize).min(stops.len() - 2);
    let f = x - i as f64;
    let mut out = [0u8; 3];
    for c in 0..3 {
        out[c] = (stops[i][c] + f * (stops[i + 1][c] - stops[i][c])).round() as u8;
    }
    out
}

impl Colormap {
    /// Colour of `t` in `[0, 1]`; values outside are clamped.
    pub fn color(self, t: f64) -> [u8; 3] {
        match self {
            Colormap::Viridis => interpolate(&VIRIDIS, t),
            Colormap::Jet => interpolate(&JET, t),
            Colormap::Gray => {
                let g = (t.clamp(0.0, 1.0) * 255.0).round() as u8;
                [g, g, g]
            }
        }
    }
}

/// How the colour bar is chosen.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum RangeSpec {
    /// Fixed bar; anything outside it is marked.
    Absolute { min: f64, max: f64 },
    /// Bar spans the reference field; values more than `margin_percent` of
    /// its width beyond either end are marked, values in between are clamped.
    Truth { margin_percent: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RenderSpec {
    pub colormap: Colormap,
    pub range: RangeSpec,
    pub over_color: [u8; 3],
    pub under_color: [u8; 3],
    pub background: [u8; 3],
    pub width: u32,
    pub height: u32,
}

impl Default for RenderSpec {
    fn default() -> Self {
        Self {
            colormap: Colormap::Viridis,
            range: RangeSpec::Truth { margin_percent: 20.0 },
            over_color: [0, 0, 0],
            under_color: [255, 0, 0],
            background: [255, 255, 255],
            width: 256,
            height: 256,
        }
    }
}

/// Colour bar `[min, max]` and the marker thresholds around it.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ResolvedRange {
    pub min: f64,
    pub max: f64,
    pub under: f64,
    pub over: f64,
}

impl RenderSpec {
    /// `truth` is required for [`RangeSpec::Truth`].
    pub fn resolve(&self, truth: Option<&ConductivityField>) -> Result<ResolvedRange> {
        let r = match self.range {
            RangeSpec::Absolute { min, max } => ResolvedRange { min, max, under: min, over: max },
            RangeSpec::Truth { margin_percent } => {
                let t = truth.ok_or_else(|| Error::Config("a truth-relative range needs a reference field".into()))?;
                if !(margin_percent >= 0.0) {
                    return Err(Error::Config(format!("margin must be >= 0, got {margin_percent}")));
                }
                let min = t.values().min();
                let max = t.values().max();
                let m = margin_percent / 100.0 * (max - min);
                ResolvedRange { min, max, under: min - m, over: max + m }
            }
        };
        if !(r.max > r.min) || !r.min.is_finite() || !r.max.is_finite() {
            return Err(Error::Config(format!("degenerate colour range [{}, {}]", r.min, r.max)));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::Config("image size must be positive".into()));
        }
        Ok(r)
    }
}

impl ResolvedRange {
    pub fn color(&self, value: f64, spec: &RenderSpec) -> [u8; 3] {
        if value > self.over || value.is_nan() {
            spec.over_color
        } else if value < self.under {
            spec.under_color
        } else {
            spec.colormap.color((value - self.min) / (self.max - self.min))
        }
    }
}

/// Row-major RGB8 raster, top row first.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub width: u32,
    pub height: u32,
    pub pixels: Vec<u8>,
}

impl RgbImage {
    pub fn pixel(&self, x: u32, y: u32) -> [u8; 3] {
        let i = 3 * (y as usize * self.width as usize + x as usize);
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.width.to_le_bytes());
        h.update(self.height.to_le_bytes());
        h.update(&self.pixels);
        hex::encode(h.finalize())
    }

    pub fn write_png(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)?;
            }
        }
        let w = BufWriter::new(File::create(path)?);
        let mut enc = png::Encoder::new(w, self.width, self.height);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let png_err = |e: png::EncodingError| Error::Format(format!("PNG encoding failed: {e}"));
        let mut writer = enc.write_header().map_err(png_err)?;
        writer.write_image_data(&self.pixels).map_err(png_err)?;
        writer.finish().map_err(png_err)?;
        Ok(())
    }
}

/// Pixel-to-world transform fitting the mesh bounding box into the image
/// with a one-pixel border and equal axis scales.
struct Viewport {
    x0: f64,
    y1: f64,
    scale: f64,
}

impl Viewport {
    fn new(mesh: &Mesh, width: u32, height: u32) -> Self {
        let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
        for p in &mesh.nodes {
            for a in 0..2 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        let usable = |n: u32| (n as f64 - 2.0).max(1.0);
        let scale = ((hi[0] - lo[0]) / usable(width)).max((hi[1] - lo[1]) / usable(height));
        let cx = 0.5 * (lo[0] + hi[0]);
        let cy = 0.5 * (lo[1] + hi[1]);
        Self {
            x0: cx - 0.5 * width as f64 * scale,
            y1: cy + 0.5 * height as f64 * scale,
            scale,
        }
    }

    fn to_pixel(&self, p: [f64; 2]) -> [f64; 2] {
        [(p[0] - self.x0) / self.scale, (self.y1 - p[1]) / self.scale]
    }
}

/// Rasterizes `field` over `mesh`. `truth` supplies the colour bar for
/// truth-relative ranges.
pub fn render_field(
    field: &ConductivityField,
    mesh: &Mesh,
    spec: &RenderSpec,
    truth: Option<&ConductivityField>,
) -> Result<RgbImage> {
    if field.len() != mesh.n_elements() || field.mesh_hash() != mesh.content_hash() {
        return Err(Error::Lineage("the field was not defined on this mesh".into()));
    }
    let range = spec.resolve(truth)?;
    let (w, h) = (spec.width, spec.height);
    let mut pixels = Vec::with_capacity(3 * w as usize * h as usize);
    for _ in 0..w as usize * h as usize {
        pixels.extend_from_slice(&spec.background);
    }
    let view = Viewport::new(mesh, w, h);
    for (e, tri) in mesh.elements.iter().enumerate() {
        let q = tri.map(|n| view.to_pixel(mesh.nodes[n]));
        let color = range.color(field.values()[e], spec);
        let xmin = q.iter().map(|p| p[0]).fold(f64::INFINITY, f64::min);
        let xmax = q.iter().map(|p| p[0]).fold(f64::NEG_INFINITY, f64::max);
        let ymin = q.iter().map(|p| p[1]).fold(f64::INFINITY, f64::min);
        let ymax = q.iter().map(|p| p[1]).fold(f64::NEG_INFINITY, f64::max);
        let px0 = (xmin - 0.5).ceil().max(0.0) as u32;
        let py0 = (ymin - 0.5).ceil().max(0.0) as u32;
        let px1 = ((xmax - 0.5).floor().min(w as f64 - 1.0)).max(-1.0) as i64;
        let py1 = ((ymax - 0.5).floor().min(h as f64 - 1.0)).max(-1.0) as i64;
        for py in py0 as i64..=py1 {
            for px in px0 as i64..=px1 {
                let c = [px as f64 + 0.5, py as f64 + 0.5];
                if inside(&q, c) {
                    let i = 3 * (py as usize * w as usize + px as usize);
                    pixels[i..i + 3].copy_from_slice(&color);
                }
            }
        }
    }
    Ok(RgbImage { width: w, height: h, pixels })
}

fn edge(a: [f64; 2], b: [f64; 2], p: [f64; 2]) -> f64 {
    (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0])
}

/// Closed point-in-triangle test, either orientation.
fn inside(q: &[[f64; 2]; 3], p: [f64; 2]) -> bool {
    let d = [edge(q[0], q[1], p), edge(q[1], q[2], p), edge(q[2], q[0], p)];
    let neg = d.iter().any(|&x| x < 0.0);
    let pos = d.iter().any(|&x| x > 0.0);
    !(neg && pos)
}

/// Renders and writes a PNG in one call.
pub fn render_png(
    path: &Path,
    field: &ConductivityField,
    mesh: &Mesh,
    spec: &RenderSpec,
    truth: Option<&ConductivityField>,
) -> Result<RgbImage> {
    let img = render_field(field, mesh, spec, truth)?;
    img.write_png(path)?;
    Ok(img)
}

//! Anti-aliased silhouette rendering.
//!
//! A model is posed, projected through a camera and rasterised in binary at
//! four times the output resolution; each output pixel is the fraction of its
//! 4x4 sub-samples covered by the particle. Tubes are drawn as capsules
//! (thick segments with round caps) whose radius is the tube radius projected
//! at the segment midpoint depth. The oloid is drawn as the convex hull of
//! its projected circle samples.
//!
//! Rasterisation works one sub-sample row at a time: every primitive is
//! convex, so its intersection with a row is a single interval.

use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camera::{CameraError, CameraModel};
use crate::geometry::ParticleModel;
use crate::rotation::Quaternion;

/// Sub-samples per output pixel along each axis.
pub const SUPERSAMPLE: usize = 4;
const SS: f64 = SUPERSAMPLE as f64;
const SS_AREA: f64 = (SUPERSAMPLE * SUPERSAMPLE) as f64;

#[derive(Debug, Error)]
pub enum RenderError {
    #[error("particle is not in front of camera: {0}")]
    Camera(#[from] CameraError),
    #[error("projected silhouette has zero extent")]
    DegenerateProjection,
    #[error("image dimensions must be at least 1x1, got {0}x{1}")]
    ZeroSize(usize, usize),
    #[error("pixel buffer has {got} values, expected {expected}")]
    BufferSize { got: usize, expected: usize },
    #[error("pixel value {0} outside [0, 1]")]
    OutOfRange(f64),
    #[error("image i/o error on {path}: {msg}")]
    Io { path: String, msg: String },
}

/// Rectangular grey raster with values in `[0, 1]`; 1 is particle.
#[derive(Debug, Clone, PartialEq)]
pub struct SilhouetteImage {
    width: usize,
    height: usize,
    pixels: Vec<f64>,
    /// Position of the top-left corner in full-sensor pixel coordinates.
    pub origin_px: [f64; 2],
}

impl SilhouetteImage {
    pub fn new(width: usize, height: usize, pixels: Vec<f64>, origin_px: [f64; 2]) -> Result<Self, RenderError> {
        if width == 0 || height == 0 {
            return Err(RenderError::ZeroSize(width, height));
        }
        if pixels.len() != width * height {
            return Err(RenderError::BufferSize { got: pixels.len(), expected: width * height });
        }
        if let Some(&bad) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(RenderError::OutOfRange(bad));
        }
        Ok(Self { width, height, pixels, origin_px })
    }

    pub fn zeros(width: usize, height: usize) -> Result<Self, RenderError> {
        Self::filled(width, height, 0.0)
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Result<Self, RenderError> {
        if width == 0 || height == 0 {
            return Err(RenderError::ZeroSize(width, height));
        }
        Self::new(width, height, vec![value; width * height], [0.0, 0.0])
    }

    pub(crate) fn from_parts_unchecked(width: usize, height: usize, pixels: Vec<f64>, origin_px: [f64; 2]) -> Self {
        debug_assert_eq!(pixels.len(), width * height);
        Self { width, height, pixels, origin_px }
    }

    pub fn width(&self) -> usize {
        self.width
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.pixels[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, v: f64) {
        self.pixels[row * self.width + col] = v.clamp(0.0, 1.0);
    }

    pub fn sum(&self) -> f64 {
        self.pixels.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.pixels.len() as f64
    }

    /// Intensity-weighted centroid in full-sensor pixel coordinates, or
    /// `None` for an all-zero image.
    pub fn centroid(&self) -> Option<[f64; 2]> {
        let (mut m, mut mx, mut my) = (0.0, 0.0, 0.0);
        for r in 0..self.height {
            for c in 0..self.width {
                let v = self.pixels[r * self.width + c];
                m += v;
                mx += v * (c as f64 + 0.5);
                my += v * (r as f64 + 0.5);
            }
        }
        (m > 0.0).then(|| [self.origin_px[0] + mx / m, self.origin_px[1] + my / m])
    }

    pub fn mirrored_lr(&self) -> Self {
        let mut p = Vec::with_capacity(self.pixels.len());
        for r in 0..self.height {
            p.extend(self.pixels[r * self.width..(r + 1) * self.width].iter().rev());
        }
        Self { pixels: p, ..self.clone() }
    }

    pub fn rotated_180(&self) -> Self {
        let mut p = self.pixels.clone();
        p.reverse();
        Self { pixels: p, ..self.clone() }
    }

    pub fn to_gray8(&self) -> Vec<u8> {
        self.pixels.iter().map(|v| (v * 255.0).round() as u8).collect()
    }

    pub fn from_gray8(width: usize, height: usize, data: &[u8]) -> Result<Self, RenderError> {
        Self::new(width, height, data.iter().map(|&v| v as f64 / 255.0).collect(), [0.0, 0.0])
    }

    /// Writes an 8-bit greyscale PGM or PNG, chosen by file extension.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), RenderError> {
        let path = path.as_ref();
        let buf = image::GrayImage::from_raw(self.width as u32, self.height as u32, self.to_gray8())
            .expect("buffer size matches");
        let io = |e: image::ImageError| RenderError::Io { path: path.display().to_string(), msg: e.to_string() };
        match path.extension().and_then(|e| e.to_str()) {
            Some("pgm") => {
                let file = std::fs::File::create(path)
                    .map_err(|e| RenderError::Io { path: path.display().to_string(), msg: e.to_string() })?;
                let enc = image::codecs::pnm::PnmEncoder::new(std::io::BufWriter::new(file))
                    .with_subtype(image::codecs::pnm::PnmSubtype::Graymap(image::codecs::pnm::SampleEncoding::Binary));
                buf.write_with_encoder(enc).map_err(io)
            }
            _ => buf.save(path).map_err(io),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, RenderError> {
        let path = path.as_ref();
        let img = image::open(path)
            .map_err(|e| RenderError::Io { path: path.display().to_string(), msg: e.to_string() })?
            .to_luma8();
        Self::from_gray8(img.width() as usize, img.height() as usize, img.as_raw())
    }
}

/// Window side as a multiple of the particle's bounding diameter.
pub const WINDOW_MARGIN: f64 = 1.2;

/// World-space side of the square comparison window shared by `models`.
pub fn window_world_size<'a>(models: impl IntoIterator<Item = &'a ParticleModel>) -> f64 {
    let r = models.into_iter().map(|m| m.bounding_radius()).fold(0.0, f64::max);
    WINDOW_MARGIN * 2.0 * r
}

/// Focal length that images a `window_world` wide object at `depth` onto
/// `window_px` pixels.
pub fn focal_for_window(window_px: f64, window_world: f64, depth: f64) -> f64 {
    window_px * depth / window_world
}

/// Particle placement: orientation and world position of the COM.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub orientation: Quaternion,
    pub position: Vector3<f64>,
}

impl Pose {
    pub fn new(orientation: Quaternion, position: Vector3<f64>) -> Self {
        Self { orientation, position }
    }

    pub fn at_origin(orientation: Quaternion) -> Self {
        Self { orientation, position: Vector3::zeros() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Capsule {
    a: [f64; 2],
    b: [f64; 2],
    r: f64,
}

/// A posed model projected onto one camera's sensor.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectedShape {
    capsules: Vec<Capsule>,
    /// Convex polygon (oloid hull), counter-clockwise in pixel coordinates.
    polygon: Vec<[f64; 2]>,
    /// Projected centre of mass.
    pub com_px: [f64; 2],
}

impl ProjectedShape {
    /// Axis-aligned bounds `[xmin, ymin, xmax, ymax]` in sensor pixels.
    pub fn bounds(&self) -> [f64; 4] {
        let mut b = [f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY];
        let mut grow = |p: [f64; 2], r: f64| {
            b[0] = b[0].min(p[0] - r);
            b[1] = b[1].min(p[1] - r);
            b[2] = b[2].max(p[0] + r);
            b[3] = b[3].max(p[1] + r);
        };
        for c in &self.capsules {
            grow(c.a, c.r);
            grow(c.b, c.r);
        }
        for p in &self.polygon {
            grow(*p, 0.0);
        }
        b
    }

    /// Projected points that define the shape (capsule end points or hull
    /// vertices).
    pub fn outline_points(&self) -> Vec<[f64; 2]> {
        if self.polygon.is_empty() {
            self.capsules.iter().flat_map(|c| [c.a, c.b]).collect()
        } else {
            self.polygon.clone()
        }
    }
}

/// Poses the model and projects it through `cam`.
pub fn project_model(model: &ParticleModel, pose: &Pose, cam: &CameraModel) -> Result<ProjectedShape, RenderError> {
    let q = &pose.orientation;
    let com_px = cam.project_point(&pose.position)?;
    match model {
        ParticleModel::Wireframe(w) => {
            let world: Vec<Vector3<f64>> = w.vertices.iter().map(|v| model.to_world(v, q, &pose.position)).collect();
            let px = world.iter().map(|p| cam.project_point(p)).collect::<Result<Vec<_>, _>>()?;
            let capsules = w
                .edges
                .iter()
                .map(|&(i, j)| {
                    let mid = 0.5 * (world[i] + world[j]);
                    let r = cam.focal_length() * w.tube_radius / cam.depth(&mid);
                    Capsule { a: px[i], b: px[j], r }
                })
                .collect();
            Ok(ProjectedShape { capsules, polygon: Vec::new(), com_px })
        }
        ParticleModel::Oloid(o) => {
            let px = o
                .points
                .iter()
                .map(|p| cam.project_point(&model.to_world(p, q, &pose.position)))
                .collect::<Result<Vec<_>, _>>()?;
            let polygon = convex_hull(px);
            if polygon.len() < 3 {
                return Err(RenderError::DegenerateProjection);
            }
            Ok(ProjectedShape { capsules: Vec::new(), polygon, com_px })
        }
    }
}

/// Andrew's monotone chain; returns the hull counter-clockwise without
/// collinear points.
pub fn convex_hull(mut pts: Vec<[f64; 2]>) -> Vec<[f64; 2]> {
    pts.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let cross = |o: [f64; 2], a: [f64; 2], b: [f64; 2]| (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0]);
    let mut hull: Vec<[f64; 2]> = Vec::with_capacity(2 * pts.len());
    for pass in 0..2 {
        let start = hull.len();
        let iter: Box<dyn Iterator<Item = &[f64; 2]>> =
            if pass == 0 { Box::new(pts.iter()) } else { Box::new(pts.iter().rev()) };
        for &p in iter {
            while hull.len() >= start + 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
                hull.pop();
            }
            hull.push(p);
        }
        hull.pop();
    }
    hull
}

#[inline]
fn merge_interval(lo: &mut f64, hi: &mut f64, a: f64, b: f64) {
    if a < *lo {
        *lo = a;
    }
    if b > *hi {
        *hi = b;
    }
}

/// Intersection of the row `y` with a convex polygon given by its corners.
#[inline]
fn polygon_row(poly: &[[f64; 2]], y: f64, lo: &mut f64, hi: &mut f64) {
    let n = poly.len();
    for i in 0..n {
        let p = poly[i];
        let q = poly[(i + 1) % n];
        let (ymin, ymax) = if p[1] < q[1] { (p[1], q[1]) } else { (q[1], p[1]) };
        if y < ymin || y > ymax {
            continue;
        }
        if ymax == ymin {
            merge_interval(lo, hi, p[0].min(q[0]), p[0].max(q[0]));
        } else {
            let x = p[0] + (y - p[1]) * (q[0] - p[0]) / (q[1] - p[1]);
            merge_interval(lo, hi, x, x);
        }
    }
}

#[inline]
fn capsule_row(c: &Capsule, y: f64) -> Option<(f64, f64)> {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    let r2 = c.r * c.r;
    for p in [c.a, c.b] {
        let dy = y - p[1];
        if dy * dy <= r2 {
            let h = (r2 - dy * dy).sqrt();
            merge_interval(&mut lo, &mut hi, p[0] - h, p[0] + h);
        }
    }
    let d = [c.b[0] - c.a[0], c.b[1] - c.a[1]];
    let len = (d[0] * d[0] + d[1] * d[1]).sqrt();
    if len > 0.0 {
        let n = [-d[1] / len * c.r, d[0] / len * c.r];
        let quad = [
            [c.a[0] + n[0], c.a[1] + n[1]],
            [c.b[0] + n[0], c.b[1] + n[1]],
            [c.b[0] - n[0], c.b[1] - n[1]],
            [c.a[0] - n[0], c.a[1] - n[1]],
        ];
        polygon_row(&quad, y, &mut lo, &mut hi);
    }
    (lo <= hi).then_some((lo, hi))
}

/// Number of covered sub-samples (0..=16) per output pixel of the window
/// whose top-left corner is `origin` (sensor pixels).
pub(crate) fn coverage(shape: &ProjectedShape, origin: [f64; 2], width: usize, height: usize) -> Vec<u16> {
    let mut counts = vec![0u16; width * height];
    let sw = (width * SUPERSAMPLE) as i64;
    let sh = height * SUPERSAMPLE;
    let b = shape.bounds();
    // Sub-sample rows whose centres can touch the shape.
    let row_lo = (((b[1] - origin[1]) * SS - 0.5).ceil().max(0.0)) as usize;
    let row_hi_f = ((b[3] - origin[1]) * SS - 0.5).floor();
    if row_hi_f < 0.0 || row_lo >= sh {
        return counts;
    }
    let row_hi = (row_hi_f as usize).min(sh - 1);
    let mut spans: Vec<(i64, i64)> = Vec::with_capacity(shape.capsules.len() + 1);
    let cap_rows: Vec<(f64, f64)> = shape
        .capsules
        .iter()
        .map(|c| (c.a[1].min(c.b[1]) - c.r, c.a[1].max(c.b[1]) + c.r))
        .collect();
    let to_cols = |lo: f64, hi: f64| -> Option<(i64, i64)> {
        let k0 = (((lo - origin[0]) * SS - 0.5).ceil() as i64).max(0);
        let k1 = (((hi - origin[0]) * SS - 0.5).floor() as i64).min(sw - 1);
        (k0 <= k1).then_some((k0, k1))
    };
    for sr in row_lo..=row_hi {
        let y = origin[1] + (sr as f64 + 0.5) / SS;
        spans.clear();
        for (c, &(ylo, yhi)) in shape.capsules.iter().zip(&cap_rows) {
            if y < ylo || y > yhi {
                continue;
            }
            if let Some((lo, hi)) = capsule_row(c, y) {
                if let Some(s) = to_cols(lo, hi) {
                    spans.push(s);
                }
            }
        }
        if !shape.polygon.is_empty() {
            let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
            polygon_row(&shape.polygon, y, &mut lo, &mut hi);
            if lo <= hi {
                if let Some(s) = to_cols(lo, hi) {
                    spans.push(s);
                }
            }
        }
        if spans.is_empty() {
            continue;
        }
        spans.sort_unstable();
        let row = &mut counts[(sr / SUPERSAMPLE) * width..(sr / SUPERSAMPLE + 1) * width];
        let mut cur = spans[0];
        for &s in spans[1..].iter().chain(std::iter::once(&(i64::MAX, i64::MAX))) {
            if s.0 <= cur.1 + 1 {
                cur.1 = cur.1.max(s.1);
                continue;
            }
            add_span(row, cur.0 as usize, cur.1 as usize);
            cur = s;
        }
    }
    counts
}

#[inline]
fn add_span(row: &mut [u16], k0: usize, k1: usize) {
    let (j0, j1) = (k0 / SUPERSAMPLE, k1 / SUPERSAMPLE);
    if j0 == j1 {
        row[j0] += (k1 - k0 + 1) as u16;
        return;
    }
    row[j0] += (SUPERSAMPLE * (j0 + 1) - k0) as u16;
    for v in &mut row[j0 + 1..j1] {
        *v += SUPERSAMPLE as u16;
    }
    row[j1] += (k1 - SUPERSAMPLE * j1 + 1) as u16;
}

fn counts_to_image(counts: Vec<u16>, width: usize, height: usize, origin: [f64; 2]) -> SilhouetteImage {
    let pixels = counts.into_iter().map(|c| c as f64 / SS_AREA).collect();
    SilhouetteImage::from_parts_unchecked(width, height, pixels, origin)
}

/// Renders a projected shape into the given window.
pub fn rasterize(shape: &ProjectedShape, origin: [f64; 2], width: usize, height: usize) -> SilhouetteImage {
    counts_to_image(coverage(shape, origin, width, height), width, height, origin)
}

/// Full-sensor image of several posed models; overlapping coverage is
/// combined with `max`. Parts outside the sensor are clipped.
pub fn render_scene(items: &[(&ParticleModel, Pose)], cam: &CameraModel) -> Result<SilhouetteImage, RenderError> {
    let [sw, sh] = cam.sensor_size().map(|v| v as usize);
    let mut out = SilhouetteImage::zeros(sw, sh)?;
    for (model, pose) in items {
        let shape = project_model(model, pose, cam)?;
        let b = shape.bounds();
        let x0 = b[0].floor().max(0.0) as usize;
        let y0 = b[1].floor().max(0.0) as usize;
        let x1 = (b[2].ceil() + 1.0).clamp(0.0, sw as f64) as usize;
        let y1 = (b[3].ceil() + 1.0).clamp(0.0, sh as f64) as usize;
        if x0 >= x1 || y0 >= y1 {
            continue;
        }
        let (w, h) = (x1 - x0, y1 - y0);
        let counts = coverage(&shape, [x0 as f64, y0 as f64], w, h);
        for r in 0..h {
            for c in 0..w {
                let v = counts[r * w + c] as f64 / SS_AREA;
                let px = &mut out.pixels[(y0 + r) * sw + x0 + c];
                *px = px.max(v);
            }
        }
    }
    Ok(out)
}

/// Silhouette centroid in sensor pixels, sampled on the pixel lattice that
/// passes through `phase`. With `None` the lattice is anchored to the
/// projected COM, so the result moves rigidly with the particle.
pub fn silhouette_centroid(shape: &ProjectedShape, phase: Option<[f64; 2]>) -> Result<[f64; 2], RenderError> {
    let b = shape.bounds();
    if !(b[0].is_finite() && b[3].is_finite()) {
        return Err(RenderError::DegenerateProjection);
    }
    let p = phase.unwrap_or(shape.com_px);
    let origin = [p[0] + (b[0] - p[0]).floor() - 1.0, p[1] + (b[1] - p[1]).floor() - 1.0];
    let w = (b[2] - origin[0]).ceil() as usize + 1;
    let h = (b[3] - origin[1]).ceil() as usize + 1;
    let counts = coverage(shape, origin, w, h);
    let (mut m, mut mx, mut my) = (0u64, 0u64, 0u64);
    for r in 0..h {
        for col in 0..w {
            let v = counts[r * w + col] as u64;
            m += v;
            mx += v * (2 * col as u64 + 1);
            my += v * (2 * r as u64 + 1);
        }
    }
    if m == 0 {
        return Err(RenderError::DegenerateProjection);
    }
    Ok([origin[0] + mx as f64 / (2.0 * m as f64), origin[1] + my as f64 / (2.0 * m as f64)])
}

/// Renders `width x height` pixels placed so that the window's top-left
/// corner sits at `centroid + anchor`, the centroid being measured on the
/// lattice through `phase` (see [`silhouette_centroid`]). Returns the image
/// and the centroid.
pub fn render_aligned(
    model: &ParticleModel,
    pose: &Pose,
    cam: &CameraModel,
    width: usize,
    height: usize,
    anchor: [f64; 2],
    phase: Option<[f64; 2]>,
) -> Result<(SilhouetteImage, [f64; 2]), RenderError> {
    if width == 0 || height == 0 {
        return Err(RenderError::ZeroSize(width, height));
    }
    let shape = project_model(model, pose, cam)?;
    let centroid = silhouette_centroid(&shape, phase)?;
    let origin = [centroid[0] + anchor[0], centroid[1] + anchor[1]];
    Ok((rasterize(&shape, origin, width, height), centroid))
}

/// Anti-aliased `out_size x out_size` silhouette of `model` at orientation
/// `q` with its COM at the world origin, centred on the silhouette centroid.
pub fn render_silhouette(
    model: &ParticleModel,
    q: &Quaternion,
    cam: &CameraModel,
    out_size: usize,
) -> Result<SilhouetteImage, RenderError> {
    let half = -(out_size as f64) / 2.0;
    Ok(render_aligned(model, &Pose::at_origin(*q), cam, out_size, out_size, [half, half], None)?.0)
}

/// Area-weighted taps for resampling `n_in` pixels onto `n_out`, stored
/// flat with a fixed stride per output pixel.
struct BoxTaps {
    start: Vec<usize>,
    len: Vec<usize>,
    stride: usize,
    weights: Vec<f64>,
}

impl BoxTaps {
    fn new(n_in: usize, n_out: usize) -> Self {
        let scale = n_in as f64 / n_out as f64;
        let stride = scale.ceil() as usize + 1;
        let mut t = Self { start: vec![0; n_out], len: vec![0; n_out], stride, weights: vec![0.0; n_out * stride] };
        for o in 0..n_out {
            let (a, b) = (o as f64 * scale, (o + 1) as f64 * scale);
            let mut i = a.floor() as usize;
            t.start[o] = i;
            let mut n = 0;
            while (i as f64) < b && i < n_in {
                let w = (b.min(i as f64 + 1.0) - a.max(i as f64)) / scale;
                if w > 0.0 {
                    if n == 0 {
                        t.start[o] = i;
                    }
                    t.weights[o * stride + n] = w;
                    n += 1;
                }
                i += 1;
            }
            t.len[o] = n;
        }
        t
    }
}

/// Box-resampled pixel buffer, row-major, clamped to `[0, 1]`.
pub(crate) fn resize_pixels(img: &SilhouetteImage, out_w: usize, out_h: usize) -> Vec<f64> {
    let mut out = Vec::new();
    resize_into(img, out_w, out_h, &mut Vec::new(), &mut out);
    out
}

/// [`resize_pixels`] writing into caller-owned buffers.
pub(crate) fn resize_into(img: &SilhouetteImage, out_w: usize, out_h: usize, tmp: &mut Vec<f64>, out: &mut Vec<f64>) {
    let tx = BoxTaps::new(img.width, out_w);
    let ty = BoxTaps::new(img.height, out_h);
    tmp.clear();
    tmp.resize(img.height * out_w, 0.0);
    let mut live = vec![false; img.height];
    for r in 0..img.height {
        let src = &img.pixels[r * img.width..(r + 1) * img.width];
        if src.iter().all(|&v| v == 0.0) {
            continue;
        }
        live[r] = true;
        let dst = &mut tmp[r * out_w..(r + 1) * out_w];
        for (c, d) in dst.iter_mut().enumerate() {
            let w = &tx.weights[c * tx.stride..c * tx.stride + tx.len[c]];
            let x = &src[tx.start[c]..tx.start[c] + tx.len[c]];
            *d = w.iter().zip(x).map(|(a, b)| a * b).sum();
        }
    }
    out.clear();
    out.resize(out_w * out_h, 0.0);
    for r in 0..out_h {
        if !(0..ty.len[r]).any(|k| live[ty.start[r] + k]) {
            continue;
        }
        let dst = &mut out[r * out_w..(r + 1) * out_w];
        for k in 0..ty.len[r] {
            let w = ty.weights[r * ty.stride + k];
            let i = ty.start[r] + k;
            for (d, s) in dst.iter_mut().zip(&tmp[i * out_w..(i + 1) * out_w]) {
                *d += w * s;
            }
        }
        for d in dst.iter_mut() {
            *d = d.clamp(0.0, 1.0);
        }
    }
}

/// Box-kernel resampling: every output pixel is the area-weighted mean of the
/// input pixels under its footprint.
pub fn resize_box(img: &SilhouetteImage, out_w: usize, out_h: usize) -> Result<SilhouetteImage, RenderError> {
    if out_w == 0 || out_h == 0 {
        return Err(RenderError::ZeroSize(out_w, out_h));
    }
    if out_w == img.width && out_h == img.height {
        return Ok(img.clone());
    }
    Ok(SilhouetteImage::from_parts_unchecked(out_w, out_h, resize_pixels(img, out_w, out_h), img.origin_px))
}

/// Pixels `>= threshold` become 1, the rest 0.
pub fn binarize(img: &SilhouetteImage, threshold: f64) -> SilhouetteImage {
    let pixels = img.pixels.iter().map(|&v| if v >= threshold { 1.0 } else { 0.0 }).collect();
    SilhouetteImage::from_parts_unchecked(img.width, img.height, pixels, img.origin_px)
}

//! Silhouette mismatch error.
//!
//! Two silhouettes are brought to a common square resolution, binarised, and
//! compared through their overlap `O` and union `U`: every union pixel is
//! charged its Euclidean distance to the nearest overlap pixel, and the sum
//! is divided by the pixel count. Overlap pixels cost nothing, so the error
//! vanishes exactly when the two binary images agree.

use nalgebra::Vector3;
use thiserror::Error;

use crate::camera::{CameraModel, CameraRig};
use crate::geometry::ParticleModel;
use crate::render::{render_aligned, resize_box, resize_into, Pose, RenderError, SilhouetteImage};
use crate::rotation::Quaternion;

/// Side of the square raster on which errors are evaluated.
pub const COST_RESOLUTION: usize = 100;
/// Grey level at or above which a resized pixel counts as particle.
pub const BINARY_THRESHOLD: f64 = 0.5;

#[derive(Debug, Error)]
pub enum CostError {
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error("silhouette is empty after binarisation")]
    EmptyInput,
    #[error("mask sizes differ: {0:?} vs {1:?}")]
    SizeMismatch((usize, usize), (usize, usize)),
    #[error("{got} observations for a rig of {expected} cameras")]
    CameraCount { got: usize, expected: usize },
}

/// Bit-packed binary image, one `u64` word per 64 columns of each row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    stride: usize,
    bits: Vec<u64>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize) -> Self {
        let stride = width.div_ceil(64);
        Self { width, height, stride, bits: vec![0; stride * height] }
    }

    pub fn from_image(img: &SilhouetteImage, threshold: f64) -> Self {
        Self::from_pixels(img.width(), img.height(), img.pixels(), threshold)
    }

    fn from_pixels(width: usize, height: usize, pixels: &[f64], threshold: f64) -> Self {
        let mut m = Self::new(width, height);
        for (r, row) in pixels.chunks_exact(width).enumerate() {
            let words = &mut m.bits[r * m.stride..(r + 1) * m.stride];
            for (c, &v) in row.iter().enumerate() {
                words[c / 64] |= ((v >= threshold) as u64) << (c % 64);
            }
        }
        m
    }

    /// Rebuilds a mask from packed words as returned by [`BinaryMask::words`].
    pub fn from_words(width: usize, height: usize, bits: Vec<u64>) -> Option<Self> {
        let stride = width.div_ceil(64);
        (bits.len() == stride * height).then_some(Self { width, height, stride, bits })
    }

    pub fn width(&self) -> usize {
        self.width
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn words(&self) -> &[u64] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.stride + col / 64] >> (col % 64) & 1 == 1
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, on: bool) {
        let w = &mut self.bits[row * self.stride + col / 64];
        if on {
            *w |= 1 << (col % 64);
        } else {
            *w &= !(1 << (col % 64));
        }
    }

    pub fn count(&self) -> usize {
        self.bits.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.iter().all(|&w| w == 0)
    }

    fn zip_with(&self, other: &Self, f: impl Fn(u64, u64) -> u64) -> Self {
        let bits = self.bits.iter().zip(&other.bits).map(|(&a, &b)| f(a, b)).collect();
        Self { bits, ..*self }
    }

    pub fn and(&self, other: &Self) -> Self {
        self.zip_with(other, |a, b| a & b)
    }

    pub fn or(&self, other: &Self) -> Self {
        self.zip_with(other, |a, b| a | b)
    }

    /// Pixels set in exactly one of the two masks.
    pub fn xor_count(&self, other: &Self) -> usize {
        self.bits.iter().zip(&other.bits).map(|(a, b)| (a ^ b).count_ones() as usize).sum()
    }

    pub fn to_image(&self) -> SilhouetteImage {
        let pixels = (0..self.height * self.width)
            .map(|i| if self.get(i / self.width, i % self.width) { 1.0 } else { 0.0 })
            .collect();
        SilhouetteImage::new(self.width, self.height, pixels, [0.0, 0.0]).expect("mask has non-zero size")
    }

    fn shape(&self) -> (usize, usize) {
        (self.width, self.height)
    }
}

/// Per-pixel Euclidean distance to the nearest foreground pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceField {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
    /// Set when there is no foreground at all; every value is then infinite.
    pub infinite: bool,
}

impl DistanceField {
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }
}

/// Exact squared Euclidean distance transform (Meijster et al.), row-major.
/// Pixels with no foreground anywhere get a large finite sentinel.
fn squared_distance_field(mask: &BinaryMask) -> Vec<i64> {
    let (w, h) = mask.shape();
    let inf = (w + h) as i64;
    let mut g = vec![0i64; w * h];
    for c in 0..w {
        g[c] = if mask.get(0, c) { 0 } else { inf };
        for r in 1..h {
            g[r * w + c] = if mask.get(r, c) { 0 } else { g[(r - 1) * w + c] + 1 };
        }
        for r in (0..h.saturating_sub(1)).rev() {
            if g[(r + 1) * w + c] < g[r * w + c] {
                g[r * w + c] = g[(r + 1) * w + c] + 1;
            }
        }
    }
    let mut out = vec![0i64; w * h];
    let mut s = vec![0usize; w];
    let mut t = vec![0i64; w];
    for r in 0..h {
        let gr = &g[r * w..(r + 1) * w];
        let f = |x: i64, i: usize| (x - i as i64).pow(2) + gr[i] * gr[i];
        let sep = |i: usize, u: usize| {
            let (i2, u2) = ((i * i) as i64, (u * u) as i64);
            (u2 - i2 + gr[u] * gr[u] - gr[i] * gr[i]).div_euclid(2 * (u as i64 - i as i64))
        };
        let mut q: isize = 0;
        s[0] = 0;
        t[0] = 0;
        for u in 1..w {
            while q >= 0 && f(t[q as usize], s[q as usize]) > f(t[q as usize], u) {
                q -= 1;
            }
            if q < 0 {
                q = 0;
                s[0] = u;
            } else {
                let x = 1 + sep(s[q as usize], u);
                if x < w as i64 {
                    q += 1;
                    s[q as usize] = u;
                    t[q as usize] = x;
                }
            }
        }
        for u in (0..w).rev() {
            out[r * w + u] = f(u as i64, s[q as usize]);
            if u as i64 == t[q as usize] {
                q -= 1;
            }
        }
    }
    out
}

pub fn distance_transform_mask(mask: &BinaryMask) -> DistanceField {
    let infinite = mask.is_empty();
    let values = if infinite {
        vec![f64::INFINITY; mask.width * mask.height]
    } else {
        squared_distance_field(mask).into_iter().map(|d| (d as f64).sqrt()).collect()
    };
    DistanceField { width: mask.width, height: mask.height, values, infinite }
}

/// Exact Euclidean distance transform; pixels `>= 0.5` are foreground.
pub fn distance_transform(binary: &SilhouetteImage) -> DistanceField {
    distance_transform_mask(&BinaryMask::from_image(binary, BINARY_THRESHOLD))
}

/// Result of comparing two silhouettes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErrorValue {
    pub epsilon: f64,
    /// The silhouettes did not overlap and the capped penalty was used.
    pub disjoint: bool,
}

/// Squared distance from `(r, c)` to the nearest set pixel of `o` by
/// expanding square rings. Returns `None` once `budget` probes are used up.
fn nearest_sq(o: &BinaryMask, r: usize, c: usize, budget: &mut isize) -> Option<u64> {
    let (w, h) = (o.width as isize, o.height as isize);
    let (r, c) = (r as isize, c as isize);
    let max_rad = w.max(h);
    let mut best = u64::MAX;
    let probe = |rr: isize, cc: isize, best: &mut u64| {
        if rr >= 0 && rr < h && cc >= 0 && cc < w && o.get(rr as usize, cc as usize) {
            let d = ((rr - r) * (rr - r) + (cc - c) * (cc - c)) as u64;
            *best = (*best).min(d);
        }
    };
    for rad in 1..=max_rad {
        if (rad * rad) as u64 >= best {
            break;
        }
        *budget -= 8 * rad;
        if *budget < 0 {
            return None;
        }
        for d in -rad..=rad {
            probe(r - rad, c + d, &mut best);
            probe(r + rad, c + d, &mut best);
        }
        for d in -rad + 1..rad {
            probe(r + d, c - rad, &mut best);
            probe(r + d, c + rad, &mut best);
        }
    }
    Some(best)
}

/// Calls `f(row, col)` for every pixel set in `a` but not in `b`, row-major.
#[inline]
fn for_each_difference(a: &BinaryMask, b: &BinaryMask, mut f: impl FnMut(usize, usize) -> bool) -> bool {
    for r in 0..a.height {
        for wi in 0..a.stride {
            let i = r * a.stride + wi;
            let mut bits = a.bits[i] & !b.bits[i];
            while bits != 0 {
                let c = wi * 64 + bits.trailing_zeros() as usize;
                if !f(r, c) {
                    return false;
                }
                bits &= bits - 1;
            }
        }
    }
    true
}

/// Error between two binary masks of equal size.
pub fn mask_error(a: &BinaryMask, b: &BinaryMask) -> Result<ErrorValue, CostError> {
    if a.shape() != b.shape() {
        return Err(CostError::SizeMismatch(a.shape(), b.shape()));
    }
    if a.is_empty() || b.is_empty() {
        return Err(CostError::EmptyInput);
    }
    let (w, h) = a.shape();
    let area = (w * h) as f64;
    let o = a.and(b);
    let u = a.or(b);
    if o.is_empty() {
        // Every union pixel is charged the image diagonal, the largest
        // distance any pixel can have to a non-empty overlap.
        let diag = ((w * w + h * h) as f64).sqrt();
        return Ok(ErrorValue { epsilon: diag * u.count() as f64 / area, disjoint: true });
    }
    // Both paths visit union-minus-overlap pixels in row-major order, so the
    // sums agree to the last bit.
    let mut budget = 4 * (w * h) as isize;
    let mut sum = 0.0;
    let done = for_each_difference(&u, &o, |r, c| match nearest_sq(&o, r, c, &mut budget) {
        Some(d2) => {
            sum += (d2 as f64).sqrt();
            true
        }
        None => false,
    });
    if !done {
        let sq = squared_distance_field(&o);
        sum = 0.0;
        for_each_difference(&u, &o, |r, c| {
            sum += (sq[r * w + c] as f64).sqrt();
            true
        });
    }
    Ok(ErrorValue { epsilon: sum / area, disjoint: false })
}

/// Lower bound on `mask_error(a, b)` given the distance field of `b`: a
/// pixel of `a` outside `b` is at least its distance to `b` from the
/// overlap, a pixel of `b` outside `a` at least one.
pub(crate) fn mask_error_lower_bound(a: &BinaryMask, b: &BinaryMask, dist_b: &[f64]) -> f64 {
    let w = a.width;
    let mut sum = 0.0;
    for_each_difference(a, b, |r, c| {
        sum += dist_b[r * w + c];
        true
    });
    sum += b.bits.iter().zip(&a.bits).map(|(x, y)| (x & !y).count_ones() as f64).sum::<f64>();
    sum / (w * a.height) as f64
}

/// Brings an image to `resolution x resolution` and binarises it.
pub fn cost_mask(img: &SilhouetteImage, resolution: usize) -> Result<BinaryMask, CostError> {
    if resolution == 0 {
        return Err(RenderError::ZeroSize(0, 0).into());
    }
    if img.width() == resolution && img.height() == resolution {
        return Ok(BinaryMask::from_image(img, BINARY_THRESHOLD));
    }
    thread_local! {
        static SCRATCH: std::cell::RefCell<(Vec<f64>, Vec<f64>)> = const { std::cell::RefCell::new((Vec::new(), Vec::new())) };
    }
    Ok(SCRATCH.with_borrow_mut(|(tmp, out)| {
        resize_into(img, resolution, resolution, tmp, out);
        BinaryMask::from_pixels(resolution, resolution, out, BINARY_THRESHOLD)
    }))
}

/// Error between two grey silhouettes after resizing both to
/// `resolution x resolution` and binarising at `threshold`.
pub fn silhouette_error(
    i1: &SilhouetteImage,
    i2: &SilhouetteImage,
    resolution: usize,
    threshold: f64,
) -> Result<ErrorValue, CostError> {
    let prep = |img: &SilhouetteImage| -> Result<BinaryMask, CostError> {
        let resized = resize_box(img, resolution, resolution)?;
        Ok(BinaryMask::from_image(&resized, threshold))
    };
    mask_error(&prep(i1)?, &prep(i2)?)
}

/// Per-camera and summed error of one candidate orientation.
#[derive(Debug, Clone, PartialEq)]
pub struct CostBreakdown {
    pub per_camera: Vec<f64>,
    pub total: f64,
    pub disjoint: Vec<bool>,
}

/// One camera's observed silhouette prepared for repeated comparison.
///
/// Refinement compares at `mask` resolution, library queries at
/// `library_mask` resolution.
#[derive(Debug, Clone)]
pub struct Observation {
    image: SilhouetteImage,
    centroid: [f64; 2],
    mask: BinaryMask,
    library_mask: BinaryMask,
    library_distance: Vec<f64>,
}

impl Observation {
    /// Refinement at the window's own resolution, library matching at
    /// [`COST_RESOLUTION`].
    pub fn new(image: SilhouetteImage) -> Result<Self, CostError> {
        Self::with_resolutions(image, None, COST_RESOLUTION)
    }

    /// One resolution for both refinement and library matching.
    pub fn with_resolution(image: SilhouetteImage, resolution: usize) -> Result<Self, CostError> {
        Self::with_resolutions(image, Some(resolution), resolution)
    }

    /// `refine = None` keeps the window's size (its longer side if not
    /// square).
    pub fn with_resolutions(image: SilhouetteImage, refine: Option<usize>, library: usize) -> Result<Self, CostError> {
        let centroid = image.centroid().ok_or(CostError::EmptyInput)?;
        let refine = refine.unwrap_or(image.width().max(image.height()));
        let mask = cost_mask(&image, refine)?;
        let library_mask = if library == refine { mask.clone() } else { cost_mask(&image, library)? };
        if mask.is_empty() || library_mask.is_empty() {
            return Err(CostError::EmptyInput);
        }
        let library_distance = distance_transform_mask(&library_mask).values;
        Ok(Self { image, centroid, mask, library_mask, library_distance })
    }

    pub fn image(&self) -> &SilhouetteImage {
        &self.image
    }

    /// Intensity centroid in full-sensor pixels.
    pub fn centroid(&self) -> [f64; 2] {
        self.centroid
    }

    /// Mask used by refinement.
    pub fn mask(&self) -> &BinaryMask {
        &self.mask
    }

    /// Mask used by library queries.
    pub fn library_mask(&self) -> &BinaryMask {
        &self.library_mask
    }

    /// Lower bound on the error of library entry `candidate`.
    pub(crate) fn lower_bound(&self, candidate: &BinaryMask) -> f64 {
        mask_error_lower_bound(candidate, &self.library_mask, &self.library_distance)
    }

    /// Offset of the window's top-left corner from the centroid.
    pub fn anchor(&self) -> [f64; 2] {
        [self.image.origin_px[0] - self.centroid[0], self.image.origin_px[1] - self.centroid[1]]
    }
}

/// Renders the model into the same centroid-relative window as `obs` and
/// returns the binarised mask at the observation's refinement resolution.
pub fn synthetic_mask(
    model: &ParticleModel,
    pose: &Pose,
    cam: &CameraModel,
    obs: &Observation,
) -> Result<BinaryMask, CostError> {
    let (w, h) = (obs.image.width(), obs.image.height());
    let (img, _) = render_aligned(model, pose, cam, w, h, obs.anchor(), Some(obs.image.origin_px))?;
    cost_mask(&img, obs.mask.width)
}

/// Total error of the model at `q` placed at `position`, summed over the
/// rig's cameras.
pub fn rig_error(
    model: &ParticleModel,
    q: &Quaternion,
    position: &Vector3<f64>,
    rig: &CameraRig,
    observed: &[Observation],
) -> Result<CostBreakdown, CostError> {
    if observed.len() != rig.len() {
        return Err(CostError::CameraCount { got: observed.len(), expected: rig.len() });
    }
    let pose = Pose::new(*q, *position);
    let mut per_camera = Vec::with_capacity(rig.len());
    let mut disjoint = Vec::with_capacity(rig.len());
    for (cam, obs) in rig.cameras.iter().zip(observed) {
        let e = mask_error(&synthetic_mask(model, &pose, cam, obs)?, &obs.mask)?;
        per_camera.push(e.epsilon);
        disjoint.push(e.disjoint);
    }
    let total = per_camera.iter().sum();
    Ok(CostBreakdown { per_camera, total, disjoint })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{builtin_model, ParticleKind};
    use crate::rotation::{random_orientation, Quaternion};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn random_mask(rng: &mut impl Rng, w: usize, h: usize, density: f64) -> BinaryMask {
        let mut m = BinaryMask::new(w, h);
        for r in 0..h {
            for c in 0..w {
                m.set(r, c, rng.random_bool(density));
            }
        }
        m
    }

    fn brute_force(m: &BinaryMask) -> Vec<f64> {
        let mut out = vec![f64::INFINITY; m.width * m.height];
        for r in 0..m.height {
            for c in 0..m.width {
                for rr in 0..m.height {
                    for cc in 0..m.width {
                        if m.get(rr, cc) {
                            let d = (((r as f64 - rr as f64).powi(2)) + ((c as f64 - cc as f64).powi(2))).sqrt();
                            out[r * m.width + c] = out[r * m.width + c].min(d);
                        }
                    }
                }
            }
        }
        out
    }

    /// Error by direct evaluation of the definition.
    fn brute_error(a: &BinaryMask, b: &BinaryMask) -> f64 {
        let o = a.and(b);
        let u = a.or(b);
        let d = brute_force(&o);
        let mut s = 0.0;
        for r in 0..a.height {
            for c in 0..a.width {
                if u.get(r, c) {
                    s += d[r * a.width + c];
                }
            }
        }
        s / (a.width * a.height) as f64
    }

    #[test]
    fn dt_all_white_is_zero() {
        let img = SilhouetteImage::filled(7, 4, 1.0).unwrap();
        let d = distance_transform(&img);
        assert!(d.values.iter().all(|&v| v == 0.0));
        assert!(!d.infinite);
    }

    #[test]
    fn dt_single_pixel() {
        let mut m = BinaryMask::new(9, 6);
        m.set(2, 5, true);
        let d = distance_transform_mask(&m);
        for r in 0..6 {
            for c in 0..9 {
                let want = (((r as f64) - 2.0).powi(2) + ((c as f64) - 5.0).powi(2)).sqrt();
                assert_eq!(d.get(r, c), want);
            }
        }
    }

    #[test]
    fn dt_all_black_flagged() {
        let d = distance_transform(&SilhouetteImage::zeros(5, 5).unwrap());
        assert!(d.infinite);
        assert!(d.values.iter().all(|v| v.is_infinite()));
    }

    #[test]
    fn dt_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let (w, h) = (rng.random_range(1..=25), rng.random_range(1..=25));
            let density = rng.random_range(0.02..0.6);
            let m = random_mask(&mut rng, w, h, density);
            if m.is_empty() {
                continue;
            }
            assert_eq!(distance_transform_mask(&m).values, brute_force(&m));
        }
    }

    #[test]
    fn identical_masks_cost_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = random_mask(&mut rng, 30, 30, 0.3);
        assert_eq!(mask_error(&m, &m).unwrap().epsilon, 0.0);
    }

    #[test]
    fn sparse_and_full_paths_agree_with_definition() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for i in 0..60 {
            let (w, h) = (rng.random_range(3..=25), rng.random_range(3..=25));
            // Low densities push the overlap far away and force the full path.
            let d = if i % 2 == 0 { 0.5 } else { 0.08 };
            let a = random_mask(&mut rng, w, h, d);
            let b = random_mask(&mut rng, w, h, d);
            if a.is_empty() || b.is_empty() || a.and(&b).is_empty() {
                continue;
            }
            let got = mask_error(&a, &b).unwrap().epsilon;
            assert!((got - brute_error(&a, &b)).abs() < 1e-12);
        }
    }

    #[test]
    fn lower_bound_never_exceeds_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..300 {
            let (w, h) = (rng.random_range(2..=30), rng.random_range(2..=30));
            let d = rng.random_range(0.05..0.6);
            let a = random_mask(&mut rng, w, h, d);
            let b = random_mask(&mut rng, w, h, d);
            if a.is_empty() || b.is_empty() {
                continue;
            }
            let dist = distance_transform_mask(&b).values;
            let lb = mask_error_lower_bound(&a, &b, &dist);
            let e = mask_error(&a, &b).unwrap().epsilon;
            assert!(lb <= e * (1.0 + 1e-12), "{lb} > {e}");
            assert!(lb >= a.xor_count(&b) as f64 / (w * h) as f64 * (1.0 - 1e-12));
        }
    }

    #[test]
    fn disjoint_single_pixels_penalty() {
        let mut a = BinaryMask::new(100, 100);
        let mut b = BinaryMask::new(100, 100);
        a.set(50, 40, true);
        b.set(50, 50, true);
        let e = mask_error(&a, &b).unwrap();
        assert!(e.disjoint);
        // Two union pixels, each charged the diagonal 100*sqrt(2).
        assert!((e.epsilon - 2.0 * 100.0 * 2f64.sqrt() / 1e4).abs() < 1e-15);
    }

    #[test]
    fn empty_input_rejected() {
        let a = BinaryMask::new(10, 10);
        let mut b = BinaryMask::new(10, 10);
        b.set(1, 1, true);
        assert!(matches!(mask_error(&a, &b), Err(CostError::EmptyInput)));
        assert!(matches!(mask_error(&b, &BinaryMask::new(5, 10)), Err(CostError::SizeMismatch(..))));
    }

    #[test]
    fn shrinking_overlap_never_lowers_error() {
        // A fixed 10x10 square and a sliding one: overlap shrinks to a
        // single pixel, then vanishes.
        let square = |r0: usize, c0: usize| {
            let mut m = BinaryMask::new(60, 60);
            for r in r0..r0 + 10 {
                for c in c0..c0 + 10 {
                    m.set(r, c, true);
                }
            }
            m
        };
        let a = square(20, 20);
        let mut last = 0.0;
        for k in 0..=10 {
            let e = mask_error(&a, &square(20 + k, 20 + k)).unwrap();
            assert!(e.epsilon >= last, "step {k}: {} < {last}", e.epsilon);
            assert_eq!(e.disjoint, k == 10);
            last = e.epsilon;
        }
    }

    #[test]
    fn cost_mask_equals_resize_then_binarize() {
        let model = builtin_model(ParticleKind::Tetrad);
        let cam = crate::camera::RigPreset::Single.build(500.0, 5000.0, [1024, 1024]).unwrap().cameras[0].clone();
        for size in [30, 60, 100, 137] {
            let h = -(size as f64) / 2.0;
            let (img, _) =
                render_aligned(&model, &Pose::at_origin(random_orientation(size as u64)), &cam, size, size, [h, h], None)
                    .unwrap();
            let via_images = crate::render::binarize(&resize_box(&img, 100, 100).unwrap(), BINARY_THRESHOLD);
            assert_eq!(cost_mask(&img, 100).unwrap(), BinaryMask::from_image(&via_images, BINARY_THRESHOLD));
        }
    }

    #[test]
    fn silhouette_error_resizes_and_thresholds() {
        let img = SilhouetteImage::new(2, 2, vec![0.6, 0.0, 0.0, 0.0], [0.0, 0.0]).unwrap();
        let e = silhouette_error(&img, &img, 4, 0.5).unwrap();
        assert_eq!(e.epsilon, 0.0);
        let blank = SilhouetteImage::zeros(2, 2).unwrap();
        assert!(matches!(silhouette_error(&img, &blank, 4, 0.5), Err(CostError::EmptyInput)));
    }

    proptest! {
        #[test]
        fn error_symmetric_and_nonnegative(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (w, h) = (rng.random_range(2..=30), rng.random_range(2..=30));
            let a = random_mask(&mut rng, w, h, 0.3);
            let b = random_mask(&mut rng, w, h, 0.3);
            prop_assume!(!a.is_empty() && !b.is_empty());
            let ab = mask_error(&a, &b).unwrap().epsilon;
            let ba = mask_error(&b, &a).unwrap().epsilon;
            prop_assert_eq!(ab, ba);
            prop_assert!(ab >= 0.0);
            prop_assert_eq!(ab == 0.0, a == b);
        }
    }

    fn bench_setup(q: &Quaternion) -> (ParticleModel, CameraRig, Vec<Observation>) {
        let model = builtin_model(ParticleKind::ChiralRight);
        let f = crate::render::focal_for_window(60.0, crate::render::window_world_size([&model]), 500.0);
        let rig = crate::camera::RigPreset::NearPlanar4.build(500.0, f, [1024, 1024]).unwrap();
        let obs = rig
            .cameras
            .iter()
            .map(|cam| {
                let (img, _) = render_aligned(&model, &Pose::at_origin(*q), cam, 60, 60, [-30.0, -30.0], None).unwrap();
                Observation::new(img).unwrap()
            })
            .collect();
        (model, rig, obs)
    }

    #[test]
    fn rig_error_zero_at_truth_and_permutation_invariant() {
        let q = random_orientation(5);
        let (model, rig, obs) = bench_setup(&q);
        let e = rig_error(&model, &q, &Vector3::zeros(), &rig, &obs).unwrap();
        assert_eq!(e.total, 0.0);
        let q2 = q * Quaternion::from_axis_angle(&Vector3::x(), 0.1).unwrap();
        let base = rig_error(&model, &q2, &Vector3::zeros(), &rig, &obs).unwrap();
        assert!((base.total - base.per_camera.iter().sum::<f64>()).abs() <= 1e-12);
        let order = [2, 0, 3, 1];
        let rig_p = rig.subset(&order).unwrap();
        let obs_p: Vec<_> = order.iter().map(|&i| obs[i].clone()).collect();
        let perm = rig_error(&model, &q2, &Vector3::zeros(), &rig_p, &obs_p).unwrap();
        assert!((perm.total - base.total).abs() <= 1e-12);
    }

    #[test]
    fn rig_error_grows_with_perturbation() {
        let mut small = Vec::new();
        let mut large = Vec::new();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for seed in 0..50 {
            let q = random_orientation(1000 + seed);
            let (model, rig, obs) = bench_setup(&q);
            let axis = Vector3::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5)
                .normalize();
            let at = |deg: f64| {
                let dq = Quaternion::from_axis_angle(&axis, deg.to_radians()).unwrap();
                rig_error(&model, &(q * dq), &Vector3::zeros(), &rig, &obs).unwrap().total
            };
            small.push(at(1.0));
            large.push(at(5.0));
        }
        let median = |v: &mut Vec<f64>| {
            v.sort_by(f64::total_cmp);
            v[v.len() / 2]
        };
        assert!(large.iter().all(|&e| e > 0.0));
        assert!(median(&mut large) > median(&mut small));
    }
}

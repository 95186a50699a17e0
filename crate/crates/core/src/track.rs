//! Frame-to-track pipeline: segmentation, cross-camera matching, orientation
//! fitting, centre-of-mass correction and temporal linking.

use std::collections::HashSet;
use std::io::{BufRead, Write};
use std::path::Path;

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camera::{candidate_tuples, match_centroids, triangulate, CameraRig};
use crate::cost::Observation;
use crate::geometry::ParticleModel;
use crate::optimize::{classify_and_fit, refine, Candidate, FitParams, FitResult};
use crate::render::{project_model, silhouette_centroid, Pose, SilhouetteImage};
use crate::rotation::{angle_between, EulerZYX, Quaternion};

pub const TRACK_FORMAT_VERSION: u32 = 1;
/// Padding around a blob's bounding box in its cutout, pixels.
pub const CUTOUT_PADDING: usize = 4;
/// Below-threshold rim kept around a component, pixels (Chebyshev).
const RIM: usize = 2;
/// Smallest accepted observation window side, pixels.
pub const MIN_WINDOW_PX: usize = 8;
/// Orientation steps are never flagged below this angle, degrees.
pub const JUMP_FLOOR_DEG: f64 = 1.0;
pub const JUMP_FACTOR: f64 = 5.0;

#[derive(Debug, Error)]
pub enum TrackError {
    #[error("invalid segmentation parameters: {0}")]
    Segmentation(String),
    #[error("expected {expected} camera images, got {got}")]
    CameraCount { got: usize, expected: usize },
    #[error("frame indices must increase: {prev} then {next}")]
    FrameOrder { prev: u64, next: u64 },
    #[error("track record i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("track record format: {0}")]
    Format(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Polarity {
    /// Particles brighter than the background (front-lit).
    #[default]
    BrightParticle,
    /// Particles darker than the background (back-lit).
    DarkParticle,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SegmentationParams {
    pub intensity_threshold: f64,
    pub min_area: usize,
    pub max_area: usize,
    pub polarity: Polarity,
}

impl Default for SegmentationParams {
    fn default() -> Self {
        Self { intensity_threshold: 0.5, min_area: 10, max_area: 1_000_000, polarity: Polarity::BrightParticle }
    }
}

impl SegmentationParams {
    pub fn validate(&self) -> Result<(), TrackError> {
        if !(0.0..=1.0).contains(&self.intensity_threshold) {
            return Err(TrackError::Segmentation(format!("intensity_threshold {} outside [0, 1]", self.intensity_threshold)));
        }
        if self.min_area >= self.max_area {
            return Err(TrackError::Segmentation(format!("min_area {} >= max_area {}", self.min_area, self.max_area)));
        }
        Ok(())
    }

    /// Particle coverage of a raw intensity.
    fn foreground(&self, v: f64) -> f64 {
        match self.polarity {
            Polarity::BrightParticle => v,
            Polarity::DarkParticle => 1.0 - v,
        }
    }

    fn is_particle(&self, v: f64) -> bool {
        match self.polarity {
            Polarity::BrightParticle => v > self.intensity_threshold,
            Polarity::DarkParticle => v < self.intensity_threshold,
        }
    }
}

/// One connected particle image in one camera.
#[derive(Debug, Clone, PartialEq)]
pub struct Blob {
    pub camera_index: usize,
    /// `[x0, y0, x1, y1)` of the thresholded component, sensor pixels.
    pub bbox: [usize; 4],
    /// Thresholded pixel count.
    pub area: usize,
    /// Coverage-weighted centroid of the cutout, sensor pixels.
    pub centroid: [f64; 2],
    /// Particle coverage around the component; other pixels are zero.
    pub cutout: SilhouetteImage,
}

/// Thresholds, labels 8-connected components and keeps those whose area is
/// within `[min_area, max_area]`. Blobs are ordered by their first pixel in
/// row-major order.
pub fn segment(image: &SilhouetteImage, camera_index: usize, p: &SegmentationParams) -> Vec<Blob> {
    let (w, h) = (image.width(), image.height());
    let px = image.pixels();
    let mut label = vec![0u32; w * h];
    let mut blobs = Vec::new();
    let mut stack = Vec::new();
    let mut members = Vec::new();
    let mut next = 0u32;
    for start in 0..w * h {
        if label[start] != 0 || !p.is_particle(px[start]) {
            continue;
        }
        next += 1;
        label[start] = next;
        stack.push(start);
        members.clear();
        while let Some(i) = stack.pop() {
            members.push(i);
            let (r, c) = ((i / w) as isize, (i % w) as isize);
            for dr in -1..=1 {
                for dc in -1..=1 {
                    let (rr, cc) = (r + dr, c + dc);
                    if rr < 0 || cc < 0 || rr >= h as isize || cc >= w as isize {
                        continue;
                    }
                    let j = rr as usize * w + cc as usize;
                    if label[j] == 0 && p.is_particle(px[j]) {
                        label[j] = next;
                        stack.push(j);
                    }
                }
            }
        }
        if members.len() < p.min_area || members.len() > p.max_area {
            continue;
        }
        if let Some(b) = make_blob(image, camera_index, &members, p) {
            blobs.push(b);
        }
    }
    blobs
}

fn make_blob(image: &SilhouetteImage, camera_index: usize, members: &[usize], p: &SegmentationParams) -> Option<Blob> {
    let (w, h) = (image.width(), image.height());
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
    for &i in members {
        let (r, c) = (i / w, i % w);
        x0 = x0.min(c);
        y0 = y0.min(r);
        x1 = x1.max(c + 1);
        y1 = y1.max(r + 1);
    }
    let cx0 = x0.saturating_sub(CUTOUT_PADDING);
    let cy0 = y0.saturating_sub(CUTOUT_PADDING);
    let cx1 = (x1 + CUTOUT_PADDING).min(w);
    let cy1 = (y1 + CUTOUT_PADDING).min(h);
    let (cw, ch) = (cx1 - cx0, cy1 - cy0);
    let mut keep = vec![false; cw * ch];
    for &i in members {
        let (r, c) = (i / w - cy0, i % w - cx0);
        for rr in r.saturating_sub(RIM)..(r + RIM + 1).min(ch) {
            for cc in c.saturating_sub(RIM)..(c + RIM + 1).min(cw) {
                keep[rr * cw + cc] = true;
            }
        }
    }
    let mut pixels = vec![0.0; cw * ch];
    for r in 0..ch {
        for c in 0..cw {
            if keep[r * cw + c] {
                pixels[r * cw + c] = p.foreground(image.get(cy0 + r, cx0 + c)).clamp(0.0, 1.0);
            }
        }
    }
    let origin = [image.origin_px[0] + cx0 as f64, image.origin_px[1] + cy0 as f64];
    let cutout = SilhouetteImage::new(cw, ch, pixels, origin).ok()?;
    let centroid = cutout.centroid()?;
    Some(Blob { camera_index, bbox: [x0, y0, x1, y1], area: members.len(), centroid, cutout })
}

/// Segmented blobs of one frame, per camera.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameObservation {
    pub frame_index: u64,
    pub time: f64,
    pub blobs: Vec<Vec<Blob>>,
}

impl FrameObservation {
    pub fn from_images(
        frame_index: u64,
        time: f64,
        images: &[SilhouetteImage],
        p: &SegmentationParams,
    ) -> Result<Self, TrackError> {
        p.validate()?;
        let blobs = images.iter().enumerate().map(|(c, img)| segment(img, c, p)).collect();
        Ok(Self { frame_index, time, blobs })
    }
}

/// Square observation window of world side `window_world` at the depth of
/// `point`, centred (to the nearest pixel) on the blob centroid and filled
/// with the blob's cutout.
pub fn observation_window(blob: &Blob, cam: &crate::camera::CameraModel, point: &Vector3<f64>, window_world: f64) -> Option<SilhouetteImage> {
    let depth = cam.depth(point);
    if !(depth > 0.0) {
        return None;
    }
    let side = (cam.focal_length() * window_world / depth).round().max(MIN_WINDOW_PX as f64) as usize;
    let ox = (blob.centroid[0] - side as f64 / 2.0).round();
    let oy = (blob.centroid[1] - side as f64 / 2.0).round();
    let cut = &blob.cutout;
    let (dx, dy) = ((cut.origin_px[0] - ox) as isize, (cut.origin_px[1] - oy) as isize);
    let mut pixels = vec![0.0; side * side];
    for r in 0..cut.height() {
        for c in 0..cut.width() {
            let (rr, cc) = (r as isize + dy, c as isize + dx);
            if rr >= 0 && cc >= 0 && (rr as usize) < side && (cc as usize) < side {
                pixels[rr as usize * side + cc as usize] = cut.get(r, c);
            }
        }
    }
    SilhouetteImage::new(side, side, pixels, [ox, oy]).ok()
}

/// Result of shifting centroids onto the projected centre of mass.
#[derive(Debug, Clone, PartialEq)]
pub struct ComCorrection {
    pub position: Vector3<f64>,
    /// Per camera: silhouette centroid minus projected COM, pixels.
    pub offsets_px: Vec<[f64; 2]>,
    /// Set when rendering or triangulation failed and `start` was returned.
    pub fallback: bool,
}

/// Re-triangulates the particle from its centroids shifted by the
/// centroid-to-COM offset of the model rendered at `q`. Each iteration
/// renders at the previous estimate.
pub fn correct_com(
    model: &ParticleModel,
    q: &Quaternion,
    rig: &CameraRig,
    centroids: &[[f64; 2]],
    start: &Vector3<f64>,
    iterate: usize,
) -> ComCorrection {
    let fallback = || ComCorrection { position: *start, offsets_px: Vec::new(), fallback: true };
    if centroids.len() != rig.len() {
        return fallback();
    }
    let mut pos = *start;
    let mut offsets = Vec::new();
    for _ in 0..iterate.max(1) {
        offsets.clear();
        let mut rays = Vec::with_capacity(rig.len());
        for (cam, c) in rig.cameras.iter().zip(centroids) {
            let Ok(shape) = project_model(model, &Pose::new(*q, pos), cam) else { return fallback() };
            let Ok(sc) = silhouette_centroid(&shape, Some([0.0, 0.0])) else { return fallback() };
            let d = [sc[0] - shape.com_px[0], sc[1] - shape.com_px[1]];
            offsets.push(d);
            rays.push(cam.back_project([c[0] - d[0], c[1] - d[1]]));
        }
        match triangulate(&rays) {
            Ok((p, _)) => pos = p,
            Err(_) => return fallback(),
        }
    }
    ComCorrection { position: pos, offsets_px: offsets, fallback: false }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrackParams {
    pub segmentation: SegmentationParams,
    /// RMS ray gap accepted when matching centroids, world units.
    pub gap_tol: f64,
    /// Largest distance between predicted and detected position, world units.
    pub max_jump: f64,
    pub com_iterations: usize,
    /// Blobs larger than this multiple of the camera's median blob area are
    /// treated as overlaps (only with at least three blobs in the camera).
    pub overlap_area_ratio: f64,
    /// Refine the orientation again at the COM-corrected position.
    pub refit_after_com: bool,
    pub fit: FitParams,
}

impl Default for TrackParams {
    fn default() -> Self {
        Self {
            segmentation: SegmentationParams::default(),
            gap_tol: 0.4,
            max_jump: 2.0,
            com_iterations: 1,
            overlap_area_ratio: 1.8,
            refit_after_com: true,
            fit: FitParams::default(),
        }
    }
}

/// Last known state of a live track, used to seed the next frame.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackState {
    pub track_id: u64,
    pub particle_type: String,
    pub frame_index: u64,
    pub position: Vector3<f64>,
    pub velocity: Vector3<f64>,
    pub q: Quaternion,
}

impl TrackState {
    pub fn predict(&self, frame_index: u64) -> Vector3<f64> {
        self.position + self.velocity * (frame_index as f64 - self.frame_index as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkipReason {
    /// Two matched particles claim the same blob.
    SharedBlob,
    /// A blob is much larger than a single particle.
    OversizedBlob,
    /// Fitting or window extraction failed.
    FitFailed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SkippedParticle {
    pub blob_indices: Vec<usize>,
    pub point: Vector3<f64>,
    pub reason: SkipReason,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParticleFit {
    /// Blob index per camera.
    pub blob_indices: Vec<usize>,
    /// Triangulated silhouette centroids.
    pub raw_position: Vector3<f64>,
    /// COM-corrected position.
    pub position: Vector3<f64>,
    pub com_fallback: bool,
    pub fit: FitResult,
    /// Track whose previous orientation seeded the fit.
    pub seeded_from: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameResult {
    pub frame_index: u64,
    pub time: f64,
    pub particles: Vec<ParticleFit>,
    pub skipped: Vec<SkippedParticle>,
    /// Blobs not used by any match (particle not visible in every camera).
    pub unmatched_blobs: usize,
}

/// Greedy nearest-neighbour association of `points` to `states` by predicted
/// position within `max_jump`. `compatible(state, point_index)` filters pairs.
fn associate(
    states: &[TrackState],
    points: &[Vector3<f64>],
    frame_index: u64,
    max_jump: f64,
    compatible: impl Fn(&TrackState, usize) -> bool,
) -> Vec<Option<usize>> {
    let mut pairs = Vec::new();
    for (si, s) in states.iter().enumerate() {
        if s.frame_index + 1 != frame_index {
            continue;
        }
        let pred = s.predict(frame_index);
        for (pi, p) in points.iter().enumerate() {
            let d = (p - pred).norm();
            if d <= max_jump && compatible(s, pi) {
                pairs.push((d, si, pi));
            }
        }
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut out = vec![None; points.len()];
    let mut used = vec![false; states.len()];
    for (_, si, pi) in pairs {
        if !used[si] && out[pi].is_none() {
            used[si] = true;
            out[pi] = Some(si);
        }
    }
    out
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) }
}

/// Fits every particle matched in all cameras. Particles near a live track
/// are refined from that track's orientation; others go through the
/// library. Per-particle failures are recorded, never propagated.
pub fn process_frame(
    obs: &FrameObservation,
    candidates: &[Candidate],
    rig: &CameraRig,
    prev: &[TrackState],
    params: &TrackParams,
) -> Result<FrameResult, TrackError> {
    if obs.blobs.len() != rig.len() {
        return Err(TrackError::CameraCount { got: obs.blobs.len(), expected: rig.len() });
    }
    let per_camera: Vec<Vec<[f64; 2]>> = obs.blobs.iter().map(|bs| bs.iter().map(|b| b.centroid).collect()).collect();
    let matches = match_centroids(rig, &per_camera, params.gap_tol);

    let tuples = candidate_tuples(rig, &per_camera, params.gap_tol);
    let mut claims: Vec<Vec<usize>> = per_camera.iter().map(|c| vec![0; c.len()]).collect();
    for t in &tuples {
        for (cam, &i) in t.indices.iter().enumerate() {
            claims[cam][i] += 1;
        }
    }
    let shares_blob = |indices: &[usize]| indices.iter().enumerate().any(|(cam, &i)| claims[cam][i] > 1);
    let area_limit: Vec<Option<f64>> = obs
        .blobs
        .iter()
        .map(|bs| {
            (bs.len() >= 3).then(|| {
                let mut a: Vec<f64> = bs.iter().map(|b| b.area as f64).collect();
                params.overlap_area_ratio * median(&mut a)
            })
        })
        .collect();

    let mut used: Vec<HashSet<usize>> = vec![HashSet::new(); rig.len()];
    let mut skipped = Vec::new();
    let mut accepted = Vec::new();
    for m in matches {
        for (cam, &i) in m.indices.iter().enumerate() {
            used[cam].insert(i);
        }
        let shared = shares_blob(&m.indices);
        let oversized = m
            .indices
            .iter()
            .enumerate()
            .any(|(cam, &i)| area_limit[cam].is_some_and(|l| obs.blobs[cam][i].area as f64 > l));
        let reason = if shared {
            Some(SkipReason::SharedBlob)
        } else if oversized {
            Some(SkipReason::OversizedBlob)
        } else {
            None
        };
        match reason {
            Some(reason) => skipped.push(SkippedParticle { blob_indices: m.indices, point: m.point, reason }),
            None => accepted.push(m),
        }
    }
    // Tuples that lost the greedy assignment to an overlapping one describe
    // the other particles of the overlap; report them too.
    for t in &tuples {
        let taken = t.indices.iter().enumerate().any(|(cam, &i)| used[cam].contains(&i) && claims[cam][i] == 1);
        if shares_blob(&t.indices) && !taken && !skipped.iter().any(|k| k.blob_indices == t.indices) {
            let fresh = t.indices.iter().enumerate().filter(|&(cam, i)| !used[cam].contains(i)).count();
            if fresh > 0 {
                for (cam, &i) in t.indices.iter().enumerate() {
                    used[cam].insert(i);
                }
                skipped.push(SkippedParticle { blob_indices: t.indices.clone(), point: t.point, reason: SkipReason::SharedBlob });
            }
        }
    }
    let unmatched_blobs = obs.blobs.iter().zip(&used).map(|(bs, u)| bs.len() - u.len()).sum();

    let points: Vec<Vector3<f64>> = accepted.iter().map(|m| m.point).collect();
    let seeds = associate(prev, &points, obs.frame_index, params.max_jump, |s, _| {
        candidates.iter().any(|c| c.model.name() == s.particle_type)
    });
    let window_world = candidates.first().map_or(0.0, |c| c.library.window_world());

    let fits: Vec<Result<ParticleFit, SkippedParticle>> = accepted
        .par_iter()
        .zip(seeds.par_iter())
        .map(|(m, seed)| {
            let fail = || SkippedParticle { blob_indices: m.indices.clone(), point: m.point, reason: SkipReason::FitFailed };
            let blobs: Vec<&Blob> = m.indices.iter().enumerate().map(|(cam, &i)| &obs.blobs[cam][i]).collect();
            let observed: Vec<Observation> = blobs
                .iter()
                .zip(&rig.cameras)
                .map(|(b, cam)| observation_window(b, cam, &m.point, window_world).and_then(|img| Observation::new(img).ok()))
                .collect::<Option<_>>()
                .ok_or_else(fail)?;
            let (fit, model, seeded_from) = match seed.map(|si| &prev[si]) {
                Some(s) => {
                    let c = candidates.iter().find(|c| c.model.name() == s.particle_type).ok_or_else(fail)?;
                    let fit = refine(c.model, rig, &observed, &m.point, &[s.q], &params.fit.nelder_mead).map_err(|_| fail())?;
                    (fit, c.model, Some(s.track_id))
                }
                None => {
                    let fit = classify_and_fit(candidates, rig, &observed, &m.point, &params.fit).map_err(|_| fail())?;
                    let model = candidates.iter().find(|c| c.model.name() == fit.particle_type).ok_or_else(fail)?.model;
                    (fit, model, None)
                }
            };
            let centroids: Vec<[f64; 2]> = blobs.iter().map(|b| b.centroid).collect();
            let com = correct_com(model, &fit.q, rig, &centroids, &m.point, params.com_iterations);
            let fit = if params.refit_after_com && !com.fallback {
                match refine(model, rig, &observed, &com.position, &[fit.q], &params.fit.nelder_mead) {
                    Ok(f) => FitResult {
                        iterations: fit.iterations + f.iterations,
                        evaluations: fit.evaluations + f.evaluations,
                        ..f
                    },
                    Err(_) => fit,
                }
            } else {
                fit
            };
            Ok(ParticleFit {
                blob_indices: m.indices.clone(),
                raw_position: m.point,
                position: com.position,
                com_fallback: com.fallback,
                fit,
                seeded_from,
            })
        })
        .collect();
    let mut particles = Vec::new();
    for f in fits {
        match f {
            Ok(p) => particles.push(p),
            Err(s) => skipped.push(s),
        }
    }
    Ok(FrameResult { frame_index: obs.frame_index, time: obs.time, particles, skipped, unmatched_blobs })
}

/// Per-sample flags.
pub mod flags {
    /// Orientation step exceeds the jump threshold.
    pub const JUMP: u32 = 1;
    /// COM correction fell back to the centroid triangulation.
    pub const COM_FALLBACK: u32 = 2;
    /// Nelder–Mead hit its iteration cap.
    pub const NOT_CONVERGED: u32 = 4;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackSample {
    pub frame_index: u64,
    pub time: f64,
    pub position: Vector3<f64>,
    pub q: Quaternion,
    pub euler: EulerZYX,
    pub total_error: f64,
    pub converged: bool,
    /// Symmetry-reduced rotation from the previous sample, degrees.
    pub step_deg: Option<f64>,
    pub flags: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParticleTrack {
    pub track_id: u64,
    pub particle_type: String,
    pub samples: Vec<TrackSample>,
}

impl ParticleTrack {
    pub fn jump_count(&self) -> usize {
        self.samples.iter().filter(|s| s.flags & flags::JUMP != 0).count()
    }

    fn state(&self) -> TrackState {
        let last = self.samples.last().expect("tracks are never empty");
        let velocity = match self.samples.len() {
            0 | 1 => Vector3::zeros(),
            n => {
                let prev = &self.samples[n - 2];
                (last.position - prev.position) / (last.frame_index - prev.frame_index) as f64
            }
        };
        TrackState {
            track_id: self.track_id,
            particle_type: self.particle_type.clone(),
            frame_index: last.frame_index,
            position: last.position,
            velocity,
            q: last.q,
        }
    }
}

/// Incremental constant-velocity linker. Tracks end when a frame has no
/// detection for them.
#[derive(Debug, Default)]
pub struct Linker<'a> {
    models: Vec<&'a ParticleModel>,
    max_jump: f64,
    tracks: Vec<ParticleTrack>,
    live: Vec<usize>,
    last_frame: Option<u64>,
}

impl<'a> Linker<'a> {
    pub fn new(models: &[&'a ParticleModel], max_jump: f64) -> Self {
        Self { models: models.to_vec(), max_jump, ..Default::default() }
    }

    /// States of the tracks that were extended in the last pushed frame.
    pub fn live_states(&self) -> Vec<TrackState> {
        self.live.iter().map(|&t| self.tracks[t].state()).collect()
    }

    pub fn push(&mut self, frame: &FrameResult) -> Result<(), TrackError> {
        if let Some(prev) = self.last_frame {
            if frame.frame_index <= prev {
                return Err(TrackError::FrameOrder { prev, next: frame.frame_index });
            }
        }
        self.last_frame = Some(frame.frame_index);
        let states = self.live_states();
        let points: Vec<Vector3<f64>> = frame.particles.iter().map(|p| p.position).collect();
        let links = associate(&states, &points, frame.frame_index, self.max_jump, |s, pi| {
            s.particle_type == frame.particles[pi].fit.particle_type
        });
        let mut live = Vec::with_capacity(points.len());
        for (p, link) in frame.particles.iter().zip(links) {
            let t = match link {
                Some(si) => self.live[si],
                None => {
                    self.tracks.push(ParticleTrack {
                        track_id: self.tracks.len() as u64,
                        particle_type: p.fit.particle_type.clone(),
                        samples: Vec::new(),
                    });
                    self.tracks.len() - 1
                }
            };
            let sym = self.models.iter().find(|m| m.name() == p.fit.particle_type).map(|m| m.symmetry().clone());
            let track = &mut self.tracks[t];
            let step_deg = match (track.samples.last(), &sym) {
                (Some(prev), Some(sym)) => Some(angle_between(&prev.q, &p.fit.q, sym).to_degrees()),
                (Some(prev), None) => Some(crate::rotation::rotation_distance(&prev.q, &p.fit.q).to_degrees()),
                (None, _) => None,
            };
            let mut f = 0;
            if let Some(step) = step_deg {
                let mut hist: Vec<f64> = track.samples.iter().filter_map(|s| s.step_deg).collect();
                if hist.len() >= 3 && step > (JUMP_FACTOR * median(&mut hist)).max(JUMP_FLOOR_DEG) {
                    f |= flags::JUMP;
                }
            }
            if p.com_fallback {
                f |= flags::COM_FALLBACK;
            }
            if !p.fit.converged {
                f |= flags::NOT_CONVERGED;
            }
            track.samples.push(TrackSample {
                frame_index: frame.frame_index,
                time: frame.time,
                position: p.position,
                q: p.fit.q,
                euler: p.fit.q.to_euler_zyx(),
                total_error: p.fit.total_error,
                converged: p.fit.converged,
                step_deg,
                flags: f,
            });
            live.push(t);
        }
        self.live = live;
        Ok(())
    }

    pub fn finish(self) -> Vec<ParticleTrack> {
        self.tracks
    }
}

/// Links per-frame results into tracks.
pub fn link_tracks(frames: &[FrameResult], models: &[&ParticleModel], max_jump: f64) -> Result<Vec<ParticleTrack>, TrackError> {
    let mut linker = Linker::new(models, max_jump);
    for f in frames {
        linker.push(f)?;
    }
    Ok(linker.finish())
}

/// Per-frame results and the linked tracks of a sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackingRun {
    pub frames: Vec<FrameResult>,
    pub tracks: Vec<ParticleTrack>,
}

/// Processes frames in order, seeding each from the tracks live after the
/// previous frame.
pub fn run_sequence(
    frames: &[FrameObservation],
    candidates: &[Candidate],
    rig: &CameraRig,
    params: &TrackParams,
) -> Result<TrackingRun, TrackError> {
    let models: Vec<&ParticleModel> = candidates.iter().map(|c| c.model).collect();
    let mut linker = Linker::new(&models, params.max_jump);
    let mut results = Vec::with_capacity(frames.len());
    for obs in frames {
        let fr = process_frame(obs, candidates, rig, &linker.live_states(), params)?;
        linker.push(&fr)?;
        log::debug!("frame {}: {} fitted, {} skipped", fr.frame_index, fr.particles.len(), fr.skipped.len());
        results.push(fr);
    }
    Ok(TrackingRun { frames: results, tracks: linker.finish() })
}

/// One line of a track record file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrackRecord {
    pub track_id: u64,
    pub frame: u64,
    pub time: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub qw: f64,
    pub qx: f64,
    pub qy: f64,
    pub qz: f64,
    pub euler_zyx: [f64; 3],
    #[serde(rename = "type")]
    pub particle_type: String,
    pub residual: f64,
    pub flags: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordHeader {
    format: String,
    format_version: u32,
}

const RECORD_FORMAT: &str = "silhouette-pose-tracks";

pub fn track_records(tracks: &[ParticleTrack]) -> Vec<TrackRecord> {
    let mut out: Vec<TrackRecord> = tracks
        .iter()
        .flat_map(|t| {
            t.samples.iter().map(move |s| TrackRecord {
                track_id: t.track_id,
                frame: s.frame_index,
                time: s.time,
                x: s.position.x,
                y: s.position.y,
                z: s.position.z,
                qw: s.q.w,
                qx: s.q.x,
                qy: s.q.y,
                qz: s.q.z,
                euler_zyx: [s.euler.psi, s.euler.theta, s.euler.phi],
                particle_type: t.particle_type.clone(),
                residual: s.total_error,
                flags: s.flags,
            })
        })
        .collect();
    out.sort_by_key(|r| (r.frame, r.track_id));
    out
}

/// Writes a header line followed by one JSON record per line.
pub fn write_track_records(mut w: impl Write, records: &[TrackRecord]) -> Result<(), TrackError> {
    let header = RecordHeader { format: RECORD_FORMAT.into(), format_version: TRACK_FORMAT_VERSION };
    writeln!(w, "{}", serde_json::to_string(&header).map_err(|e| TrackError::Format(e.to_string()))?)?;
    for r in records {
        writeln!(w, "{}", serde_json::to_string(r).map_err(|e| TrackError::Format(e.to_string()))?)?;
    }
    Ok(())
}

pub fn read_track_records(path: impl AsRef<Path>) -> Result<Vec<TrackRecord>, TrackError> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut lines = f.lines();
    let first = lines.next().ok_or_else(|| TrackError::Format("empty file".into()))??;
    let header: RecordHeader =
        serde_json::from_str(&first).map_err(|e| TrackError::Format(format!("line 1: {e}")))?;
    if header.format != RECORD_FORMAT || header.format_version != TRACK_FORMAT_VERSION {
        return Err(TrackError::Format(format!("unsupported {} v{}", header.format, header.format_version)));
    }
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| TrackError::Format(format!("line {}: {e}", i + 2)))?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::RigPreset;
    use crate::geometry::{builtin_model, ParticleKind};
    use crate::orientlib::{LibraryParams, OrientationLibrary};
    use crate::render::{focal_for_window, render_scene, window_world_size};
    use crate::rotation::random_orientation;
    use std::sync::OnceLock;

    fn bright() -> SegmentationParams {
        SegmentationParams::default()
    }

    #[test]
    fn blank_image_has_no_blobs() {
        let img = SilhouetteImage::zeros(50, 40).unwrap();
        assert!(segment(&img, 0, &bright()).is_empty());
    }

    #[test]
    fn speckle_removed_and_polarity_respected() {
        let mut img = SilhouetteImage::zeros(60, 60).unwrap();
        for r in 10..20 {
            for c in 10..25 {
                img.set(r, c, 1.0);
            }
        }
        img.set(40, 40, 1.0);
        img.set(40, 41, 1.0);
        img.set(41, 40, 1.0);
        let blobs = segment(&img, 2, &bright());
        assert_eq!(blobs.len(), 1);
        assert_eq!(blobs[0].area, 150);
        assert_eq!(blobs[0].bbox, [10, 10, 25, 20]);
        assert_eq!(blobs[0].camera_index, 2);
        assert!((blobs[0].centroid[0] - 17.5).abs() < 1e-12 && (blobs[0].centroid[1] - 15.0).abs() < 1e-12);
        assert_eq!(blobs[0].cutout.width(), 15 + 2 * CUTOUT_PADDING);

        let inv = SilhouetteImage::new(60, 60, img.pixels().iter().map(|v| 1.0 - v).collect(), [0.0; 2]).unwrap();
        let dark = SegmentationParams { polarity: Polarity::DarkParticle, ..bright() };
        let b2 = segment(&inv, 2, &dark);
        assert_eq!(b2, blobs);
        // With the wrong polarity the background is the only component.
        assert_eq!(segment(&inv, 2, &bright())[0].area, 3600 - 153);
    }

    #[test]
    fn diagonal_pixels_are_connected() {
        let mut img = SilhouetteImage::zeros(30, 30).unwrap();
        for i in 5..20 {
            img.set(i, i, 1.0);
        }
        let blobs = segment(&img, 0, &bright());
        assert_eq!(blobs.len(), 1);
        assert_eq!(blobs[0].area, 15);
    }

    #[test]
    fn invalid_params_rejected() {
        let p = SegmentationParams { min_area: 10, max_area: 10, ..bright() };
        assert!(p.validate().is_err());
        let p = SegmentationParams { intensity_threshold: 1.5, ..bright() };
        assert!(p.validate().is_err());
    }

    fn rig_for(px: f64, models: &[&ParticleModel]) -> (CameraRig, f64) {
        let ww = window_world_size(models.iter().copied());
        let rig = RigPreset::NearPlanar4.build(500.0, focal_for_window(px, ww, 500.0), [1024, 1024]).unwrap();
        (rig, ww)
    }

    #[test]
    fn rendered_particle_gives_one_blob_at_render_centroid() {
        let m = builtin_model(ParticleKind::ChiralRight);
        let (rig, _) = rig_for(60.0, &[&m]);
        for i in 0..10 {
            let pose = Pose::new(random_orientation(i), Vector3::new(0.3, -0.2, 0.5));
            for cam in &rig.cameras {
                let img = render_scene(&[(&m, pose)], cam).unwrap();
                let blobs = segment(&img, 0, &bright());
                assert_eq!(blobs.len(), 1);
                let c = silhouette_centroid(&project_model(&m, &pose, cam).unwrap(), Some([0.0, 0.0])).unwrap();
                let d = ((blobs[0].centroid[0] - c[0]).powi(2) + (blobs[0].centroid[1] - c[1]).powi(2)).sqrt();
                assert!(d < 0.5, "{d}");
            }
        }
    }

    #[test]
    fn symmetric_model_has_zero_com_shift() {
        // Six equal arms along the axes, viewed along two of them: every
        // projection is point-symmetric about the projected COM.
        let v = vec![Vector3::zeros(), Vector3::x(), -Vector3::x(), Vector3::y(), -Vector3::y(), Vector3::z(), -Vector3::z()];
        let edges = (1..7).map(|i| (0, i)).collect();
        let star = crate::geometry::WireframeModel::new("star", v, edges, 0.2, None, crate::rotation::SymmetryGroup::identity());
        let m = ParticleModel::Wireframe(star.unwrap());
        let look = |p: Vector3<f64>| crate::camera::CameraModel::look_at(p, Vector3::zeros(), Vector3::z(), 8000.0, [512, 512]).unwrap();
        let rig = CameraRig::new(vec![look(Vector3::new(0.0, -500.0, 0.0)), look(Vector3::new(500.0, 0.0, 0.0))]).unwrap();
        let q = Quaternion::IDENTITY;
        let centroids: Vec<[f64; 2]> = rig
            .cameras
            .iter()
            .map(|c| silhouette_centroid(&project_model(&m, &Pose::at_origin(q), c).unwrap(), Some([0.0, 0.0])).unwrap())
            .collect();
        let r = correct_com(&m, &q, &rig, &centroids, &Vector3::zeros(), 1);
        assert!(!r.fallback);
        for d in &r.offsets_px {
            assert!(d[0].abs() < 1e-9 && d[1].abs() < 1e-9, "{d:?}");
        }
        assert!(r.position.norm() < 1e-9);
    }

    fn uncorrected_and_corrected(m: &ParticleModel, rig: &CameraRig, pose: &Pose) -> (f64, f64, f64) {
        let centroids: Vec<[f64; 2]> = rig
            .cameras
            .iter()
            .map(|c| silhouette_centroid(&project_model(m, pose, c).unwrap(), Some([0.0, 0.0])).unwrap())
            .collect();
        let rays: Vec<_> = rig.cameras.iter().zip(&centroids).map(|(c, p)| c.back_project(*p)).collect();
        let raw = triangulate(&rays).unwrap().0;
        let c1 = correct_com(m, &pose.orientation, rig, &centroids, &raw, 1);
        let c2 = correct_com(m, &pose.orientation, rig, &centroids, &raw, 2);
        ((raw - pose.position).norm(), (c1.position - pose.position).norm(), (c2.position - c1.position).norm().max(0.0) / (c1.position - raw).norm())
    }

    #[test]
    fn com_correction_moves_towards_truth_and_contracts() {
        let m = builtin_model(ParticleKind::ChiralRight);
        let (rig, _) = rig_for(60.0, &[&m]);
        let mut better = 0;
        let mut contract = 0;
        let n = 50;
        for i in 0..n {
            let pose = Pose::new(random_orientation(100 + i), Vector3::new(0.5, 1.0, -0.7));
            let (raw, corr, ratio) = uncorrected_and_corrected(&m, &rig, &pose);
            better += (corr < raw) as usize;
            contract += (ratio < 1.0) as usize;
        }
        assert!(better >= 48, "{better}");
        assert!(contract >= 48, "{contract}");
    }

    #[test]
    fn linking_follows_constant_velocity_and_splits_on_gaps() {
        let m = builtin_model(ParticleKind::Tetrad);
        let fit = |q: Quaternion| FitResult {
            q,
            total_error: 0.0,
            particle_type: m.name().into(),
            iterations: 1,
            evaluations: 1,
            converged: true,
        };
        let particle = |p: Vector3<f64>| ParticleFit {
            blob_indices: vec![0],
            raw_position: p,
            position: p,
            com_fallback: false,
            fit: fit(Quaternion::IDENTITY),
            seeded_from: None,
        };
        // Two particles crossing: A moves +x, B moves -x, offset in y by more
        // than the per-frame step but less than max_jump.
        let mut frames = Vec::new();
        for f in 0..20u64 {
            let t = f as f64;
            let a = Vector3::new(-10.0 + t, 0.0, 0.0);
            let b = Vector3::new(10.0 - t, 0.6, 0.0);
            frames.push(FrameResult {
                frame_index: f,
                time: t,
                particles: vec![particle(a), particle(b)],
                skipped: vec![],
                unmatched_blobs: 0,
            });
        }
        let tracks = link_tracks(&frames, &[&m], 1.5).unwrap();
        assert_eq!(tracks.len(), 2);
        for t in &tracks {
            assert_eq!(t.samples.len(), 20);
            let dx = t.samples[19].position.x - t.samples[0].position.x;
            assert!(dx.abs() > 18.0);
            let sign = dx.signum();
            assert!(t.samples.windows(2).all(|w| (w[1].position.x - w[0].position.x) * sign > 0.0));
        }

        // A ten-frame gap ends the track.
        let mut gap: Vec<FrameResult> = frames.iter().map(|f| FrameResult { particles: vec![f.particles[0].clone()], ..f.clone() }).collect();
        for f in gap.iter_mut().skip(5).take(10) {
            f.particles.clear();
        }
        let tracks = link_tracks(&gap, &[&m], 1.5).unwrap();
        assert_eq!(tracks.len(), 2);
        assert_eq!(tracks[0].samples.len(), 5);
        assert_eq!(tracks[1].samples.len(), 5);

        // Type mismatch never links.
        let mut mixed = frames[..2].to_vec();
        mixed[1].particles[0].fit.particle_type = "other".into();
        let tracks = link_tracks(&mixed, &[&m], 1.5).unwrap();
        assert_eq!(tracks.len(), 3);

        let mut bad = frames[..2].to_vec();
        bad[1].frame_index = 0;
        assert!(link_tracks(&bad, &[&m], 1.5).is_err());
    }

    #[test]
    fn jump_flags_only_on_outlier_steps() {
        let m = builtin_model(ParticleKind::ChiralRight);
        let axis = Vector3::new(0.3, 0.5, 0.8).normalize();
        let mut frames = Vec::new();
        for f in 0..30u64 {
            let mut angle = (f as f64).to_radians();
            if f >= 20 {
                angle += 0.3;
            }
            let q = Quaternion::from_axis_angle(&axis, angle).unwrap();
            frames.push(FrameResult {
                frame_index: f,
                time: f as f64,
                particles: vec![ParticleFit {
                    blob_indices: vec![0],
                    raw_position: Vector3::zeros(),
                    position: Vector3::zeros(),
                    com_fallback: false,
                    fit: FitResult { q, total_error: 0.0, particle_type: m.name().into(), iterations: 0, evaluations: 0, converged: true },
                    seeded_from: None,
                }],
                skipped: vec![],
                unmatched_blobs: 0,
            });
        }
        let tracks = link_tracks(&frames, &[&m], 1.0).unwrap();
        assert_eq!(tracks.len(), 1);
        let flagged: Vec<u64> = tracks[0].samples.iter().filter(|s| s.flags & flags::JUMP != 0).map(|s| s.frame_index).collect();
        assert_eq!(flagged, vec![20]);
        assert!((tracks[0].samples[5].step_deg.unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn records_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.jsonl");
        let s = TrackSample {
            frame_index: 3,
            time: 0.1,
            position: Vector3::new(1.0, 2.0, 3.0),
            q: random_orientation(1),
            euler: random_orientation(1).to_euler_zyx(),
            total_error: 0.01,
            converged: true,
            step_deg: None,
            flags: flags::JUMP,
        };
        let t = ParticleTrack { track_id: 7, particle_type: "tetrad".into(), samples: vec![s] };
        let recs = track_records(&[t]);
        write_track_records(std::fs::File::create(&path).unwrap(), &recs).unwrap();
        assert_eq!(read_track_records(&path).unwrap(), recs);
        std::fs::write(&path, "{\"format\":\"x\",\"format_version\":1}\n").unwrap();
        assert!(read_track_records(&path).is_err());
    }

    struct Setup {
        model: ParticleModel,
        rig: CameraRig,
        library: OrientationLibrary,
    }

    fn setup() -> &'static Setup {
        static S: OnceLock<Setup> = OnceLock::new();
        S.get_or_init(|| {
            let model = builtin_model(ParticleKind::Tetrad);
            let (rig, ww) = rig_for(60.0, &[&model]);
            let library = OrientationLibrary::build(&model, &rig, LibraryParams::default(), ww).unwrap();
            Setup { model, rig, library }
        })
    }

    fn frame(s: &Setup, poses: &[Pose], index: u64) -> FrameObservation {
        let images: Vec<SilhouetteImage> = s
            .rig
            .cameras
            .iter()
            .map(|c| render_scene(&poses.iter().map(|p| (&s.model, *p)).collect::<Vec<_>>(), c).unwrap())
            .collect();
        FrameObservation::from_images(index, index as f64, &images, &bright()).unwrap()
    }

    #[test]
    fn cold_frame_uses_library_and_is_accurate() {
        let s = setup();
        let cands = [Candidate { model: &s.model, library: &s.library }];
        let params = TrackParams::default();
        let truth = Pose::new(random_orientation(5), Vector3::new(0.4, -0.3, 0.2));
        let fr = process_frame(&frame(s, &[truth], 0), &cands, &s.rig, &[], &params).unwrap();
        assert_eq!(fr.particles.len(), 1);
        let p = &fr.particles[0];
        assert!(p.seeded_from.is_none());
        let err = angle_between(&p.fit.q, &truth.orientation, s.model.symmetry()).to_degrees();
        assert!(err < 0.5, "{err}");
        assert!((p.position - truth.position).norm() < (p.raw_position - truth.position).norm());
    }

    #[test]
    fn seeded_fits_need_fewer_evaluations() {
        let s = setup();
        let cands = [Candidate { model: &s.model, library: &s.library }];
        let params = TrackParams::default();
        let axis = Vector3::new(0.2, -0.4, 0.9).normalize();
        let (mut seeded, mut cold) = (Vec::new(), Vec::new());
        for i in 0..12 {
            let q0 = random_orientation(200 + i);
            let q1 = Quaternion::from_axis_angle(&axis, 2f64.to_radians()).unwrap() * q0;
            let pos = Vector3::new(0.1, 0.0, 0.0);
            let prev = TrackState { track_id: 0, particle_type: s.model.name().into(), frame_index: 0, position: pos, velocity: Vector3::zeros(), q: q0 };
            let obs = frame(s, &[Pose::new(q1, pos)], 1);
            let a = process_frame(&obs, &cands, &s.rig, &[prev], &params).unwrap();
            let b = process_frame(&obs, &cands, &s.rig, &[], &params).unwrap();
            assert_eq!(a.particles[0].seeded_from, Some(0));
            seeded.push(a.particles[0].fit.iterations as f64);
            cold.push(b.particles[0].fit.iterations as f64);
        }
        assert!(median(&mut seeded) < median(&mut cold));
    }

    #[test]
    fn overlapping_particles_are_skipped() {
        let s = setup();
        let cands = [Candidate { model: &s.model, library: &s.library }];
        let params = TrackParams { gap_tol: 1.0, ..Default::default() };
        // Two particles on the line of sight of camera 0: one blob there,
        // two in the other cameras.
        let cam = &s.rig.cameras[0];
        let a = Vector3::zeros();
        let b = a + 30.0 * cam.view_direction();
        let poses = [Pose::new(random_orientation(1), a), Pose::new(random_orientation(2), b)];
        let obs = frame(s, &poses, 0);
        assert_eq!(obs.blobs[0].len(), 1);
        let fr = process_frame(&obs, &cands, &s.rig, &[], &params).unwrap();
        assert!(fr.particles.is_empty());
        assert_eq!(fr.skipped.len(), 2);
        assert!(fr.skipped.iter().all(|k| k.reason == SkipReason::SharedBlob));
    }

    #[test]
    fn particle_missing_from_a_camera_is_not_reconstructed() {
        let s = setup();
        let cands = [Candidate { model: &s.model, library: &s.library }];
        let mut obs = frame(s, &[Pose::at_origin(random_orientation(3))], 0);
        obs.blobs[2].clear();
        let fr = process_frame(&obs, &cands, &s.rig, &[], &TrackParams::default()).unwrap();
        assert!(fr.particles.is_empty());
        assert_eq!(fr.unmatched_blobs, 3);
    }
}

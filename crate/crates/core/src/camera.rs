//! Straight-ray pinhole cameras, triangulation and multi-camera centroid matching.
//!
//! Pixel coordinates are `(u, v)` with `u` growing to the right and `v`
//! growing downwards; pixel `(col, row)` covers `[col, col+1) x [row, row+1)`.
//! Calibrations must already be effective pinhole parameters: refraction at
//! tank walls is not modelled.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const CALIBRATION_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CameraError {
    #[error("point at or behind the camera plane (depth {0})")]
    BehindCamera(f64),
    #[error("view_direction and up must be non-zero and orthogonal (dot = {0})")]
    NotOrthogonal(f64),
    #[error("focal_length must be > 0, got {0}")]
    NonPositiveFocal(f64),
    #[error("triangulation needs at least two rays, got {0}")]
    TooFewRays(usize),
    #[error("rays are parallel within 1e-6 rad; triangulation is degenerate")]
    Degenerate,
    #[error("camera rig must contain at least one camera")]
    EmptyRig,
    #[error("unknown rig preset `{0}`")]
    UnknownPreset(String),
    #[error("camera index {index} out of range for a rig of {len} cameras")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("calibration parse error at line {line}, column {column}: {msg}")]
    Parse { line: usize, column: usize, msg: String },
    #[error("unsupported calibration format_version {0}")]
    Version(u32),
    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CameraRecord", into = "CameraRecord")]
pub struct CameraModel {
    position: Vector3<f64>,
    view_direction: Vector3<f64>,
    up: Vector3<f64>,
    right: Vector3<f64>,
    focal_length: f64,
    principal_point: [f64; 2],
    sensor_size: [u32; 2],
}

impl CameraModel {
    const ORTHO_TOL: f64 = 1e-9;

    pub fn new(
        position: Vector3<f64>,
        view_direction: Vector3<f64>,
        up: Vector3<f64>,
        focal_length: f64,
        principal_point: [f64; 2],
        sensor_size: [u32; 2],
    ) -> Result<Self, CameraError> {
        let (vn, un) = (view_direction.norm(), up.norm());
        if !(vn > 0.0) || !(un > 0.0) {
            return Err(CameraError::NotOrthogonal(f64::NAN));
        }
        let view_direction = view_direction / vn;
        let up = up / un;
        let dot = view_direction.dot(&up);
        if dot.abs() > Self::ORTHO_TOL {
            return Err(CameraError::NotOrthogonal(dot));
        }
        if !(focal_length > 0.0) || !focal_length.is_finite() {
            return Err(CameraError::NonPositiveFocal(focal_length));
        }
        let right = view_direction.cross(&up);
        Ok(Self { position, view_direction, up, right, focal_length, principal_point, sensor_size })
    }

    /// Camera at `position` aimed at `target`; `up_hint` is orthogonalised.
    pub fn look_at(
        position: Vector3<f64>,
        target: Vector3<f64>,
        up_hint: Vector3<f64>,
        focal_length: f64,
        sensor_size: [u32; 2],
    ) -> Result<Self, CameraError> {
        let view = (target - position).normalize();
        let mut up = up_hint - view * view.dot(&up_hint);
        if up.norm() < 1e-6 {
            let alt = if view.z.abs() < 0.9 { Vector3::z() } else { Vector3::y() };
            up = alt - view * view.dot(&alt);
        }
        let up = up.normalize();
        let pp = [sensor_size[0] as f64 / 2.0, sensor_size[1] as f64 / 2.0];
        Self::new(position, view, up, focal_length, pp, sensor_size)
    }

    pub fn position(&self) -> &Vector3<f64> {
        &self.position
    }
    pub fn view_direction(&self) -> &Vector3<f64> {
        &self.view_direction
    }
    pub fn up(&self) -> &Vector3<f64> {
        &self.up
    }
    pub fn right(&self) -> &Vector3<f64> {
        &self.right
    }
    pub fn focal_length(&self) -> f64 {
        self.focal_length
    }
    pub fn principal_point(&self) -> [f64; 2] {
        self.principal_point
    }
    pub fn sensor_size(&self) -> [u32; 2] {
        self.sensor_size
    }

    pub fn with_focal_length(&self, focal_length: f64) -> Result<Self, CameraError> {
        Self::new(self.position, self.view_direction, self.up, focal_length, self.principal_point, self.sensor_size)
    }

    /// Distance of `p` in front of the camera plane.
    pub fn depth(&self, p: &Vector3<f64>) -> f64 {
        (p - self.position).dot(&self.view_direction)
    }

    pub fn project_point(&self, p: &Vector3<f64>) -> Result<[f64; 2], CameraError> {
        let d = p - self.position;
        let z = d.dot(&self.view_direction);
        if !(z > 0.0) {
            return Err(CameraError::BehindCamera(z));
        }
        let s = self.focal_length / z;
        Ok([self.principal_point[0] + s * d.dot(&self.right), self.principal_point[1] - s * d.dot(&self.up)])
    }

    pub fn back_project(&self, px: [f64; 2]) -> Ray {
        let a = (px[0] - self.principal_point[0]) / self.focal_length;
        let b = (px[1] - self.principal_point[1]) / self.focal_length;
        let dir = self.view_direction + a * self.right - b * self.up;
        Ray { origin: self.position, direction: dir.normalize() }
    }

    /// 3x4 projection matrix `K [R | -R c]` in homogeneous pixel coordinates.
    pub fn projection_matrix(&self) -> nalgebra::Matrix3x4<f64> {
        let f = self.focal_length;
        let [cx, cy] = self.principal_point;
        let k = Matrix3::new(f, 0.0, cx, 0.0, f, cy, 0.0, 0.0, 1.0);
        let r = Matrix3::from_rows(&[
            self.right.transpose(),
            (-self.up).transpose(),
            self.view_direction.transpose(),
        ]);
        let t = -(r * self.position);
        let mut rt = nalgebra::Matrix3x4::zeros();
        rt.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
        rt.fixed_view_mut::<3, 1>(0, 3).copy_from(&t);
        k * rt
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CameraRecord {
    position: [f64; 3],
    view_direction: [f64; 3],
    up: [f64; 3],
    focal_length: f64,
    principal_point: [f64; 2],
    sensor_size: [u32; 2],
}

impl TryFrom<CameraRecord> for CameraModel {
    type Error = CameraError;

    fn try_from(r: CameraRecord) -> Result<Self, Self::Error> {
        CameraModel::new(
            r.position.into(),
            r.view_direction.into(),
            r.up.into(),
            r.focal_length,
            r.principal_point,
            r.sensor_size,
        )
    }
}

impl From<CameraModel> for CameraRecord {
    fn from(c: CameraModel) -> Self {
        CameraRecord {
            position: c.position.into(),
            view_direction: c.view_direction.into(),
            up: c.up.into(),
            focal_length: c.focal_length,
            principal_point: c.principal_point,
            sensor_size: c.sensor_size,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ray {
    pub origin: Vector3<f64>,
    pub direction: Vector3<f64>,
}

impl Ray {
    pub fn distance_to(&self, p: &Vector3<f64>) -> f64 {
        let d = p - self.origin;
        (d - self.direction * d.dot(&self.direction)).norm()
    }

    pub fn at(&self, t: f64) -> Vector3<f64> {
        self.origin + t * self.direction
    }
}

/// Least-squares closest point to all rays and the RMS point-to-ray distance.
pub fn triangulate(rays: &[Ray]) -> Result<(Vector3<f64>, f64), CameraError> {
    if rays.len() < 2 {
        return Err(CameraError::TooFewRays(rays.len()));
    }
    // |d0 x d| = sin(angle); parallel or anti-parallel within 1e-6 rad.
    if rays.iter().all(|r| r.direction.cross(&rays[0].direction).norm() < 1e-6) {
        return Err(CameraError::Degenerate);
    }
    let (point, ssd) = least_squares_point(rays).ok_or(CameraError::Degenerate)?;
    Ok((point, (ssd / rays.len() as f64).sqrt()))
}

/// Returns the closest point and the sum of squared point-to-ray distances.
fn least_squares_point(rays: &[Ray]) -> Option<(Vector3<f64>, f64)> {
    let mut a = Matrix3::zeros();
    let mut b = Vector3::zeros();
    for r in rays {
        let p = Matrix3::identity() - r.direction * r.direction.transpose();
        a += p;
        b += p * r.origin;
    }
    let x = a.cholesky()?.solve(&b);
    let ssd = rays.iter().map(|r| r.distance_to(&x).powi(2)).sum();
    Some((x, ssd))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraRig {
    pub cameras: Vec<CameraModel>,
}

impl CameraRig {
    pub fn new(cameras: Vec<CameraModel>) -> Result<Self, CameraError> {
        if cameras.is_empty() {
            return Err(CameraError::EmptyRig);
        }
        Ok(Self { cameras })
    }

    pub fn len(&self) -> usize {
        self.cameras.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cameras.is_empty()
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Self, CameraError> {
        let cams = indices
            .iter()
            .map(|&i| {
                self.cameras.get(i).cloned().ok_or(CameraError::IndexOutOfRange { index: i, len: self.len() })
            })
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(cams)
    }

    pub fn with_focal_length(&self, f: f64) -> Result<Self, CameraError> {
        Self::new(self.cameras.iter().map(|c| c.with_focal_length(f)).collect::<Result<_, _>>()?)
    }

    /// Hash of the camera poses (position, view direction, up). Intrinsics are
    /// excluded: silhouettes are compared in windows scaled to the particle,
    /// so the focal length and sensor size do not change their shape.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for c in &self.cameras {
            for v in [c.position, c.view_direction, c.up] {
                for x in v.iter() {
                    h.update(format!("{:.9e};", x).as_bytes());
                }
            }
            h.update(b"|");
        }
        hex::encode(&h.finalize()[..8])
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CameraError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|source| CameraError::Io { path: path.display().to_string(), source })?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self, CameraError> {
        let file: CalibrationFile = serde_json::from_str(text).map_err(|e| CameraError::Parse {
            line: e.line(),
            column: e.column(),
            msg: e.to_string(),
        })?;
        if file.format_version != CALIBRATION_FORMAT_VERSION {
            return Err(CameraError::Version(file.format_version));
        }
        Self::new(file.cameras)
    }

    pub fn to_json(&self) -> String {
        let file = CalibrationFile { format_version: CALIBRATION_FORMAT_VERSION, cameras: self.cameras.clone() };
        serde_json::to_string_pretty(&file).expect("rig serialises")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CameraError> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json())
            .map_err(|source| CameraError::Io { path: path.display().to_string(), source })
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CalibrationFile {
    format_version: u32,
    cameras: Vec<CameraModel>,
}

/// Camera arrangements used by the robustness studies. All cameras aim at
/// the world origin from the same working distance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RigPreset {
    /// Four cameras on a shallow arc spanning ±25° azimuth, alternating ±3° elevation.
    #[serde(rename = "near_planar_4")]
    NearPlanar4,
    #[serde(rename = "orthogonal_2")]
    Orthogonal2,
    #[serde(rename = "orthogonal_3")]
    Orthogonal3,
    #[serde(rename = "tetrahedral_4")]
    Tetrahedral4,
    /// Camera 1 of the near-planar arc.
    Single,
}

pub const DEFAULT_WORKING_DISTANCE: f64 = 500.0;
pub const DEFAULT_FOCAL_LENGTH: f64 = 4000.0;
pub const DEFAULT_SENSOR: [u32; 2] = [1024, 1024];

const NEAR_PLANAR_AZIMUTH_DEG: [f64; 4] = [-25.0, -8.5, 8.5, 25.0];
const NEAR_PLANAR_ELEVATION_DEG: [f64; 4] = [3.0, -3.0, 3.0, -3.0];

impl RigPreset {
    pub const ALL: [RigPreset; 5] =
        [RigPreset::Single, RigPreset::Orthogonal2, RigPreset::Orthogonal3, RigPreset::NearPlanar4, RigPreset::Tetrahedral4];

    pub fn as_str(&self) -> &'static str {
        match self {
            RigPreset::NearPlanar4 => "near_planar_4",
            RigPreset::Orthogonal2 => "orthogonal_2",
            RigPreset::Orthogonal3 => "orthogonal_3",
            RigPreset::Tetrahedral4 => "tetrahedral_4",
            RigPreset::Single => "single",
        }
    }

    /// Unit vectors from the origin towards each camera.
    pub fn camera_directions(&self) -> Vec<Vector3<f64>> {
        let arc = |i: usize| {
            let a = NEAR_PLANAR_AZIMUTH_DEG[i].to_radians();
            let e = NEAR_PLANAR_ELEVATION_DEG[i].to_radians();
            Vector3::new(a.sin() * e.cos(), -a.cos() * e.cos(), e.sin())
        };
        match self {
            RigPreset::NearPlanar4 => (0..4).map(arc).collect(),
            RigPreset::Single => vec![arc(0)],
            RigPreset::Orthogonal2 => vec![Vector3::x(), Vector3::y()],
            RigPreset::Orthogonal3 => vec![Vector3::x(), Vector3::y(), Vector3::z()],
            RigPreset::Tetrahedral4 => {
                crate::rotation::tetrahedron_vertices().iter().map(|v| v.normalize()).collect()
            }
        }
    }

    pub fn build(&self, working_distance: f64, focal_length: f64, sensor: [u32; 2]) -> Result<CameraRig, CameraError> {
        let cams = self
            .camera_directions()
            .into_iter()
            .map(|d| CameraModel::look_at(d * working_distance, Vector3::zeros(), Vector3::z(), focal_length, sensor))
            .collect::<Result<Vec<_>, _>>()?;
        CameraRig::new(cams)
    }
}

impl fmt::Display for RigPreset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RigPreset {
    type Err = CameraError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        RigPreset::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| CameraError::UnknownPreset(s.to_string()))
    }
}

/// Preset rig with the default working distance, focal length and sensor.
pub fn preset_rig(name: &str) -> Result<CameraRig, CameraError> {
    name.parse::<RigPreset>()?.build(DEFAULT_WORKING_DISTANCE, DEFAULT_FOCAL_LENGTH, DEFAULT_SENSOR)
}

/// One centroid per camera, triangulated to a 3D point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CentroidMatch {
    /// Index into each camera's centroid list, in camera order.
    pub indices: Vec<usize>,
    pub point: Vector3<f64>,
    pub rms_gap: f64,
}

/// Every tuple (one centroid per camera) whose triangulation RMS gap is at
/// most `gap_tol`. Centroids may appear in several tuples.
pub fn candidate_tuples(rig: &CameraRig, per_camera: &[Vec<[f64; 2]>], gap_tol: f64) -> Vec<CentroidMatch> {
    let n_cam = rig.len();
    if per_camera.len() != n_cam || n_cam < 2 || per_camera.iter().any(|c| c.is_empty()) {
        return Vec::new();
    }
    let rays: Vec<Vec<Ray>> = rig
        .cameras
        .iter()
        .zip(per_camera)
        .map(|(cam, cs)| cs.iter().map(|&c| cam.back_project(c)).collect())
        .collect();
    let mut out = Vec::new();
    let mut chosen: Vec<usize> = Vec::with_capacity(n_cam);
    let mut chosen_rays: Vec<Ray> = Vec::with_capacity(n_cam);
    let budget = gap_tol * gap_tol * n_cam as f64;
    search(&rays, &mut chosen, &mut chosen_rays, budget, gap_tol, &mut out);
    out
}

fn search(
    rays: &[Vec<Ray>],
    chosen: &mut Vec<usize>,
    chosen_rays: &mut Vec<Ray>,
    ssd_budget: f64,
    gap_tol: f64,
    out: &mut Vec<CentroidMatch>,
) {
    let depth = chosen.len();
    if depth == rays.len() {
        if let Ok((point, rms_gap)) = triangulate(chosen_rays) {
            if rms_gap <= gap_tol {
                out.push(CentroidMatch { indices: chosen.clone(), point, rms_gap });
            }
        }
        return;
    }
    for (i, ray) in rays[depth].iter().enumerate() {
        chosen.push(i);
        chosen_rays.push(ray.clone());
        // The optimal SSD can only grow as rays are added, so a partial
        // tuple already over budget cannot produce an accepted match.
        let keep = chosen_rays.len() < 2
            || least_squares_point(chosen_rays).map(|(_, ssd)| ssd <= ssd_budget).unwrap_or(false);
        if keep {
            search(rays, chosen, chosen_rays, ssd_budget, gap_tol, out);
        }
        chosen.pop();
        chosen_rays.pop();
    }
}

/// Greedy minimum-gap assignment: candidate tuples are accepted in order of
/// increasing RMS gap, skipping any that reuse a centroid.
pub fn match_centroids(rig: &CameraRig, per_camera: &[Vec<[f64; 2]>], gap_tol: f64) -> Vec<CentroidMatch> {
    let mut cands = candidate_tuples(rig, per_camera, gap_tol);
    cands.sort_by(|a, b| a.rms_gap.total_cmp(&b.rms_gap).then_with(|| a.indices.cmp(&b.indices)));
    let mut used: Vec<Vec<bool>> = per_camera.iter().map(|c| vec![false; c.len()]).collect();
    let mut out = Vec::new();
    for c in cands {
        if c.indices.iter().enumerate().any(|(cam, &i)| used[cam][i]) {
            continue;
        }
        for (cam, &i) in c.indices.iter().enumerate() {
            used[cam][i] = true;
        }
        out.push(c);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn preset_names_match_serde() {
        for p in RigPreset::ALL {
            assert_eq!(serde_json::to_string(&p).unwrap(), format!("\"{}\"", p.as_str()));
            assert_eq!(p.as_str().parse::<RigPreset>().unwrap(), p);
        }
    }

    fn cam() -> CameraModel {
        CameraModel::look_at(Vector3::new(3.0, -40.0, 5.0), Vector3::zeros(), Vector3::z(), 1500.0, [800, 600]).unwrap()
    }

    #[test]
    fn optical_axis_projects_to_principal_point() {
        let c = cam();
        for t in [1.0, 10.0, 1e3] {
            let p = c.position() + t * c.view_direction();
            let px = c.project_point(&p).unwrap();
            assert!((px[0] - 400.0).abs() < 1e-9 && (px[1] - 300.0).abs() < 1e-9);
        }
    }

    #[test]
    fn doubling_depth_halves_offset() {
        let c = cam();
        let off = 0.7 * c.right() + 0.3 * c.up();
        let p1 = c.position() + 10.0 * c.view_direction() + off * 10.0;
        let p2 = c.position() + 20.0 * c.view_direction() + off * 10.0;
        let a = c.project_point(&p1).unwrap();
        let b = c.project_point(&p2).unwrap();
        let pp = c.principal_point();
        assert!(((a[0] - pp[0]) - 2.0 * (b[0] - pp[0])).abs() < 1e-9);
        assert!(((a[1] - pp[1]) - 2.0 * (b[1] - pp[1])).abs() < 1e-9);
    }

    #[test]
    fn behind_camera_rejected() {
        let c = cam();
        let p = c.position() - c.view_direction();
        assert!(matches!(c.project_point(&p), Err(CameraError::BehindCamera(_))));
        assert!(matches!(c.project_point(c.position()), Err(CameraError::BehindCamera(_))));
    }

    #[test]
    fn cube_corners_match_projection_matrix() {
        let c = cam();
        let m = c.projection_matrix();
        for i in 0..8 {
            let p = Vector3::new((i & 1) as f64, ((i >> 1) & 1) as f64, ((i >> 2) & 1) as f64) * 2.0 - Vector3::repeat(1.0);
            let h = m * p.push(1.0);
            let px = c.project_point(&p).unwrap();
            assert!((h[0] / h[2] - px[0]).abs() < 1e-9);
            assert!((h[1] / h[2] - px[1]).abs() < 1e-9);
        }
    }

    #[test]
    fn back_projection_round_trip() {
        let c = cam();
        let ray = c.back_project(c.principal_point());
        assert!((ray.direction - c.view_direction()).norm() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let px = [rng.random_range(0.0..800.0), rng.random_range(0.0..600.0)];
            let ray = c.back_project(px);
            assert!(ray.distance_to(c.position()) < 1e-9);
            assert!((ray.direction.norm() - 1.0).abs() < 1e-12);
            for t in [0.5, 5.0, 500.0] {
                let back = c.project_point(&ray.at(t)).unwrap();
                assert!((back[0] - px[0]).abs() < 1e-6 && (back[1] - px[1]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn non_orthogonal_camera_rejected() {
        let r = CameraModel::new(Vector3::zeros(), Vector3::z(), Vector3::new(0.0, 1.0, 0.1), 100.0, [0.0, 0.0], [10, 10]);
        assert!(matches!(r, Err(CameraError::NotOrthogonal(_))));
        let r = CameraModel::new(Vector3::zeros(), Vector3::z(), Vector3::y(), 0.0, [0.0, 0.0], [10, 10]);
        assert!(matches!(r, Err(CameraError::NonPositiveFocal(_))));
    }

    #[test]
    fn triangulate_exact_intersection() {
        let p = Vector3::new(1.0, 2.0, 3.0);
        let rays: Vec<Ray> = [Vector3::new(10.0, 0.0, 0.0), Vector3::new(0.0, -7.0, 1.0)]
            .iter()
            .map(|o| Ray { origin: *o, direction: (p - o).normalize() })
            .collect();
        let (x, gap) = triangulate(&rays).unwrap();
        assert!((x - p).norm() < 1e-12);
        assert!(gap < 1e-12);
    }

    #[test]
    fn triangulate_symmetric_offset() {
        // Two perpendicular rays passing at ±δ from P along z.
        let p = Vector3::new(0.5, -0.5, 2.0);
        let d = 0.01;
        let rays = vec![
            Ray { origin: p + Vector3::new(-5.0, 0.0, d), direction: Vector3::x() },
            Ray { origin: p + Vector3::new(0.0, -5.0, -d), direction: Vector3::y() },
        ];
        let (x, gap) = triangulate(&rays).unwrap();
        assert!((x - p).norm() < 1e-12);
        assert!((gap - d).abs() < 1e-12);
    }

    #[test]
    fn triangulate_rejects_parallel() {
        let rays = vec![
            Ray { origin: Vector3::zeros(), direction: Vector3::x() },
            Ray { origin: Vector3::y(), direction: Vector3::x() },
        ];
        assert!(matches!(triangulate(&rays), Err(CameraError::Degenerate)));
        assert!(matches!(triangulate(&rays[..1]), Err(CameraError::TooFewRays(1))));
    }

    #[test]
    fn triangulate_order_invariant() {
        let rig = preset_rig("tetrahedral_4").unwrap();
        let p = Vector3::new(0.3, -0.2, 0.1);
        let mut rays: Vec<Ray> = rig
            .cameras
            .iter()
            .map(|c| c.back_project({
                let px = c.project_point(&p).unwrap();
                [px[0] + 0.3, px[1] - 0.2]
            }))
            .collect();
        let (a, ga) = triangulate(&rays).unwrap();
        rays.reverse();
        rays.swap(0, 2);
        let (b, gb) = triangulate(&rays).unwrap();
        assert!((a - b).norm() < 1e-12);
        assert!((ga - gb).abs() < 1e-12);
    }

    #[test]
    fn triangulate_with_pixel_noise() {
        // Monte Carlo: noisy rays from a tetrahedral rig. The single-ray
        // footprint of σ px at depth Z is σ Z / f.
        let rig = preset_rig("tetrahedral_4").unwrap();
        let sigma = 0.1;
        let footprint = sigma * DEFAULT_WORKING_DISTANCE / DEFAULT_FOCAL_LENGTH;
        let noise = Normal::new(0.0, sigma).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut worst: f64 = 0.0;
        for _ in 0..500 {
            let p = Vector3::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
            let rays: Vec<Ray> = rig
                .cameras
                .iter()
                .map(|c| {
                    let px = c.project_point(&p).unwrap();
                    c.back_project([px[0] + noise.sample(&mut rng), px[1] + noise.sample(&mut rng)])
                })
                .collect();
            let (x, _) = triangulate(&rays).unwrap();
            worst = worst.max((x - p).norm());
        }
        assert!(worst < 3.0 * footprint, "worst {worst} vs footprint {footprint}");
    }

    #[test]
    fn preset_geometry() {
        let o2 = preset_rig("orthogonal_2").unwrap();
        assert!(o2.cameras[0].view_direction().dot(o2.cameras[1].view_direction()).abs() < 1e-15);
        let t4 = preset_rig("tetrahedral_4").unwrap();
        for i in 0..4 {
            for j in i + 1..4 {
                let c = t4.cameras[i].view_direction().dot(t4.cameras[j].view_direction());
                assert!((c + 1.0 / 3.0).abs() < 1e-12);
            }
        }
        let np = preset_rig("near_planar_4").unwrap();
        let mut max_angle: f64 = 0.0;
        for i in 0..4 {
            for j in i + 1..4 {
                let c = np.cameras[i].view_direction().dot(np.cameras[j].view_direction());
                max_angle = max_angle.max(c.clamp(-1.0, 1.0).acos().to_degrees());
            }
        }
        assert!(max_angle < 60.0 && max_angle > 40.0, "{max_angle}");
        for rig in [&o2, &t4, &np] {
            for c in &rig.cameras {
                assert!((c.position().norm() - DEFAULT_WORKING_DISTANCE).abs() < 1e-9);
                assert!((c.view_direction() + c.position() / DEFAULT_WORKING_DISTANCE).norm() < 1e-12);
            }
        }
        assert!(matches!(preset_rig("pentagonal"), Err(CameraError::UnknownPreset(_))));
    }

    #[test]
    fn calibration_round_trip_and_fingerprint() {
        let rig = preset_rig("near_planar_4").unwrap();
        let back = CameraRig::from_json(&rig.to_json()).unwrap();
        assert_eq!(back.fingerprint(), rig.fingerprint());
        assert_eq!(rig.with_focal_length(123.0).unwrap().fingerprint(), rig.fingerprint());
        assert_ne!(preset_rig("tetrahedral_4").unwrap().fingerprint(), rig.fingerprint());
        let err = CameraRig::from_json("{\"format_version\": 1, \"cameras\": [ {\"bogus\": 1} ]}").unwrap_err();
        assert!(matches!(err, CameraError::Parse { line: 1, .. }));
    }

    fn project_all(rig: &CameraRig, pts: &[Vector3<f64>]) -> Vec<Vec<[f64; 2]>> {
        rig.cameras.iter().map(|c| pts.iter().map(|p| c.project_point(p).unwrap()).collect()).collect()
    }

    #[test]
    fn match_single_particle() {
        let rig = preset_rig("near_planar_4").unwrap();
        let p = Vector3::new(0.4, 0.1, -0.3);
        let m = match_centroids(&rig, &project_all(&rig, &[p]), 0.4);
        assert_eq!(m.len(), 1);
        assert!(m[0].rms_gap < 1e-9);
        assert!((m[0].point - p).norm() < 1e-9);
    }

    #[test]
    fn match_two_particles_without_swaps() {
        let rig = preset_rig("near_planar_4").unwrap();
        let pts = [Vector3::new(-6.0, 1.0, 2.0), Vector3::new(5.0, -2.0, -3.0)];
        let mut obs = project_all(&rig, &pts);
        // Scramble the order on two cameras.
        obs[1].reverse();
        obs[3].reverse();
        let m = match_centroids(&rig, &obs, 0.4);
        assert_eq!(m.len(), 2);
        for mm in &m {
            let truth = if (mm.point - pts[0]).norm() < 1e-6 { 0 } else { 1 };
            assert!((mm.point - pts[truth]).norm() < 1e-6);
            assert_eq!(mm.indices, vec![truth, 1 - truth, truth, 1 - truth]);
        }
    }

    #[test]
    fn match_requires_every_camera() {
        let rig = preset_rig("near_planar_4").unwrap();
        let mut obs = project_all(&rig, &[Vector3::new(1.0, 0.0, 0.0)]);
        obs[2].clear();
        assert!(match_centroids(&rig, &obs, 0.4).is_empty());
    }

    #[test]
    fn matches_are_disjoint_in_dense_scenes() {
        let rig = preset_rig("tetrahedral_4").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let pts: Vec<Vector3<f64>> = (0..6)
                .map(|_| Vector3::new(rng.random_range(-20.0..20.0), rng.random_range(-20.0..20.0), rng.random_range(-20.0..20.0)))
                .collect();
            let m = match_centroids(&rig, &project_all(&rig, &pts), 2.0);
            for cam in 0..4 {
                let mut seen = std::collections::HashSet::new();
                for mm in &m {
                    assert!(seen.insert(mm.indices[cam]));
                }
            }
        }
    }
}

//! Library of standard orientations for cold-start first guesses.
//!
//! Orientations are the product of Fibonacci-sphere axes and evenly spaced
//! rotation angles. Each entry stores one binary silhouette per camera at the
//! cost resolution, rendered in the same centroid-centred window convention
//! as observations.

use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::camera::{CameraModel, CameraRig};
use crate::cost::{mask_error, BinaryMask, CostError, Observation, BINARY_THRESHOLD, COST_RESOLUTION};
use crate::geometry::ParticleModel;
use crate::render::{focal_for_window, render_aligned, Pose};
use crate::rotation::{angle_between, fibonacci_axes, Quaternion};

pub const LIBRARY_FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"SPOSELIB";
/// Orientations closer than this (symmetry-reduced) to an earlier entry are
/// dropped.
pub const DUPLICATE_TOL: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum LibraryError {
    #[error(transparent)]
    Cost(#[from] CostError),
    #[error("library was built for rig {expected}, queried with rig {got}")]
    FingerprintMismatch { expected: String, got: String },
    #[error("{got} observations for a library of {expected} cameras")]
    CameraCount { got: usize, expected: usize },
    #[error("observation resolution {got} differs from library resolution {expected}")]
    Resolution { got: usize, expected: usize },
    #[error("library parameters must be positive")]
    EmptyGrid,
    #[error("corrupt library file: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LibraryParams {
    pub n_axes: usize,
    pub n_angles: usize,
    pub resolution: usize,
}

impl Default for LibraryParams {
    fn default() -> Self {
        Self { n_axes: 100, n_angles: 16, resolution: COST_RESOLUTION }
    }
}

/// Grid orientations before duplicate removal. Angles sit at interval
/// midpoints of `[-pi, pi)`, so the grid never contains the identity twice.
pub fn grid_orientations(n_axes: usize, n_angles: usize) -> Vec<Quaternion> {
    let axes = fibonacci_axes(n_axes);
    let mut out = Vec::with_capacity(n_axes * n_angles);
    for axis in &axes {
        for k in 0..n_angles {
            let theta = -std::f64::consts::PI + 2.0 * std::f64::consts::PI * (k as f64 + 0.5) / n_angles as f64;
            out.push(Quaternion::from_axis_angle(axis, theta).expect("fibonacci axes are unit"));
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    particle_type: String,
    model_hash: String,
    fingerprint: String,
    params: LibraryParams,
    window_world: f64,
    n_cameras: usize,
    n_entries: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OrientationLibrary {
    header: Header,
    orientations: Vec<Quaternion>,
    /// Entry-major: entry `i`, camera `c` at `i * n_cameras + c`.
    masks: Vec<BinaryMask>,
}

fn model_hash(model: &ParticleModel) -> String {
    hex::encode(&Sha256::digest(model.to_json().as_bytes())[..8])
}

/// Camera with the rig camera's pose whose focal length maps `window_world`
/// at the working distance onto `resolution` pixels.
fn library_camera(cam: &CameraModel, window_world: f64, resolution: usize) -> Result<CameraModel, LibraryError> {
    let depth = cam.depth(&Vector3::zeros());
    cam.with_focal_length(focal_for_window(resolution as f64, window_world, depth))
        .map_err(|e| LibraryError::Cost(CostError::Render(e.into())))
}

impl OrientationLibrary {
    /// Renders every grid orientation through every camera. The particle is
    /// placed at the world origin, which rig presets look at.
    pub fn build(
        model: &ParticleModel,
        rig: &CameraRig,
        params: LibraryParams,
        window_world: f64,
    ) -> Result<Self, LibraryError> {
        if params.n_axes == 0 || params.n_angles == 0 || params.resolution == 0 || window_world <= 0.0 {
            return Err(LibraryError::EmptyGrid);
        }
        let sym = model.symmetry();
        let mut orientations: Vec<Quaternion> = Vec::new();
        for q in grid_orientations(params.n_axes, params.n_angles) {
            if orientations.iter().all(|k| angle_between(&q, k, sym) >= DUPLICATE_TOL) {
                orientations.push(q);
            }
        }
        let cams = rig
            .cameras
            .iter()
            .map(|c| library_camera(c, window_world, params.resolution))
            .collect::<Result<Vec<_>, _>>()?;
        let res = params.resolution;
        let half = -(res as f64) / 2.0;
        let masks: Vec<Vec<BinaryMask>> = orientations
            .par_iter()
            .map(|q| {
                cams.iter()
                    .map(|cam| {
                        let (img, _) = render_aligned(model, &Pose::at_origin(*q), cam, res, res, [half, half], None)
                            .map_err(CostError::from)?;
                        Ok(BinaryMask::from_image(&img, BINARY_THRESHOLD))
                    })
                    .collect::<Result<Vec<_>, LibraryError>>()
            })
            .collect::<Result<_, _>>()?;
        let header = Header {
            particle_type: model.name().to_string(),
            model_hash: model_hash(model),
            fingerprint: rig.fingerprint(),
            params,
            window_world,
            n_cameras: rig.len(),
            n_entries: orientations.len(),
        };
        Ok(Self { header, orientations, masks: masks.into_iter().flatten().collect() })
    }

    pub fn len(&self) -> usize {
        self.orientations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.orientations.is_empty()
    }

    pub fn particle_type(&self) -> &str {
        &self.header.particle_type
    }

    pub fn fingerprint(&self) -> &str {
        &self.header.fingerprint
    }

    pub fn window_world(&self) -> f64 {
        self.header.window_world
    }

    pub fn params(&self) -> LibraryParams {
        self.header.params
    }

    pub fn orientations(&self) -> &[Quaternion] {
        &self.orientations
    }

    pub fn n_cameras(&self) -> usize {
        self.header.n_cameras
    }

    pub fn mask(&self, entry: usize, camera: usize) -> &BinaryMask {
        &self.masks[entry * self.header.n_cameras + camera]
    }

    pub fn check_rig(&self, rig: &CameraRig) -> Result<(), LibraryError> {
        let got = rig.fingerprint();
        if got != self.header.fingerprint {
            return Err(LibraryError::FingerprintMismatch { expected: self.header.fingerprint.clone(), got });
        }
        Ok(())
    }

    /// Keeps only the given cameras, in the given order.
    pub fn subset(&self, cameras: &[usize], rig: &CameraRig) -> Result<Self, LibraryError> {
        let n = self.header.n_cameras;
        let masks = (0..self.len()).flat_map(|i| cameras.iter().map(move |&c| self.masks[i * n + c].clone())).collect();
        let header = Header { fingerprint: rig.fingerprint(), n_cameras: cameras.len(), ..self.header.clone() };
        Ok(Self { header, orientations: self.orientations.clone(), masks })
    }

    /// The `k` entries with the lowest total error against `observed`,
    /// ascending (ties broken by entry index).
    pub fn best_guesses(
        &self,
        rig: &CameraRig,
        observed: &[Observation],
        k: usize,
    ) -> Result<Vec<(Quaternion, f64)>, LibraryError> {
        self.check_rig(rig)?;
        let n_cam = self.header.n_cameras;
        if observed.len() != n_cam {
            return Err(LibraryError::CameraCount { got: observed.len(), expected: n_cam });
        }
        let res = self.header.params.resolution;
        if let Some(o) = observed.iter().find(|o| o.library_mask().width() != res || o.library_mask().height() != res) {
            return Err(LibraryError::Resolution { got: o.library_mask().width(), expected: res });
        }
        let k = k.min(self.len());
        if k == 0 {
            return Ok(Vec::new());
        }
        // Visit entries by increasing lower bound and stop once no remaining
        // entry can enter the top k. Ordering is by (error, index).
        let mut order: Vec<(f64, usize)> = (0..self.len())
            .map(|i| {
                let b: f64 = observed.iter().enumerate().map(|(c, o)| o.lower_bound(self.mask(i, c))).sum();
                (b * (1.0 - 1e-12), i)
            })
            .collect();
        order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut top: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
        let beaten = |e: f64, i: usize, top: &[(f64, usize)]| {
            top.len() == k && (e, i) > top[k - 1]
        };
        for (bound, i) in order {
            if beaten(bound, i, &top) {
                if top.len() == k && bound > top[k - 1].0 {
                    break;
                }
                continue;
            }
            let mut total = 0.0;
            for (c, obs) in observed.iter().enumerate() {
                total += mask_error(self.mask(i, c), obs.library_mask())?.epsilon;
                if beaten(total, i, &top) {
                    break;
                }
            }
            if !beaten(total, i, &top) {
                let pos = top.partition_point(|&t| t < (total, i));
                top.insert(pos, (total, i));
                top.truncate(k);
            }
        }
        Ok(top.into_iter().map(|(e, i)| (self.orientations[i], e)).collect())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), LibraryError> {
        let mut w = io::BufWriter::new(fs::File::create(path)?);
        w.write_all(MAGIC)?;
        w.write_all(&LIBRARY_FORMAT_VERSION.to_le_bytes())?;
        let header = serde_json::to_vec(&self.header).expect("header serialises");
        w.write_all(&(header.len() as u64).to_le_bytes())?;
        w.write_all(&header)?;
        for q in &self.orientations {
            for v in q.to_array() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        for m in &self.masks {
            for word in m.words() {
                w.write_all(&word.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, LibraryError> {
        let mut r = io::BufReader::new(fs::File::open(path)?);
        let corrupt = |m: &str| LibraryError::Corrupt(m.to_string());
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(corrupt("bad magic"));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        let version = u32::from_le_bytes(b4);
        if version != LIBRARY_FORMAT_VERSION {
            return Err(LibraryError::Corrupt(format!("unsupported version {version}")));
        }
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8)?;
        let len = u64::from_le_bytes(b8) as usize;
        if len > 1 << 20 {
            return Err(corrupt("oversized header"));
        }
        let mut hbuf = vec![0u8; len];
        r.read_exact(&mut hbuf)?;
        let header: Header = serde_json::from_slice(&hbuf).map_err(|e| LibraryError::Corrupt(e.to_string()))?;
        let mut orientations = Vec::with_capacity(header.n_entries);
        for _ in 0..header.n_entries {
            let mut a = [0.0; 4];
            for v in &mut a {
                r.read_exact(&mut b8)?;
                *v = f64::from_le_bytes(b8);
            }
            let norm = a.iter().map(|v| v * v).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > 1e-9 {
                return Err(corrupt("non-unit quaternion"));
            }
            // Stored values are already canonical; keep them bit for bit.
            orientations.push(Quaternion::raw(a[0], a[1], a[2], a[3]));
        }
        let res = header.params.resolution;
        let words = res.div_ceil(64) * res;
        let mut masks = Vec::with_capacity(header.n_entries * header.n_cameras);
        for _ in 0..header.n_entries * header.n_cameras {
            let mut bits = Vec::with_capacity(words);
            for _ in 0..words {
                r.read_exact(&mut b8)?;
                bits.push(u64::from_le_bytes(b8));
            }
            masks.push(BinaryMask::from_words(res, res, bits).expect("word count matches"));
        }
        if r.read(&mut [0u8; 1])? != 0 {
            return Err(corrupt("trailing bytes"));
        }
        Ok(Self { header, orientations, masks })
    }

    /// Cache file name for a (particle type, rig) pair.
    pub fn cache_path(dir: impl AsRef<Path>, model: &ParticleModel, rig: &CameraRig) -> PathBuf {
        dir.as_ref().join(format!("{}-{}.splib", model.name(), rig.fingerprint()))
    }

    /// Loads a cached library when its header matches the request, otherwise
    /// builds one and writes it to the cache.
    pub fn load_or_build(
        dir: impl AsRef<Path>,
        model: &ParticleModel,
        rig: &CameraRig,
        params: LibraryParams,
        window_world: f64,
    ) -> Result<Self, LibraryError> {
        let path = Self::cache_path(&dir, model, rig);
        if let Ok(lib) = Self::load(&path) {
            let h = &lib.header;
            if h.model_hash == model_hash(model)
                && h.fingerprint == rig.fingerprint()
                && h.params == params
                && h.window_world == window_world
                && h.n_cameras == rig.len()
            {
                return Ok(lib);
            }
            log::info!("rebuilding stale library {}", path.display());
        }
        let lib = Self::build(model, rig, params, window_world)?;
        fs::create_dir_all(&dir)?;
        lib.save(&path)?;
        Ok(lib)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::RigPreset;
    use crate::geometry::{builtin_model, ParticleKind};
    use crate::render::window_world_size;
    use crate::rotation::{random_orientation, rotation_distance, SymmetryGroup};

    const SIZE: f64 = 60.0;

    fn setup(kind: ParticleKind) -> (ParticleModel, CameraRig, f64) {
        let model = builtin_model(kind);
        let ww = window_world_size([&model]);
        let rig = RigPreset::NearPlanar4.build(500.0, focal_for_window(SIZE, ww, 500.0), [1024, 1024]).unwrap();
        (model, rig, ww)
    }

    fn observe(model: &ParticleModel, rig: &CameraRig, q: &Quaternion) -> Vec<Observation> {
        let h = -SIZE / 2.0;
        rig.cameras
            .iter()
            .map(|cam| {
                let (img, _) = render_aligned(model, &Pose::at_origin(*q), cam, 60, 60, [h, h], None).unwrap();
                Observation::new(img).unwrap()
            })
            .collect()
    }

    fn small_params() -> LibraryParams {
        LibraryParams { n_axes: 12, n_angles: 4, resolution: 100 }
    }

    #[test]
    fn default_grid_without_symmetry_has_1600_entries() {
        let (model, rig, ww) = setup(ParticleKind::ChiralRight);
        let model = model.with_symmetry(SymmetryGroup::identity());
        let lib = OrientationLibrary::build(&model, &rig.subset(&[0]).unwrap(), LibraryParams::default(), ww).unwrap();
        assert_eq!(lib.len(), 1600);
    }

    #[test]
    fn symmetric_duplicates_counted_by_matrix_oracle() {
        let grid = grid_orientations(100, 16);
        for group in [SymmetryGroup::two_fold(&Vector3::z()).unwrap(), SymmetryGroup::tetrahedral()] {
            // Two grid entries are equivalent when their matrices differ by a
            // group element.
            let mats: Vec<_> = grid.iter().map(|q| q.to_matrix()).collect();
            let sym: Vec<_> = group.elements().iter().map(|s| s.to_matrix()).collect();
            let mut kept: Vec<usize> = Vec::new();
            for i in 0..grid.len() {
                let dup = kept.iter().any(|&j| sym.iter().any(|s| (mats[j] * s - mats[i]).norm() < 1e-6));
                if !dup {
                    kept.push(i);
                }
            }
            let (model, rig, ww) = setup(ParticleKind::ChiralRight);
            let model = model.with_symmetry(group);
            let lib = OrientationLibrary::build(&model, &rig.subset(&[0]).unwrap(), LibraryParams::default(), ww)
                .unwrap();
            assert_eq!(lib.len(), kept.len());
            assert!(lib.len() <= 1600);
        }
    }

    #[test]
    fn single_axis_single_angle() {
        let (model, rig, ww) = setup(ParticleKind::Tetrad);
        let lib = OrientationLibrary::build(&model, &rig, LibraryParams { n_axes: 1, n_angles: 1, resolution: 100 }, ww)
            .unwrap();
        assert_eq!(lib.len(), 1);
        assert!(matches!(
            OrientationLibrary::build(&model, &rig, LibraryParams { n_axes: 0, n_angles: 1, resolution: 100 }, ww),
            Err(LibraryError::EmptyGrid)
        ));
    }

    #[test]
    fn exact_entry_ranks_first_with_zero_error() {
        let (model, rig, ww) = setup(ParticleKind::ChiralLeft);
        let lib = OrientationLibrary::build(&model, &rig, small_params(), ww).unwrap();
        let q = lib.orientations()[17];
        // Rendering at the library scale reproduces the entry exactly.
        let lib_rig = CameraRig::new(
            rig.cameras.iter().map(|c| library_camera(c, ww, 100).unwrap()).collect(),
        )
        .unwrap();
        let obs: Vec<Observation> = lib_rig
            .cameras
            .iter()
            .map(|cam| {
                let (img, _) = render_aligned(&model, &Pose::at_origin(q), cam, 100, 100, [-50.0, -50.0], None).unwrap();
                Observation::new(img).unwrap()
            })
            .collect();
        let best = lib.best_guesses(&rig, &obs, 4).unwrap();
        assert_eq!(best[0].0, q);
        assert_eq!(best[0].1, 0.0);
    }

    #[test]
    fn full_ranking_is_monotone_and_k4_contains_rank1() {
        let (model, rig, ww) = setup(ParticleKind::Tetrad);
        let lib = OrientationLibrary::build(&model, &rig, small_params(), ww).unwrap();
        let obs = observe(&model, &rig, &random_orientation(4));
        let all = lib.best_guesses(&rig, &obs, lib.len()).unwrap();
        assert_eq!(all.len(), lib.len());
        assert!(all.windows(2).all(|w| w[0].1 <= w[1].1));
        let top4 = lib.best_guesses(&rig, &obs, 4).unwrap();
        assert_eq!(top4[0], all[0]);
        assert_eq!(&top4[..], &all[..4]);
    }

    #[test]
    fn rank1_guess_close_to_truth() {
        let (model, rig, ww) = setup(ParticleKind::ChiralRight);
        let lib = OrientationLibrary::build(&model, &rig, LibraryParams::default(), ww).unwrap();
        let sym = model.symmetry();
        let mut misses = 0;
        for seed in 0..200 {
            let q = random_orientation(seed);
            let best = lib.best_guesses(&rig, &observe(&model, &rig, &q), 4).unwrap();
            if angle_between(&best[0].0, &q, sym).to_degrees() > 25.0 {
                misses += 1;
            }
        }
        assert!(misses <= 2, "{misses} of 200 rank-1 guesses beyond 25 degrees");
    }

    #[test]
    fn midway_orientation_has_nearby_guess() {
        let (model, rig, ww) = setup(ParticleKind::ChiralRight);
        let lib = OrientationLibrary::build(&model, &rig, LibraryParams::default(), ww).unwrap();
        let sym = model.symmetry();
        let grid = lib.orientations();
        // Spacing of the grid: typical nearest-neighbour distance.
        let spacing = (0..grid.len())
            .step_by(37)
            .map(|i| {
                (0..grid.len()).filter(|&j| j != i).map(|j| angle_between(&grid[i], &grid[j], sym)).fold(f64::MAX, f64::min)
            })
            .fold(0.0, f64::max);
        for (i, j) in [(5, 6), (400, 401), (900, 917)] {
            let mid = Quaternion::new(
                grid[i].w + grid[j].w,
                grid[i].x + grid[j].x,
                grid[i].y + grid[j].y,
                grid[i].z + grid[j].z,
            )
            .unwrap();
            let best = lib.best_guesses(&rig, &observe(&model, &rig, &mid), 4).unwrap();
            let nearest = best.iter().map(|(g, _)| angle_between(g, &mid, sym)).fold(f64::MAX, f64::min);
            assert!(nearest <= spacing, "nearest {nearest} > spacing {spacing}");
            assert!(rotation_distance(&grid[i], &mid) > 0.0);
        }
    }

    #[test]
    fn fingerprint_and_shape_checks() {
        let (model, rig, ww) = setup(ParticleKind::Tetrad);
        let lib = OrientationLibrary::build(&model, &rig, small_params(), ww).unwrap();
        let obs = observe(&model, &rig, &Quaternion::IDENTITY);
        let other = RigPreset::Tetrahedral4.build(500.0, 4000.0, [1024, 1024]).unwrap();
        assert!(matches!(lib.best_guesses(&other, &obs, 4), Err(LibraryError::FingerprintMismatch { .. })));
        assert!(matches!(lib.best_guesses(&rig, &obs[..3], 4), Err(LibraryError::CameraCount { .. })));
        // Focal length does not enter the fingerprint.
        assert!(lib.check_rig(&rig.with_focal_length(1234.0).unwrap()).is_ok());
    }

    #[test]
    fn build_is_deterministic_and_cache_round_trips() {
        let (model, rig, ww) = setup(ParticleKind::Oloid);
        let a = OrientationLibrary::build(&model, &rig, small_params(), ww).unwrap();
        let b = OrientationLibrary::build(&model, &rig, small_params(), ww).unwrap();
        assert_eq!(a, b);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.splib");
        a.save(&path).unwrap();
        assert_eq!(OrientationLibrary::load(&path).unwrap(), a);
        let cached = OrientationLibrary::load_or_build(dir.path(), &model, &rig, small_params(), ww).unwrap();
        assert_eq!(cached, a);
        assert!(OrientationLibrary::cache_path(dir.path(), &model, &rig).exists());
        std::fs::write(&path, b"garbage").unwrap();
        assert!(OrientationLibrary::load(&path).is_err());
    }
}

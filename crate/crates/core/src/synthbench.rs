//! Seeded synthetic benchmarks: accuracy against image size, noise, camera
//! count and arrangement, plus the position/orientation coupling studies.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camera::{CameraError, CameraRig, RigPreset, DEFAULT_SENSOR};
use crate::cost::Observation;
use crate::geometry::{builtin_model, ParticleKind, ParticleModel};
use crate::optimize::{classify_and_fit, Candidate, FitParams};
use crate::orientlib::{LibraryError, LibraryParams, OrientationLibrary};
use crate::render::{focal_for_window, project_model, render_aligned, silhouette_centroid, window_world_size, Pose, SilhouetteImage};
use crate::rotation::{angle_between, rotation_distance, Quaternion, SymmetryGroup};

pub const BENCH_FORMAT_VERSION: u32 = 1;
/// Errors above this angle count as gross failures, degrees.
pub const GROSS_FAILURE_DEG: f64 = 10.0;
pub const NOISE_LEVELS: [f64; 4] = [0.0, 0.1, 0.2, 0.3];
pub const IMAGE_SIZES: [usize; 3] = [30, 60, 100];

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("invalid bench spec: {0}")]
    Spec(String),
    #[error(transparent)]
    Camera(#[from] CameraError),
    #[error(transparent)]
    Library(#[from] LibraryError),
    #[error("writing {path}: {msg}")]
    Io { path: String, msg: String },
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> BenchError {
    BenchError::Io { path: path.display().to_string(), msg: e.to_string() }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchSpec {
    /// Particle used to generate the truth images.
    pub kind: ParticleKind,
    /// Types the classifier chooses from. Empty means `kind` plus its mirror
    /// image for chiral particles, `kind` alone otherwise.
    pub candidates: Vec<ParticleKind>,
    pub rig: RigPreset,
    /// Subset of the preset's cameras; all when absent.
    pub cameras: Option<Vec<usize>>,
    pub image_size: usize,
    pub n_orientations: usize,
    /// Standard deviation of the edge noise, grey levels in `[0, 1]`.
    pub noise_sigma: f64,
    pub seed: u64,
    /// Position offset for the coupling study, as a fraction of the window.
    pub com_offset_fraction: f64,
    pub working_distance: f64,
    /// Report symmetry-reduced errors (raw errors are always kept per case).
    pub symmetry_reduce: bool,
    pub histogram_bins: usize,
    pub fit: FitParams,
    pub library: LibraryParams,
}

impl Default for BenchSpec {
    fn default() -> Self {
        Self {
            kind: ParticleKind::ChiralRight,
            candidates: Vec::new(),
            rig: RigPreset::NearPlanar4,
            cameras: None,
            image_size: 60,
            n_orientations: 200,
            noise_sigma: 0.0,
            seed: 0,
            com_offset_fraction: 0.2,
            working_distance: 500.0,
            symmetry_reduce: true,
            histogram_bins: 50,
            fit: FitParams::default(),
            library: LibraryParams::default(),
        }
    }
}

impl BenchSpec {
    pub fn validate(&self) -> Result<(), BenchError> {
        let bad = |m: String| Err(BenchError::Spec(m));
        if self.n_orientations < 1 {
            return bad("n_orientations must be at least 1".into());
        }
        if self.image_size < 8 {
            return bad(format!("image_size {} is below 8", self.image_size));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise_sigma {} must be finite and non-negative", self.noise_sigma));
        }
        if !(self.working_distance > 0.0 && self.working_distance.is_finite()) {
            return bad(format!("working_distance {} must be positive", self.working_distance));
        }
        if self.histogram_bins < 1 {
            return bad("histogram_bins must be at least 1".into());
        }
        if self.fit.n_guesses < 1 {
            return bad("fit.n_guesses must be at least 1".into());
        }
        if let Some(c) = &self.cameras {
            let n = self.rig.camera_directions().len();
            if c.is_empty() || c.iter().any(|&i| i >= n) {
                return bad(format!("cameras {c:?} invalid for {} ({n} cameras)", self.rig));
            }
        }
        Ok(())
    }

    pub fn candidate_kinds(&self) -> Vec<ParticleKind> {
        if !self.candidates.is_empty() {
            return self.candidates.clone();
        }
        let mut v = vec![self.kind];
        v.extend(self.kind.mirror());
        v
    }
}

/// Models, rig and window shared by all cases of a spec.
#[derive(Debug, Clone)]
pub struct BenchSetup {
    pub spec: BenchSpec,
    pub truth_model: ParticleModel,
    pub candidate_models: Vec<ParticleModel>,
    pub rig: CameraRig,
    pub window_world: f64,
}

impl BenchSetup {
    pub fn new(spec: &BenchSpec) -> Result<Self, BenchError> {
        spec.validate()?;
        let sym = |m: ParticleModel| if spec.symmetry_reduce { m } else { m.with_symmetry(SymmetryGroup::identity()) };
        let truth_model = sym(builtin_model(spec.kind));
        let candidate_models: Vec<ParticleModel> = spec.candidate_kinds().into_iter().map(|k| sym(builtin_model(k))).collect();
        let window_world = window_world_size(candidate_models.iter().chain([&truth_model]));
        let f = focal_for_window(spec.image_size as f64, window_world, spec.working_distance);
        let full = spec.rig.build(spec.working_distance, f, DEFAULT_SENSOR)?;
        let rig = match &spec.cameras {
            Some(c) => full.subset(c)?,
            None => full,
        };
        Ok(Self { spec: spec.clone(), truth_model, candidate_models, rig, window_world })
    }

    fn rng(&self, i: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.spec.seed);
        rng.set_stream(i as u64);
        rng
    }

    /// Truth and observed windows of case `i`.
    pub fn make_case(&self, i: usize) -> Result<(Quaternion, Vec<SilhouetteImage>), BenchError> {
        let mut rng = self.rng(i);
        let truth = Quaternion::random(&mut rng);
        let n = self.spec.image_size;
        let h = -(n as f64) / 2.0;
        let images = self
            .rig
            .cameras
            .iter()
            .map(|cam| {
                let img = render_aligned(&self.truth_model, &Pose::at_origin(truth), cam, n, n, [h, h], None)
                    .map_err(|e| BenchError::Spec(format!("case {i}: {e}")))?
                    .0;
                Ok(add_edge_noise(&img, self.spec.noise_sigma, &mut rng))
            })
            .collect::<Result<_, BenchError>>()?;
        Ok((truth, images))
    }
}

/// Truth and observed windows of case `i` of `spec`.
pub fn make_case(spec: &BenchSpec, i: usize) -> Result<(Quaternion, Vec<SilhouetteImage>), BenchError> {
    BenchSetup::new(spec)?.make_case(i)
}

/// Adds Gaussian noise of std `sigma` to pixels strictly between 0 and 1,
/// clamping the result; pure 0 and 1 pixels are left alone.
pub fn add_edge_noise<R: Rng + ?Sized>(img: &SilhouetteImage, sigma: f64, rng: &mut R) -> SilhouetteImage {
    if sigma == 0.0 {
        return img.clone();
    }
    let mut out = img.clone();
    for r in 0..img.height() {
        for c in 0..img.width() {
            let v = img.get(r, c);
            if v > 0.0 && v < 1.0 {
                let n: f64 = rng.sample(StandardNormal);
                out.set(r, c, v + sigma * n);
            }
        }
    }
    out
}

/// In-memory library cache, optionally backed by a directory.
#[derive(Debug, Default)]
pub struct LibraryStore {
    dir: Option<PathBuf>,
    libs: Mutex<HashMap<String, Arc<OrientationLibrary>>>,
}

impl LibraryStore {
    pub fn new(dir: Option<PathBuf>) -> Self {
        Self { dir, libs: Mutex::default() }
    }

    pub fn get(
        &self,
        model: &ParticleModel,
        rig: &CameraRig,
        params: LibraryParams,
        window_world: f64,
    ) -> Result<Arc<OrientationLibrary>, BenchError> {
        let key = format!(
            "{}|{}|{:?}|{:x}|{}",
            model.to_json(),
            rig.fingerprint(),
            params,
            window_world.to_bits(),
            rig.len()
        );
        if let Some(l) = self.libs.lock().expect("library store poisoned").get(&key) {
            return Ok(l.clone());
        }
        let lib = match &self.dir {
            Some(d) => OrientationLibrary::load_or_build(d, model, rig, params, window_world)?,
            None => OrientationLibrary::build(model, rig, params, window_world)?,
        };
        let lib = Arc::new(lib);
        self.libs.lock().expect("library store poisoned").insert(key, lib.clone());
        Ok(lib)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseResult {
    pub index: usize,
    pub truth: Quaternion,
    pub estimate: Option<Quaternion>,
    pub particle_type: String,
    pub type_correct: bool,
    /// Symmetry-reduced error, degrees.
    pub theta_err_deg: f64,
    /// Error without symmetry reduction, degrees.
    pub theta_err_raw_deg: f64,
    pub total_error: f64,
    pub evaluations: usize,
    pub converged: bool,
    pub failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub densities: Vec<f64>,
}

impl Histogram {
    /// Equal-width bins over `[0, max]`, densities normalised to unit area.
    pub fn new(samples: &[f64], bins: usize) -> Self {
        let max = samples.iter().copied().fold(0.0, f64::max);
        let top = if max > 0.0 { max } else { 1.0 };
        let width = top / bins as f64;
        let edges: Vec<f64> = (0..=bins).map(|i| i as f64 * width).collect();
        let mut counts = vec![0usize; bins];
        for &s in samples {
            counts[((s / width) as usize).min(bins - 1)] += 1;
        }
        let n = samples.len().max(1) as f64;
        let densities = counts.iter().map(|&c| c as f64 / (n * width)).collect();
        Self { edges, densities }
    }

    pub fn integral(&self) -> f64 {
        self.densities.iter().zip(self.edges.windows(2)).map(|(d, e)| d * (e[1] - e[0])).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchResult {
    pub spec: BenchSpec,
    pub cases: Vec<CaseResult>,
    /// Errors of the cases that produced a fit, degrees, in case order.
    pub samples: Vec<f64>,
    pub mean: f64,
    pub median: f64,
    pub histogram: Histogram,
    /// Cases above the gross-failure angle plus cases that failed outright.
    pub failures: usize,
    pub type_accuracy: f64,
    /// Wall-clock time, seconds. Not written to result files.
    #[serde(skip)]
    pub runtime_s: f64,
}

impl BenchResult {
    pub fn failure_fraction(&self) -> f64 {
        self.failures as f64 / self.cases.len() as f64
    }

    pub fn fraction_below(&self, deg: f64) -> f64 {
        self.cases.iter().filter(|c| c.failure.is_none() && c.theta_err_deg < deg).count() as f64 / self.cases.len() as f64
    }
}

pub fn mean(v: &[f64]) -> f64 {
    if v.is_empty() { f64::NAN } else { v.iter().sum::<f64>() / v.len() as f64 }
}

pub fn median(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 { s[n / 2] } else { 0.5 * (s[n / 2 - 1] + s[n / 2]) }
}

fn run_case(setup: &BenchSetup, cands: &[Candidate], i: usize) -> CaseResult {
    let failed = |truth: Quaternion, msg: String| CaseResult {
        index: i,
        truth,
        estimate: None,
        particle_type: String::new(),
        type_correct: false,
        theta_err_deg: f64::NAN,
        theta_err_raw_deg: f64::NAN,
        total_error: f64::NAN,
        evaluations: 0,
        converged: false,
        failure: Some(msg),
    };
    let (truth, images) = match setup.make_case(i) {
        Ok(c) => c,
        Err(e) => return failed(Quaternion::IDENTITY, e.to_string()),
    };
    let observed = match images.into_iter().map(Observation::new).collect::<Result<Vec<_>, _>>() {
        Ok(o) => o,
        Err(e) => return failed(truth, e.to_string()),
    };
    match classify_and_fit(cands, &setup.rig, &observed, &Vector3::zeros(), &setup.spec.fit) {
        Ok(fit) => {
            let type_correct = fit.particle_type == setup.truth_model.name();
            CaseResult {
                index: i,
                truth,
                estimate: Some(fit.q),
                theta_err_deg: angle_between(&fit.q, &truth, setup.truth_model.symmetry()).to_degrees(),
                theta_err_raw_deg: rotation_distance(&fit.q, &truth).to_degrees(),
                particle_type: fit.particle_type,
                type_correct,
                total_error: fit.total_error,
                evaluations: fit.evaluations,
                converged: fit.converged,
                failure: None,
            }
        }
        Err(e) => failed(truth, e.to_string()),
    }
}

/// Cold-start pipeline on every case: library guesses, then refinement.
pub fn run_bench(spec: &BenchSpec, store: &LibraryStore) -> Result<BenchResult, BenchError> {
    let start = Instant::now();
    let setup = BenchSetup::new(spec)?;
    let libs = setup
        .candidate_models
        .iter()
        .map(|m| store.get(m, &setup.rig, spec.library, setup.window_world))
        .collect::<Result<Vec<_>, _>>()?;
    let cands: Vec<Candidate> =
        setup.candidate_models.iter().zip(&libs).map(|(model, l)| Candidate { model, library: l }).collect();
    let cases: Vec<CaseResult> = (0..spec.n_orientations).into_par_iter().map(|i| run_case(&setup, &cands, i)).collect();
    let samples: Vec<f64> = cases
        .iter()
        .filter(|c| c.failure.is_none())
        .map(|c| if spec.symmetry_reduce { c.theta_err_deg } else { c.theta_err_raw_deg })
        .collect();
    let failures = cases.len() - samples.len() + samples.iter().filter(|&&e| e > GROSS_FAILURE_DEG).count();
    let type_accuracy = cases.iter().filter(|c| c.type_correct).count() as f64 / cases.len() as f64;
    Ok(BenchResult {
        spec: spec.clone(),
        mean: mean(&samples),
        median: median(&samples),
        histogram: Histogram::new(&samples, spec.histogram_bins),
        failures,
        type_accuracy,
        samples,
        cases,
        runtime_s: start.elapsed().as_secs_f64(),
    })
}

/// Runs every arrangement on the same truths. The single-camera run is
/// told the particle type.
pub fn bench_arrangements(template: &BenchSpec, store: &LibraryStore) -> Result<Vec<BenchResult>, BenchError> {
    [RigPreset::Single, RigPreset::Orthogonal2, RigPreset::Orthogonal3, RigPreset::NearPlanar4, RigPreset::Tetrahedral4]
        .into_iter()
        .map(|rig| {
            let mut spec = BenchSpec { rig, cameras: None, ..template.clone() };
            if rig == RigPreset::Single {
                spec.candidates = vec![spec.kind];
            }
            run_bench(&spec, store)
        })
        .collect()
}

/// Near-planar camera subsets used for the camera-count sweep, widest
/// baseline first.
pub fn near_planar_subset(n: usize) -> Vec<usize> {
    match n {
        1 => vec![0],
        2 => vec![0, 3],
        3 => vec![0, 1, 3],
        _ => vec![0, 1, 2, 3],
    }
}

pub fn bench_camera_counts(template: &BenchSpec, store: &LibraryStore) -> Result<Vec<BenchResult>, BenchError> {
    (2..=4)
        .map(|n| {
            let spec = BenchSpec { rig: RigPreset::NearPlanar4, cameras: Some(near_planar_subset(n)), ..template.clone() };
            run_bench(&spec, store)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CouplingRow {
    pub image_size: usize,
    pub theta_err_deg: f64,
    /// Mean projected-COM displacement per camera, percent of the image size.
    pub displacement_pct: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CouplingReport {
    pub offset_world: f64,
    /// Mean and maximum camera-vector deviation over offset directions and
    /// cameras, degrees.
    pub camera_vector_mean_deg: f64,
    pub camera_vector_max_deg: f64,
    pub rows: Vec<CouplingRow>,
}

/// Sizes of the orientation-to-position study.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CouplingParams {
    pub n_directions: usize,
    pub n_reference: usize,
    pub n_rotations: usize,
}

impl Default for CouplingParams {
    fn default() -> Self {
        Self { n_directions: 1000, n_reference: 1000, n_rotations: 100 }
    }
}

/// Position/orientation coupling. (a) Shifts the assumed position by
/// `com_offset_fraction` of the window and measures how far the camera
/// vectors turn. (b) For each `(image_size, θ)` perturbs reference
/// orientations by θ about random axes and measures how far the projected
/// COM moves relative to the silhouette centroid.
pub fn coupling_study(spec: &BenchSpec, errors: &[(usize, f64)], p: &CouplingParams) -> Result<CouplingReport, BenchError> {
    let setup = BenchSetup::new(spec)?;
    let offset = spec.com_offset_fraction * setup.window_world;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut devs = Vec::with_capacity(p.n_directions * setup.rig.len());
    for _ in 0..p.n_directions {
        let d = loop {
            let v = Vector3::new(rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample::<f64, _>(StandardNormal));
            if v.norm() > 1e-9 {
                break v.normalize();
            }
        };
        for cam in &setup.rig.cameras {
            let a = -cam.position();
            let b = offset * d - cam.position();
            devs.push(a.angle(&b).to_degrees());
        }
    }
    let mut rows = Vec::new();
    for &(size, theta_deg) in errors {
        let s = BenchSetup::new(&BenchSpec { image_size: size, ..spec.clone() })?;
        let offset_px = |q: &Quaternion, cam| -> Option<[f64; 2]> {
            let shape = project_model(&s.truth_model, &Pose::at_origin(*q), cam).ok()?;
            let c = silhouette_centroid(&shape, None).ok()?;
            Some([c[0] - shape.com_px[0], c[1] - shape.com_px[1]])
        };
        let per_ref: Vec<Vec<f64>> = (0..p.n_reference)
            .into_par_iter()
            .map(|i| {
                let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
                rng.set_stream(i as u64);
                let q = Quaternion::random(&mut rng);
                let mut sums = vec![0.0; s.rig.len()];
                let base: Vec<Option<[f64; 2]>> = s.rig.cameras.iter().map(|c| offset_px(&q, c)).collect();
                for _ in 0..p.n_rotations {
                    let axis = loop {
                        let v = Vector3::new(rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample::<f64, _>(StandardNormal));
                        if v.norm() > 1e-9 {
                            break v;
                        }
                    };
                    let dq = Quaternion::from_axis_angle(&axis.normalize(), theta_deg.to_radians()).expect("unit axis");
                    let q2 = dq * q;
                    for (k, cam) in s.rig.cameras.iter().enumerate() {
                        if let (Some(a), Some(b)) = (base[k], offset_px(&q2, cam)) {
                            sums[k] += ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
                        }
                    }
                }
                sums
            })
            .collect();
        let denom = (p.n_reference * p.n_rotations) as f64;
        let displacement_pct = (0..s.rig.len())
            .map(|k| 100.0 * per_ref.iter().map(|v| v[k]).sum::<f64>() / denom / size as f64)
            .collect();
        rows.push(CouplingRow { image_size: size, theta_err_deg: theta_deg, displacement_pct });
    }
    Ok(CouplingReport {
        offset_world: offset,
        camera_vector_mean_deg: mean(&devs),
        camera_vector_max_deg: devs.iter().copied().fold(0.0, f64::max),
        rows,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeRow {
    pub kind: ParticleKind,
    pub image_size: usize,
    pub mean: f64,
    pub median: f64,
    pub failures: usize,
}

/// Mean error of each shape at each image size.
pub fn shape_scaling_study(
    template: &BenchSpec,
    kinds: &[ParticleKind],
    sizes: &[usize],
    store: &LibraryStore,
) -> Result<(Vec<ShapeRow>, Vec<BenchResult>), BenchError> {
    let mut rows = Vec::new();
    let mut results = Vec::new();
    for &kind in kinds {
        for &image_size in sizes {
            let spec = BenchSpec { kind, candidates: Vec::new(), image_size, ..template.clone() };
            let r = run_bench(&spec, store)?;
            rows.push(ShapeRow { kind, image_size, mean: r.mean, median: r.median, failures: r.failures });
            results.push(r);
        }
    }
    Ok((rows, results))
}

fn opt_f64(v: f64) -> String {
    if v.is_nan() { String::new() } else { v.to_string() }
}

/// Per-case CSV.
pub fn cases_csv(r: &BenchResult) -> String {
    let mut s = String::from("index,qw,qx,qy,qz,ew,ex,ey,ez,type,type_correct,theta_err_deg,theta_err_raw_deg,total_error,evaluations,converged,failure\n");
    for c in &r.cases {
        let e = c.estimate.map(|q| q.to_array().map(|v| v.to_string())).unwrap_or_default();
        let t = c.truth.to_array();
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            c.index,
            t[0],
            t[1],
            t[2],
            t[3],
            e[0],
            e[1],
            e[2],
            e[3],
            c.particle_type,
            c.type_correct,
            opt_f64(c.theta_err_deg),
            opt_f64(c.theta_err_raw_deg),
            opt_f64(c.total_error),
            c.evaluations,
            c.converged,
            c.failure.as_deref().unwrap_or("").replace(',', ";")
        );
    }
    s
}

/// Histogram as two whitespace-separated columns: bin centre, density.
pub fn histogram_dat(h: &Histogram) -> String {
    let mut s = String::from("# bin_centre_deg density\n");
    for (d, e) in h.densities.iter().zip(h.edges.windows(2)) {
        let _ = writeln!(s, "{} {}", 0.5 * (e[0] + e[1]), d);
    }
    s
}

#[derive(Serialize)]
struct Summary<'a> {
    format_version: u32,
    spec: &'a BenchSpec,
    n_cases: usize,
    mean_deg: f64,
    median_deg: f64,
    failures: usize,
    type_accuracy: f64,
    histogram: &'a Histogram,
}

pub fn summary_json(r: &BenchResult) -> String {
    let s = Summary {
        format_version: BENCH_FORMAT_VERSION,
        spec: &r.spec,
        n_cases: r.cases.len(),
        mean_deg: r.mean,
        median_deg: r.median,
        failures: r.failures,
        type_accuracy: r.type_accuracy,
        histogram: &r.histogram,
    };
    serde_json::to_string_pretty(&s).expect("summary serialises")
}

/// Writes `<stem>_cases.csv`, `<stem>_summary.json` and `<stem>_hist.dat`.
pub fn write_bench(r: &BenchResult, dir: &Path, stem: &str) -> Result<Vec<PathBuf>, BenchError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let files = [
        (format!("{stem}_cases.csv"), cases_csv(r)),
        (format!("{stem}_summary.json"), summary_json(r)),
        (format!("{stem}_hist.dat"), histogram_dat(&r.histogram)),
    ];
    files
        .into_iter()
        .map(|(name, body)| {
            let p = dir.join(name);
            fs::write(&p, body).map_err(|e| io_err(&p, e))?;
            Ok(p)
        })
        .collect()
}

//! Run configuration: a TOML file plus command-line overrides.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use silhouette_pose::camera::{CameraRig, RigPreset, DEFAULT_SENSOR};
use silhouette_pose::geometry::{builtin_model, ParticleKind, ParticleModel};
use silhouette_pose::orientlib::LibraryParams;
use silhouette_pose::render::{focal_for_window, window_world_size};
use silhouette_pose::synthbench::BenchSpec;
use silhouette_pose::track::TrackParams;

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Track,
    Bench,
    Render,
    Library,
    Report,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Mode::Track => "track",
            Mode::Bench => "bench",
            Mode::Render => "render",
            Mode::Library => "library",
            Mode::Report => "report",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Optional; must agree with the mode given on the command line.
    pub mode: Option<Mode>,
    #[serde(default)]
    pub seed: u64,
    /// Not part of the manifest: results do not depend on it.
    #[serde(default, skip_serializing)]
    pub workers: Option<usize>,
    /// Not part of the manifest either.
    #[serde(default = "default_out", skip_serializing)]
    pub out: PathBuf,
    /// Orientation-library cache; libraries are rebuilt in memory when unset.
    pub library_dir: Option<PathBuf>,
    /// Built-in kinds (`chiral_right`, `tetrad`, ...) or model file paths.
    #[serde(default)]
    pub models: Vec<String>,
    #[serde(default)]
    pub rig: RigConfig,
    #[serde(default)]
    pub library: LibraryParams,
    pub bench: Option<BenchConfig>,
    pub render: Option<RenderConfig>,
    pub track: Option<TrackConfig>,
    pub report: Option<ReportConfig>,
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RigConfig {
    pub preset: RigPreset,
    /// Calibration file; replaces the preset when given.
    pub calibration: Option<PathBuf>,
    /// Subset of cameras, in order.
    pub cameras: Option<Vec<usize>>,
    /// Window size in pixels a particle at the origin is imaged with.
    pub image_size: usize,
    pub working_distance: f64,
    pub sensor: [u32; 2],
}

impl Default for RigConfig {
    fn default() -> Self {
        Self {
            preset: RigPreset::NearPlanar4,
            calibration: None,
            cameras: None,
            image_size: 60,
            working_distance: 500.0,
            sensor: DEFAULT_SENSOR,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Study {
    /// One benchmark run of `spec`.
    #[default]
    Run,
    Sizes,
    Noise,
    Cameras,
    Arrangements,
    Coupling,
    Shapes,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchConfig {
    #[serde(default)]
    pub study: Study,
    #[serde(default)]
    pub spec: BenchSpec,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageFormat {
    #[default]
    Pgm,
    Png,
}

impl ImageFormat {
    pub fn ext(self) -> &'static str {
        match self {
            ImageFormat::Pgm => "pgm",
            ImageFormat::Png => "png",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RenderConfig {
    /// Quaternion `[w, x, y, z]`; overrides `euler_zyx_deg`.
    pub orientation: Option<[f64; 4]>,
    pub euler_zyx_deg: Option<[f64; 3]>,
    pub position: [f64; 3],
    pub format: ImageFormat,
    /// Full sensor frames instead of `image_size` windows.
    pub full_frame: bool,
    pub sequence: Option<SequenceConfig>,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self { orientation: None, euler_zyx_deg: None, position: [0.0; 3], format: ImageFormat::Pgm, full_frame: false, sequence: None }
    }
}

/// Rigid motion of every model, rendered as full frames.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SequenceConfig {
    pub frames: usize,
    pub rotation_axis: [f64; 3],
    pub rotation_deg_per_frame: f64,
    /// World units per frame.
    pub velocity: [f64; 3],
    /// Start positions, one per model; defaults spread the models along x.
    pub positions: Option<Vec<[f64; 3]>>,
    pub fps: f64,
}

impl Default for SequenceConfig {
    fn default() -> Self {
        Self { frames: 100, rotation_axis: [0.0, 0.0, 1.0], rotation_deg_per_frame: 1.0, velocity: [0.0; 3], positions: None, fps: 1000.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrackConfig {
    /// Directory holding `cam0/`, `cam1/`, ...; the n-th file (by name) of
    /// each camera directory is frame n.
    pub frames: PathBuf,
    #[serde(default = "default_fps")]
    pub fps: f64,
    #[serde(default)]
    pub params: TrackParams,
}

fn default_fps() -> f64 {
    1000.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportConfig {
    pub tracks: PathBuf,
    /// Ground truth written by a render sequence; adds orientation errors.
    pub truth: Option<PathBuf>,
}

/// Values given on the command line; they take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub workers: Option<usize>,
    pub out: Option<PathBuf>,
}

impl RunConfig {
    pub fn parse(text: &str, origin: &Path) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(format!("{}: {e}", origin.display())))
    }

    pub fn load(path: &Path, mode: Mode, o: &Overrides) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let mut c = Self::parse(&text, path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        c.resolve_paths(base);
        c.apply(mode, o)?;
        c.validate(mode)?;
        Ok(c)
    }

    /// Makes relative paths relative to the config file.
    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(p) = &mut self.rig.calibration {
            fix(p);
        }
        if let Some(p) = &mut self.library_dir {
            fix(p);
        }
        if let Some(t) = &mut self.track {
            fix(&mut t.frames);
        }
        if let Some(r) = &mut self.report {
            fix(&mut r.tracks);
            if let Some(p) = &mut r.truth {
                fix(p);
            }
        }
        for m in &mut self.models {
            if ParticleKind::from_str(m).is_err() && Path::new(m).is_relative() {
                *m = base.join(&*m).display().to_string();
            }
        }
    }

    fn apply(&mut self, mode: Mode, o: &Overrides) -> Result<(), CliError> {
        if let Some(m) = self.mode {
            if m != mode {
                return Err(CliError::Config(format!("mode: config says `{m}` but `{mode}` was requested")));
            }
        }
        self.mode = Some(mode);
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if o.workers.is_some() {
            self.workers = o.workers;
        }
        if let Some(d) = &o.out {
            self.out = d.clone();
        }
        if mode == Mode::Bench {
            let b = self.bench.get_or_insert_with(|| BenchConfig { study: Study::Run, spec: BenchSpec::default() });
            b.spec.seed = self.seed;
        }
        Ok(())
    }

    pub fn validate(&self, mode: Mode) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        if self.workers == Some(0) {
            return bad("workers: must be at least 1".into());
        }
        let rig = &self.rig;
        if rig.image_size < 8 {
            return bad(format!("rig.image_size: {} is below 8", rig.image_size));
        }
        if !(rig.working_distance > 0.0 && rig.working_distance.is_finite()) {
            return bad(format!("rig.working_distance: {} must be positive", rig.working_distance));
        }
        if let Some(p) = &rig.calibration {
            must_exist("rig.calibration", p)?;
        }
        for m in &self.models {
            if ParticleKind::from_str(m).is_err() {
                must_exist("models", Path::new(m))?;
            }
        }
        let needs_models = matches!(mode, Mode::Render | Mode::Library | Mode::Track);
        if needs_models && self.models.is_empty() {
            return bad(format!("models: {mode} mode needs at least one model"));
        }
        match mode {
            Mode::Bench => {
                let b = self.bench.as_ref().expect("filled in apply");
                b.spec.validate().map_err(|e| CliError::Config(format!("bench.spec: {e}")))?;
            }
            Mode::Render => {
                if let Some(s) = self.render.as_ref().and_then(|r| r.sequence.as_ref()) {
                    if s.frames == 0 {
                        return bad("render.sequence.frames: must be at least 1".into());
                    }
                    if !(s.fps > 0.0) {
                        return bad("render.sequence.fps: must be positive".into());
                    }
                    if let Some(p) = &s.positions {
                        if p.len() != self.models.len() {
                            return bad(format!("render.sequence.positions: {} given for {} models", p.len(), self.models.len()));
                        }
                    }
                }
            }
            Mode::Track => {
                let t = self.track.as_ref().ok_or_else(|| CliError::Config("track: section missing".into()))?;
                must_exist("track.frames", &t.frames)?;
                if !(t.fps > 0.0) {
                    return bad("track.fps: must be positive".into());
                }
                t.params.segmentation.validate().map_err(|e| CliError::Config(format!("track.params.segmentation: {e}")))?;
            }
            Mode::Report => {
                let r = self.report.as_ref().ok_or_else(|| CliError::Config("report: section missing".into()))?;
                must_exist("report.tracks", &r.tracks)?;
                if let Some(t) = &r.truth {
                    must_exist("report.truth", t)?;
                }
            }
            Mode::Library => {}
        }
        Ok(())
    }

    pub fn load_models(&self) -> Result<Vec<ParticleModel>, CliError> {
        self.models.iter().map(|m| load_model(m)).collect()
    }

    /// The calibration file, or the preset scaled so a particle at the
    /// origin spans `image_size` pixels.
    pub fn build_rig(&self, models: &[ParticleModel]) -> Result<CameraRig, CliError> {
        let r = &self.rig;
        let full = match &r.calibration {
            Some(p) => CameraRig::load(p).map_err(|e| CliError::Config(format!("rig.calibration: {e}")))?,
            None => {
                let ww = window_world_size(models.iter());
                let f = focal_for_window(r.image_size as f64, ww, r.working_distance);
                r.preset.build(r.working_distance, f, r.sensor).map_err(|e| CliError::Config(format!("rig: {e}")))?
            }
        };
        match &r.cameras {
            Some(c) => full.subset(c).map_err(|e| CliError::Config(format!("rig.cameras: {e}"))),
            None => Ok(full),
        }
    }
}

pub fn load_model(name: &str) -> Result<ParticleModel, CliError> {
    match ParticleKind::from_str(name) {
        Ok(k) => Ok(builtin_model(k)),
        Err(_) => ParticleModel::load(name).map_err(|e| CliError::Config(format!("models: {name}: {e}"))),
    }
}

fn must_exist(key: &str, p: &Path) -> Result<(), CliError> {
    if p.exists() {
        Ok(())
    } else {
        Err(CliError::Config(format!("{key}: {} does not exist", p.display())))
    }
}

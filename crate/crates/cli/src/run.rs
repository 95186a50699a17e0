//! Mode implementations. Every mode writes into `cfg.out` and finishes with
//! a manifest.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, Write as _};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use silhouette_pose::camera::CameraRig;
use silhouette_pose::geometry::{builtin_model, ParticleKind, ParticleModel};
use silhouette_pose::optimize::Candidate;
use silhouette_pose::orientlib::OrientationLibrary;
use silhouette_pose::render::{render_aligned, render_scene, window_world_size, Pose, SilhouetteImage};
use silhouette_pose::rotation::{angle_between, EulerZYX, Quaternion, SymmetryGroup};
use silhouette_pose::synthbench::{self as sb, BenchResult, LibraryStore};
use silhouette_pose::track::{
    read_track_records, run_sequence, track_records, write_track_records, FrameObservation, FrameResult, TrackRecord,
};

use crate::config::{BenchConfig, Mode, RunConfig, SequenceConfig, Study};
use crate::CliError;

pub const MANIFEST_FORMAT_VERSION: u32 = 1;
pub const TRUTH_FORMAT_VERSION: u32 = 1;
const TRUTH_FORMAT: &str = "silhouette-pose-truth";

fn core_err(e: impl std::fmt::Display) -> CliError {
    CliError::Run(e.to_string())
}

fn write(path: &Path, body: impl AsRef<[u8]>) -> Result<PathBuf, CliError> {
    if let Some(d) = path.parent() {
        fs::create_dir_all(d).map_err(|e| CliError::io(d, e))?;
    }
    fs::write(path, body).map_err(|e| CliError::io(path, e))?;
    Ok(path.to_path_buf())
}

pub fn run(cfg: &RunConfig) -> Result<Vec<PathBuf>, CliError> {
    fs::create_dir_all(&cfg.out).map_err(|e| CliError::io(&cfg.out, e))?;
    let mode = cfg.mode.expect("mode resolved at load");
    let mut files = match mode {
        Mode::Bench => bench(cfg, cfg.bench.as_ref().expect("bench section filled at load"))?,
        Mode::Render => render(cfg)?,
        Mode::Library => library(cfg)?,
        Mode::Track => track(cfg)?,
        Mode::Report => report(cfg)?,
    };
    files.push(write_manifest(cfg, &files)?);
    Ok(files)
}

#[derive(Serialize)]
struct Manifest<'a> {
    format: &'static str,
    format_version: u32,
    tool_version: &'static str,
    mode: Mode,
    seed: u64,
    config: &'a RunConfig,
    outputs: Vec<String>,
}

fn write_manifest(cfg: &RunConfig, files: &[PathBuf]) -> Result<PathBuf, CliError> {
    let mut outputs: Vec<String> = files
        .iter()
        .map(|f| f.strip_prefix(&cfg.out).unwrap_or(f).display().to_string())
        .collect();
    outputs.sort();
    let m = Manifest {
        format: "silhouette-pose-manifest",
        format_version: MANIFEST_FORMAT_VERSION,
        tool_version: env!("CARGO_PKG_VERSION"),
        mode: cfg.mode.expect("mode resolved"),
        seed: cfg.seed,
        config: cfg,
        outputs,
    };
    write(&cfg.out.join("manifest.json"), serde_json::to_string_pretty(&m).map_err(core_err)?)
}

fn bench(cfg: &RunConfig, b: &BenchConfig) -> Result<Vec<PathBuf>, CliError> {
    let store = LibraryStore::new(cfg.library_dir.clone());
    let spec = &b.spec;
    let mut runs: Vec<(String, BenchResult)> = Vec::new();
    let mut files = Vec::new();
    let sizes = |runs: &mut Vec<(String, BenchResult)>| -> Result<(), CliError> {
        for s in sb::IMAGE_SIZES {
            let r = sb::run_bench(&sb::BenchSpec { image_size: s, ..spec.clone() }, &store).map_err(core_err)?;
            runs.push((format!("size_{s}"), r));
        }
        Ok(())
    };
    match b.study {
        Study::Run => runs.push(("bench".into(), sb::run_bench(spec, &store).map_err(core_err)?)),
        Study::Sizes => sizes(&mut runs)?,
        Study::Noise => {
            for sigma in sb::NOISE_LEVELS {
                let r = sb::run_bench(&sb::BenchSpec { noise_sigma: sigma, ..spec.clone() }, &store).map_err(core_err)?;
                runs.push((format!("noise_{sigma}"), r));
            }
        }
        Study::Cameras => {
            for r in sb::bench_camera_counts(spec, &store).map_err(core_err)? {
                let n = r.spec.cameras.as_ref().map_or(0, |c| c.len());
                runs.push((format!("cameras_{n}"), r));
            }
        }
        Study::Arrangements => {
            for r in sb::bench_arrangements(spec, &store).map_err(core_err)? {
                runs.push((r.spec.rig.as_str().to_string(), r));
            }
        }
        Study::Coupling => {
            sizes(&mut runs)?;
            let errors: Vec<(usize, f64)> = runs.iter().map(|(_, r)| (r.spec.image_size, r.mean)).collect();
            let rep = sb::coupling_study(spec, &errors, &sb::CouplingParams::default()).map_err(core_err)?;
            files.push(write(&cfg.out.join("coupling.json"), serde_json::to_string_pretty(&rep).map_err(core_err)?)?);
        }
        Study::Shapes => {
            let mut kinds = vec![spec.kind, ParticleKind::Tetrad, ParticleKind::Oloid];
            kinds.dedup();
            let (_, results) = sb::shape_scaling_study(spec, &kinds, &sb::IMAGE_SIZES, &store).map_err(core_err)?;
            for r in results {
                runs.push((format!("{}_{}", r.spec.kind, r.spec.image_size), r));
            }
        }
    }
    let mut table = String::from(
        "label,kind,rig,cameras,image_size,noise_sigma,seed,n,mean_deg,median_deg,failures,failure_fraction,type_accuracy\n",
    );
    for (label, r) in &runs {
        let s = &r.spec;
        let cams = s.cameras.as_ref().map(|c| c.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(" ")).unwrap_or_default();
        let _ = writeln!(
            table,
            "{label},{},{},{cams},{},{},{},{},{},{},{},{},{}",
            s.kind,
            s.rig,
            s.image_size,
            s.noise_sigma,
            s.seed,
            r.cases.len(),
            r.mean,
            r.median,
            r.failures,
            r.failure_fraction(),
            r.type_accuracy
        );
        log::info!("{label}: mean {:.4}° median {:.4}° failures {} ({:.1}s)", r.mean, r.median, r.failures, r.runtime_s);
        files.extend(sb::write_bench(r, &cfg.out, label).map_err(core_err)?);
    }
    files.push(write(&cfg.out.join("study.csv"), table)?);
    Ok(files)
}

fn render_config_pose(cfg: &RunConfig) -> Result<Option<Quaternion>, CliError> {
    let r = cfg.render.clone().unwrap_or_default();
    if let Some(q) = r.orientation {
        return Quaternion::from_array(q).map(Some).map_err(|e| CliError::Config(format!("render.orientation: {e}")));
    }
    Ok(r.euler_zyx_deg.map(|e| {
        Quaternion::from_euler_zyx(&EulerZYX {
            psi: e[0].to_radians(),
            theta: e[1].to_radians(),
            phi: e[2].to_radians(),
            gimbal_lock: false,
        })
    }))
}

fn render(cfg: &RunConfig) -> Result<Vec<PathBuf>, CliError> {
    let models = cfg.load_models()?;
    let rig = cfg.build_rig(&models)?;
    let r = cfg.render.clone().unwrap_or_default();
    let ext = r.format.ext();
    let q = render_config_pose(cfg)?;
    if let Some(seq) = &r.sequence {
        return render_sequence(cfg, &models, &rig, seq, q, ext);
    }
    let pose = Pose::new(q.unwrap_or(Quaternion::IDENTITY), Vector3::from(r.position));
    let n = cfg.rig.image_size;
    let mut files = Vec::new();
    for m in &models {
        for (c, cam) in rig.cameras.iter().enumerate() {
            let img = if r.full_frame {
                render_scene(&[(m, pose)], cam).map_err(core_err)?
            } else {
                let h = -(n as f64) / 2.0;
                render_aligned(m, &pose, cam, n, n, [h, h], None).map_err(core_err)?.0
            };
            let path = cfg.out.join(format!("{}_cam{c}.{ext}", m.name()));
            img.save(&path).map_err(core_err)?;
            files.push(path);
        }
    }
    Ok(files)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TruthHeader {
    format: String,
    format_version: u32,
}

/// Ground-truth pose of one particle in one frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TruthRecord {
    pub frame: u64,
    pub time: f64,
    pub particle: usize,
    #[serde(rename = "type")]
    pub particle_type: String,
    pub position: [f64; 3],
    pub q: [f64; 4],
}

fn sequence_pose(seq: &SequenceConfig, start: &Pose, f: usize) -> Result<Pose, CliError> {
    let axis = Vector3::from(seq.rotation_axis);
    let norm = axis.norm();
    if !(norm > 0.0) {
        return Err(CliError::Config("render.sequence.rotation_axis: must be non-zero".into()));
    }
    let rot = Quaternion::from_axis_angle(&(axis / norm), (seq.rotation_deg_per_frame * f as f64).to_radians())
        .map_err(|e| CliError::Config(format!("render.sequence: {e}")))?;
    Ok(Pose::new(rot * start.orientation, start.position + Vector3::from(seq.velocity) * f as f64))
}

fn render_sequence(
    cfg: &RunConfig,
    models: &[ParticleModel],
    rig: &CameraRig,
    seq: &SequenceConfig,
    q: Option<Quaternion>,
    ext: &str,
) -> Result<Vec<PathBuf>, CliError> {
    let spacing = 2.0 * window_world_size(models.iter());
    let k = models.len();
    let starts: Vec<Pose> = (0..k)
        .map(|i| {
            let position = match &seq.positions {
                Some(p) => Vector3::from(p[i]),
                None => Vector3::new((i as f64 - (k as f64 - 1.0) / 2.0) * spacing, 0.0, 0.0),
            };
            let orientation = q.unwrap_or_else(|| {
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
                rng.set_stream(i as u64);
                Quaternion::random(&mut rng)
            });
            Pose::new(orientation, position)
        })
        .collect();
    let poses: Vec<Vec<Pose>> = (0..seq.frames)
        .map(|f| starts.iter().map(|s| sequence_pose(seq, s, f)).collect())
        .collect::<Result<_, _>>()?;
    let files: Vec<Vec<PathBuf>> = poses
        .par_iter()
        .enumerate()
        .map(|(f, frame)| {
            let items: Vec<(&ParticleModel, Pose)> = models.iter().zip(frame.iter().copied()).collect();
            rig.cameras
                .iter()
                .enumerate()
                .map(|(c, cam)| {
                    let img = render_scene(&items, cam).map_err(core_err)?;
                    let path = cfg.out.join(format!("cam{c}")).join(format!("frame_{f:05}.{ext}"));
                    if let Some(d) = path.parent() {
                        fs::create_dir_all(d).map_err(|e| CliError::io(d, e))?;
                    }
                    img.save(&path).map_err(core_err)?;
                    Ok(path)
                })
                .collect()
        })
        .collect::<Result<_, CliError>>()?;
    let mut out: Vec<PathBuf> = files.into_iter().flatten().collect();
    let rig_path = cfg.out.join("rig.json");
    rig.save(&rig_path).map_err(core_err)?;
    out.push(rig_path);
    let mut truth = serde_json::to_string(&TruthHeader { format: TRUTH_FORMAT.into(), format_version: TRUTH_FORMAT_VERSION })
        .map_err(core_err)?;
    truth.push('\n');
    for (f, frame) in poses.iter().enumerate() {
        for (i, (p, m)) in frame.iter().zip(models).enumerate() {
            let rec = TruthRecord {
                frame: f as u64,
                time: f as f64 / seq.fps,
                particle: i,
                particle_type: m.name().to_string(),
                position: p.position.into(),
                q: p.orientation.to_array(),
            };
            truth.push_str(&serde_json::to_string(&rec).map_err(core_err)?);
            truth.push('\n');
        }
    }
    out.push(write(&cfg.out.join("truth.jsonl"), truth)?);
    Ok(out)
}

pub fn read_truth(path: &Path) -> Result<Vec<TruthRecord>, CliError> {
    let f = fs::File::open(path).map_err(|e| CliError::io(path, e))?;
    let mut lines = std::io::BufReader::new(f).lines();
    let bad = |line: usize, e: &dyn std::fmt::Display| CliError::Config(format!("{}: line {line}: {e}", path.display()));
    let first = lines.next().ok_or_else(|| bad(1, &"empty file"))?.map_err(|e| CliError::io(path, e))?;
    let h: TruthHeader = serde_json::from_str(&first).map_err(|e| bad(1, &e))?;
    if h.format != TRUTH_FORMAT || h.format_version != TRUTH_FORMAT_VERSION {
        return Err(bad(1, &format!("unsupported {} v{}", h.format, h.format_version)));
    }
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line.map_err(|e| CliError::io(path, e))?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line).map_err(|e| bad(i + 2, &e))?);
        }
    }
    Ok(out)
}

fn library_set(
    cfg: &RunConfig,
    models: &[ParticleModel],
    rig: &CameraRig,
) -> Result<Vec<std::sync::Arc<OrientationLibrary>>, CliError> {
    let store = LibraryStore::new(cfg.library_dir.clone());
    let ww = window_world_size(models.iter());
    models.iter().map(|m| store.get(m, rig, cfg.library, ww).map_err(core_err)).collect()
}

#[derive(Serialize)]
struct LibraryInfo {
    particle_type: String,
    path: Option<String>,
    entries: usize,
    cameras: usize,
    rig_fingerprint: String,
    window_world: f64,
}

fn library(cfg: &RunConfig) -> Result<Vec<PathBuf>, CliError> {
    let models = cfg.load_models()?;
    let rig = cfg.build_rig(&models)?;
    let dir = cfg.library_dir.clone().unwrap_or_else(|| cfg.out.join("libraries"));
    let ww = window_world_size(models.iter());
    let mut files = Vec::new();
    let mut info = Vec::new();
    for m in &models {
        let lib = OrientationLibrary::load_or_build(&dir, m, &rig, cfg.library, ww).map_err(core_err)?;
        let path = OrientationLibrary::cache_path(&dir, m, &rig);
        log::info!("{}: {} entries at {}", m.name(), lib.len(), path.display());
        info.push(LibraryInfo {
            particle_type: m.name().to_string(),
            path: Some(path.display().to_string()),
            entries: lib.len(),
            cameras: lib.n_cameras(),
            rig_fingerprint: lib.fingerprint().to_string(),
            window_world: lib.window_world(),
        });
        files.push(path);
    }
    files.push(write(&cfg.out.join("libraries.json"), serde_json::to_string_pretty(&info).map_err(core_err)?)?);
    Ok(files)
}

fn camera_frames(dir: &Path, n_cameras: usize) -> Result<Vec<Vec<PathBuf>>, CliError> {
    let mut per_cam = Vec::with_capacity(n_cameras);
    for c in 0..n_cameras {
        let d = dir.join(format!("cam{c}"));
        let mut files: Vec<PathBuf> = fs::read_dir(&d)
            .map_err(|e| CliError::io(&d, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| matches!(p.extension().and_then(|e| e.to_str()), Some("pgm" | "png")))
            .collect();
        files.sort();
        per_cam.push(files);
    }
    let n = per_cam.first().map_or(0, |f| f.len());
    if let Some((c, f)) = per_cam.iter().enumerate().find(|(_, f)| f.len() != n) {
        return Err(CliError::Run(format!("{}: cam{c} has {} frames, cam0 has {n}", dir.display(), f.len())));
    }
    Ok(per_cam)
}

#[derive(Serialize)]
struct FrameDiagnostics<'a> {
    frame: u64,
    time: f64,
    fitted: Vec<FittedDiagnostics<'a>>,
    skipped: Vec<SkippedDiagnostics>,
    unmatched_blobs: usize,
}

#[derive(Serialize)]
struct FittedDiagnostics<'a> {
    #[serde(rename = "type")]
    particle_type: &'a str,
    blobs: &'a [usize],
    raw_position: [f64; 3],
    position: [f64; 3],
    residual: f64,
    converged: bool,
    seeded_from: Option<u64>,
    com_fallback: bool,
}

#[derive(Serialize)]
struct SkippedDiagnostics {
    reason: silhouette_pose::track::SkipReason,
    blobs: Vec<usize>,
    point: [f64; 3],
}

fn diagnostics(fr: &FrameResult) -> FrameDiagnostics<'_> {
    FrameDiagnostics {
        frame: fr.frame_index,
        time: fr.time,
        fitted: fr
            .particles
            .iter()
            .map(|p| FittedDiagnostics {
                particle_type: &p.fit.particle_type,
                blobs: &p.blob_indices,
                raw_position: p.raw_position.into(),
                position: p.position.into(),
                residual: p.fit.total_error,
                converged: p.fit.converged,
                seeded_from: p.seeded_from,
                com_fallback: p.com_fallback,
            })
            .collect(),
        skipped: fr
            .skipped
            .iter()
            .map(|s| SkippedDiagnostics { reason: s.reason, blobs: s.blob_indices.clone(), point: s.point.into() })
            .collect(),
        unmatched_blobs: fr.unmatched_blobs,
    }
}

fn track(cfg: &RunConfig) -> Result<Vec<PathBuf>, CliError> {
    let t = cfg.track.as_ref().expect("validated");
    let models = cfg.load_models()?;
    let rig = cfg.build_rig(&models)?;
    let libs = library_set(cfg, &models, &rig)?;
    let cands: Vec<Candidate> = models.iter().zip(&libs).map(|(model, l)| Candidate { model, library: l }).collect();
    let per_cam = camera_frames(&t.frames, rig.len())?;
    let n_frames = per_cam[0].len();
    log::info!("tracking {n_frames} frames from {} cameras", rig.len());
    let seg = t.params.segmentation;
    let frames: Vec<FrameObservation> = (0..n_frames)
        .into_par_iter()
        .map(|f| {
            let images = per_cam
                .iter()
                .map(|files| SilhouetteImage::load(&files[f]).map_err(core_err))
                .collect::<Result<Vec<_>, _>>()?;
            FrameObservation::from_images(f as u64, f as f64 / t.fps, &images, &seg).map_err(core_err)
        })
        .collect::<Result<_, _>>()?;
    let run = run_sequence(&frames, &cands, &rig, &t.params).map_err(core_err)?;
    let tracks_path = cfg.out.join("tracks.jsonl");
    let f = fs::File::create(&tracks_path).map_err(|e| CliError::io(&tracks_path, e))?;
    let mut w = std::io::BufWriter::new(f);
    write_track_records(&mut w, &track_records(&run.tracks)).map_err(core_err)?;
    w.flush().map_err(|e| CliError::io(&tracks_path, e))?;
    let mut diag = String::new();
    for fr in &run.frames {
        diag.push_str(&serde_json::to_string(&diagnostics(fr)).map_err(core_err)?);
        diag.push('\n');
    }
    let skipped: usize = run.frames.iter().map(|f| f.skipped.len()).sum();
    log::info!("{} tracks, {skipped} skipped particle detections", run.tracks.len());
    Ok(vec![tracks_path, write(&cfg.out.join("frames.jsonl"), diag)?])
}

fn symmetry_for(name: &str, models: &[ParticleModel]) -> SymmetryGroup {
    if let Some(m) = models.iter().find(|m| m.name() == name) {
        return m.symmetry().clone();
    }
    ParticleKind::from_str(name).map(|k| builtin_model(k).symmetry().clone()).unwrap_or_else(|_| SymmetryGroup::identity())
}

#[derive(Serialize)]
struct TrackSummary {
    track_id: u64,
    #[serde(rename = "type")]
    particle_type: String,
    first_frame: u64,
    last_frame: u64,
    samples: usize,
    flagged_jumps: usize,
    mean_theta_err_deg: Option<f64>,
    max_theta_err_deg: Option<f64>,
}

fn report(cfg: &RunConfig) -> Result<Vec<PathBuf>, CliError> {
    let r = cfg.report.as_ref().expect("validated");
    let records = read_track_records(&r.tracks).map_err(core_err)?;
    let models = cfg.load_models()?;
    let mut euler = String::from("track_id,frame,time,type,psi_deg,theta_deg,phi_deg,flags\n");
    let mut points = String::from("track_id,frame,time,type,x,y,z,qw,qx,qy,qz\n");
    for rec in &records {
        let [psi, theta, phi] = rec.euler_zyx.map(f64::to_degrees);
        let _ = writeln!(euler, "{},{},{},{},{psi},{theta},{phi},{}", rec.track_id, rec.frame, rec.time, rec.particle_type, rec.flags);
        let _ = writeln!(
            points,
            "{},{},{},{},{},{},{},{},{},{},{}",
            rec.track_id, rec.frame, rec.time, rec.particle_type, rec.x, rec.y, rec.z, rec.qw, rec.qx, rec.qy, rec.qz
        );
    }
    let mut files = vec![write(&cfg.out.join("euler.csv"), euler)?, write(&cfg.out.join("points.csv"), points)?];

    let mut errs: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
    if let Some(truth_path) = &r.truth {
        let truth = read_truth(truth_path)?;
        let mut by_frame: BTreeMap<u64, Vec<&TruthRecord>> = BTreeMap::new();
        for t in &truth {
            by_frame.entry(t.frame).or_default().push(t);
        }
        let mut csv = String::from("track_id,frame,truth_particle,theta_err_deg,position_err\n");
        for rec in &records {
            let Some(cands) = by_frame.get(&rec.frame) else { continue };
            let p = Vector3::new(rec.x, rec.y, rec.z);
            let Some(t) = cands
                .iter()
                .min_by(|a, b| (Vector3::from(a.position) - p).norm().total_cmp(&(Vector3::from(b.position) - p).norm()))
            else {
                continue;
            };
            let q = Quaternion::from_array([rec.qw, rec.qx, rec.qy, rec.qz]).map_err(core_err)?;
            let qt = Quaternion::from_array(t.q).map_err(core_err)?;
            let e = angle_between(&q, &qt, &symmetry_for(&rec.particle_type, &models)).to_degrees();
            let d = (Vector3::from(t.position) - p).norm();
            let _ = writeln!(csv, "{},{},{},{e},{d}", rec.track_id, rec.frame, t.particle);
            errs.entry(rec.track_id).or_default().push(e);
        }
        files.push(write(&cfg.out.join("errors.csv"), csv)?);
    }

    let mut by_track: BTreeMap<u64, Vec<&TrackRecord>> = BTreeMap::new();
    for rec in &records {
        by_track.entry(rec.track_id).or_default().push(rec);
    }
    let summary: Vec<TrackSummary> = by_track
        .iter()
        .map(|(&id, recs)| {
            let e = errs.get(&id);
            TrackSummary {
                track_id: id,
                particle_type: recs[0].particle_type.clone(),
                first_frame: recs.iter().map(|r| r.frame).min().unwrap_or(0),
                last_frame: recs.iter().map(|r| r.frame).max().unwrap_or(0),
                samples: recs.len(),
                flagged_jumps: recs.iter().filter(|r| r.flags & silhouette_pose::track::flags::JUMP != 0).count(),
                mean_theta_err_deg: e.map(|v| sb::mean(v)),
                max_theta_err_deg: e.map(|v| v.iter().copied().fold(0.0, f64::max)),
            }
        })
        .collect();
    files.push(write(&cfg.out.join("report.json"), serde_json::to_string_pretty(&summary).map_err(core_err)?)?);
    Ok(files)
}

//! Nelder–Mead refinement of orientation and particle-type classification.
//!
//! The simplex lives in raw 4D quaternion coordinates; every candidate is
//! normalised before it is evaluated, so the objective sees only rotations.

use nalgebra::{Matrix6, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camera::CameraRig;
use crate::cost::{rig_error, Observation};
use crate::geometry::ParticleModel;
use crate::orientlib::{LibraryError, OrientationLibrary};
use crate::rotation::Quaternion;

#[derive(Debug, Error)]
pub enum FitError {
    #[error(transparent)]
    Library(#[from] LibraryError),
    #[error("no first guesses supplied")]
    NoGuesses,
    #[error("no candidate models supplied")]
    NoModels,
    #[error("candidate libraries use different comparison windows")]
    WindowMismatch,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default = "NelderMeadParams::fitting")]
pub struct NelderMeadParams {
    /// Rotation scale of the initial simplex, radians.
    pub init_spread: f64,
    pub vol_tol: f64,
    pub max_iter: usize,
}

impl Default for NelderMeadParams {
    fn default() -> Self {
        Self { init_spread: 5f64.to_radians(), vol_tol: 1e-8, max_iter: 500 }
    }
}

impl NelderMeadParams {
    /// Defaults used when fitting orientations (and for missing config keys).
    pub fn fitting() -> Self {
        Self { vol_tol: FIT_VOL_TOL, ..Default::default() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NelderMeadResult {
    pub q: Quaternion,
    pub value: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub converged: bool,
    pub hyper_volume: f64,
}

fn sq_dist(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// 4-volume of the simplex from its Cayley–Menger determinant. Coordinates
/// are rescaled by the longest edge first to keep the determinant well
/// conditioned for tiny simplices.
pub fn simplex_volume(points: &[[f64; 4]; 5]) -> f64 {
    let mut d2 = [[0.0; 5]; 5];
    let mut longest: f64 = 0.0;
    for i in 0..5 {
        for j in 0..5 {
            d2[i][j] = sq_dist(&points[i], &points[j]);
            longest = longest.max(d2[i][j]);
        }
    }
    if longest == 0.0 {
        return 0.0;
    }
    let mut cm = Matrix6::<f64>::zeros();
    for i in 0..5 {
        cm[(0, i + 1)] = 1.0;
        cm[(i + 1, 0)] = 1.0;
        for j in 0..5 {
            cm[(i + 1, j + 1)] = d2[i][j] / longest;
        }
    }
    // V^2 = -det(CM) / (2^4 (4!)^2) for unit-scaled edges.
    let v2 = (-cm.determinant() / 9216.0).max(0.0);
    v2.sqrt() * longest * longest
}

fn to_quaternion(x: &[f64; 4]) -> Quaternion {
    Quaternion::from_array(*x).unwrap_or(Quaternion::IDENTITY)
}

/// Minimises `f` over unit quaternions starting from `q0`.
pub fn nelder_mead<F: FnMut(&Quaternion) -> f64>(mut f: F, q0: &Quaternion, params: &NelderMeadParams) -> NelderMeadResult {
    const REFLECT: f64 = 1.0;
    const EXPAND: f64 = 2.0;
    const CONTRACT: f64 = 0.5;
    const SHRINK: f64 = 0.5;
    let mut evaluations = 0;
    let mut eval = |x: &[f64; 4]| {
        evaluations += 1;
        let v = f(&to_quaternion(x));
        if v.is_nan() {
            f64::INFINITY
        } else {
            v
        }
    };
    // A component offset of h turns the rotation by about 2h.
    let h = params.init_spread / 2.0;
    let x0 = q0.to_array();
    let mut pts = [x0; 5];
    for (i, p) in pts.iter_mut().skip(1).enumerate() {
        p[i] += h;
    }
    let mut vals = [0.0; 5];
    for i in 0..5 {
        vals[i] = eval(&pts[i]);
    }
    let mut iterations = 0;
    let (converged, hyper_volume) = loop {
        // Stable sort keeps earlier vertices first among equal values.
        let mut idx = [0, 1, 2, 3, 4];
        idx.sort_by(|&a, &b| vals[a].total_cmp(&vals[b]));
        pts = idx.map(|i| pts[i]);
        vals = idx.map(|i| vals[i]);
        let vol = simplex_volume(&pts);
        if vol < params.vol_tol {
            break (true, vol);
        }
        if iterations >= params.max_iter {
            break (false, vol);
        }
        iterations += 1;
        let mut c = [0.0; 4];
        for p in &pts[..4] {
            for k in 0..4 {
                c[k] += p[k] / 4.0;
            }
        }
        let along = |t: f64| -> [f64; 4] { std::array::from_fn(|k| c[k] + t * (pts[4][k] - c[k])) };
        let xr = along(-REFLECT);
        let fr = eval(&xr);
        if fr < vals[0] {
            let xe = along(-REFLECT * EXPAND);
            let fe = eval(&xe);
            if fe < fr {
                (pts[4], vals[4]) = (xe, fe);
            } else {
                (pts[4], vals[4]) = (xr, fr);
            }
            continue;
        }
        if fr < vals[3] {
            (pts[4], vals[4]) = (xr, fr);
            continue;
        }
        let (xc, fc, accept) = if fr < vals[4] {
            let xc = along(-REFLECT * CONTRACT);
            let fc = eval(&xc);
            (xc, fc, fc <= fr)
        } else {
            let xc = along(CONTRACT);
            let fc = eval(&xc);
            (xc, fc, fc < vals[4])
        };
        if accept {
            (pts[4], vals[4]) = (xc, fc);
            continue;
        }
        for i in 1..5 {
            pts[i] = std::array::from_fn(|k| pts[0][k] + SHRINK * (pts[i][k] - pts[0][k]));
            vals[i] = eval(&pts[i]);
        }
    };
    NelderMeadResult {
        q: to_quaternion(&pts[0]),
        value: vals[0],
        iterations,
        evaluations,
        converged,
        hyper_volume,
    }
}

/// Outcome of fitting one particle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub q: Quaternion,
    pub total_error: f64,
    pub particle_type: String,
    pub iterations: usize,
    pub evaluations: usize,
    pub converged: bool,
}

/// Runs Nelder–Mead from every guess with the multi-camera error as the
/// objective and keeps the best converged run (best overall if none
/// converged).
pub fn refine(
    model: &ParticleModel,
    rig: &CameraRig,
    observed: &[Observation],
    position: &Vector3<f64>,
    guesses: &[Quaternion],
    params: &NelderMeadParams,
) -> Result<FitResult, FitError> {
    if guesses.is_empty() {
        return Err(FitError::NoGuesses);
    }
    let objective = |q: &Quaternion| rig_error(model, q, position, rig, observed).map_or(f64::INFINITY, |e| e.total);
    let runs: Vec<NelderMeadResult> = guesses.par_iter().map(|g| nelder_mead(objective, g, params)).collect();
    let iterations = runs.iter().map(|r| r.iterations).sum();
    let evaluations = runs.iter().map(|r| r.evaluations).sum();
    let any_converged = runs.iter().any(|r| r.converged);
    let best = runs
        .iter()
        .filter(|r| r.converged || !any_converged)
        .min_by(|a, b| a.value.total_cmp(&b.value))
        .expect("at least one run");
    Ok(FitResult {
        q: best.q,
        total_error: best.value,
        particle_type: model.name().to_string(),
        iterations,
        evaluations,
        converged: best.converged,
    })
}

/// A candidate particle type with its orientation library.
#[derive(Debug, Clone, Copy)]
pub struct Candidate<'a> {
    pub model: &'a ParticleModel,
    pub library: &'a OrientationLibrary,
}

/// How the particle type is chosen among candidates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TypeSelection {
    /// Lowest library first-guess error.
    FirstGuess,
    /// Refine every candidate and keep the lowest refined error.
    Refined,
    /// Refine the candidates whose first-guess error is within
    /// `ambiguity_ratio` of the best one and keep the lowest refined error.
    #[default]
    Ambiguous,
}

/// Hyper-volume threshold used by the fitting pipeline. Tighter than the
/// generic Nelder–Mead default, which stops well above the raster floor.
pub const FIT_VOL_TOL: f64 = 1e-16;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitParams {
    pub n_guesses: usize,
    pub nelder_mead: NelderMeadParams,
    pub selection: TypeSelection,
    pub ambiguity_ratio: f64,
}

impl Default for FitParams {
    fn default() -> Self {
        Self {
            n_guesses: 4,
            nelder_mead: NelderMeadParams::fitting(),
            selection: TypeSelection::default(),
            ambiguity_ratio: 2.5,
        }
    }
}

/// Picks the particle type and refines its orientation.
pub fn classify_and_fit(
    candidates: &[Candidate],
    rig: &CameraRig,
    observed: &[Observation],
    position: &Vector3<f64>,
    params: &FitParams,
) -> Result<FitResult, FitError> {
    let first = candidates.first().ok_or(FitError::NoModels)?;
    if candidates.iter().any(|c| c.library.window_world() != first.library.window_world()) {
        return Err(FitError::WindowMismatch);
    }
    let guesses: Vec<Vec<(Quaternion, f64)>> = candidates
        .iter()
        .map(|c| c.library.best_guesses(rig, observed, params.n_guesses))
        .collect::<Result<_, _>>()?;
    let fit = |i: usize| {
        let qs: Vec<Quaternion> = guesses[i].iter().map(|g| g.0).collect();
        refine(candidates[i].model, rig, observed, position, &qs, &params.nelder_mead)
    };
    let first_err = |i: usize| guesses[i].first().map_or(f64::INFINITY, |g| g.1);
    let best = (0..candidates.len()).min_by(|&a, &b| first_err(a).total_cmp(&first_err(b))).expect("non-empty");
    let chosen: Vec<usize> = match params.selection {
        TypeSelection::FirstGuess => vec![best],
        TypeSelection::Refined => (0..candidates.len()).collect(),
        TypeSelection::Ambiguous => {
            let limit = first_err(best) * params.ambiguity_ratio;
            (0..candidates.len()).filter(|&i| i == best || first_err(i) <= limit).collect()
        }
    };
    let fits = chosen.into_iter().map(fit).collect::<Result<Vec<_>, _>>()?;
    Ok(fits.into_iter().min_by(|a, b| a.total_error.total_cmp(&b.total_error)).expect("non-empty"))
}

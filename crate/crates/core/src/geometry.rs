//! Particle models in their reference orientation.
//!
//! Tube particles (chiral, tetrad) are wireframes: vertices joined by edges,
//! drawn as tubes of constant radius. The oloid is described by sample points
//! on its two generating circles; its silhouette is the convex hull of their
//! projection.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rotation::{PurePoint, Quaternion, RotationError, SymmetryGroup};

pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("unknown particle kind `{0}` (expected chiral_left, chiral_right, tetrad or oloid)")]
    UnknownKind(String),
    #[error("edge {edge} references vertex index {index}, but the model has {n_vertices} vertices")]
    EdgeIndexOutOfRange { edge: usize, index: usize, n_vertices: usize },
    #[error("edge {0} joins a vertex to itself")]
    DegenerateEdge(usize),
    #[error("model needs at least one edge")]
    NoEdges,
    #[error("tube_radius must be > 0, got {0}")]
    NonPositiveRadius(f64),
    #[error("circle_radius must be > 0, got {0}")]
    NonPositiveCircleRadius(f64),
    #[error("samples_per_circle must be >= 16, got {0}")]
    TooFewSamples(usize),
    #[error("unsupported model format_version {0} (expected {MODEL_FORMAT_VERSION})")]
    Version(u32),
    #[error("invalid symmetry group: {0}")]
    Symmetry(#[from] RotationError),
    #[error("model file parse error at line {line}, column {column}: {msg}")]
    Parse { line: usize, column: usize, msg: String },
    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

/// Built-in particle types.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParticleKind {
    ChiralLeft,
    ChiralRight,
    Tetrad,
    Oloid,
}

impl ParticleKind {
    pub const ALL: [ParticleKind; 4] =
        [ParticleKind::ChiralLeft, ParticleKind::ChiralRight, ParticleKind::Tetrad, ParticleKind::Oloid];

    pub fn as_str(&self) -> &'static str {
        match self {
            ParticleKind::ChiralLeft => "chiral_left",
            ParticleKind::ChiralRight => "chiral_right",
            ParticleKind::Tetrad => "tetrad",
            ParticleKind::Oloid => "oloid",
        }
    }

    pub fn mirror(&self) -> Option<ParticleKind> {
        match self {
            ParticleKind::ChiralLeft => Some(ParticleKind::ChiralRight),
            ParticleKind::ChiralRight => Some(ParticleKind::ChiralLeft),
            _ => None,
        }
    }
}

impl fmt::Display for ParticleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ParticleKind {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ParticleKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| ModelError::UnknownKind(s.to_string()))
    }
}

/// Tubes of constant radius joining pairs of vertices.
#[derive(Debug, Clone, PartialEq)]
pub struct WireframeModel {
    pub name: String,
    pub vertices: Vec<PurePoint>,
    pub edges: Vec<(usize, usize)>,
    pub tube_radius: f64,
    pub com: PurePoint,
    pub symmetry: SymmetryGroup,
}

impl WireframeModel {
    /// Validates the invariants. When `com` is `None` the tube-length
    /// weighted centroid is used.
    pub fn new(
        name: impl Into<String>,
        vertices: Vec<PurePoint>,
        edges: Vec<(usize, usize)>,
        tube_radius: f64,
        com: Option<PurePoint>,
        symmetry: SymmetryGroup,
    ) -> Result<Self, ModelError> {
        if edges.is_empty() {
            return Err(ModelError::NoEdges);
        }
        for (e, &(a, b)) in edges.iter().enumerate() {
            for index in [a, b] {
                if index >= vertices.len() {
                    return Err(ModelError::EdgeIndexOutOfRange { edge: e, index, n_vertices: vertices.len() });
                }
            }
            if a == b {
                return Err(ModelError::DegenerateEdge(e));
            }
        }
        if !(tube_radius > 0.0) || !tube_radius.is_finite() {
            return Err(ModelError::NonPositiveRadius(tube_radius));
        }
        let com = com.unwrap_or_else(|| length_weighted_centroid(&vertices, &edges));
        Ok(Self { name: name.into(), vertices, edges, tube_radius, com, symmetry })
    }

    pub fn segments(&self) -> impl Iterator<Item = (PurePoint, PurePoint)> + '_ {
        self.edges.iter().map(|&(a, b)| (self.vertices[a], self.vertices[b]))
    }

    pub fn total_length(&self) -> f64 {
        self.segments().map(|(a, b)| (b - a).norm()).sum()
    }
}

/// Centroid of a uniform line density along the edges.
pub fn length_weighted_centroid(vertices: &[PurePoint], edges: &[(usize, usize)]) -> PurePoint {
    let mut acc = Vector3::zeros();
    let mut total = 0.0;
    for &(a, b) in edges {
        let l = (vertices[b] - vertices[a]).norm();
        acc += l * 0.5 * (vertices[a] + vertices[b]);
        total += l;
    }
    acc / total
}

/// Convex hull of two congruent perpendicular circles, each passing through
/// the other's centre. Circle A lies in the x-y plane centred at `(-R/2,0,0)`,
/// circle B in the x-z plane centred at `(R/2,0,0)`.
#[derive(Debug, Clone, PartialEq)]
pub struct OloidModel {
    pub name: String,
    pub circle_radius: f64,
    pub samples_per_circle: usize,
    pub com: PurePoint,
    pub symmetry: SymmetryGroup,
    /// Sample points of both circles in the current orientation.
    pub points: Vec<PurePoint>,
}

impl OloidModel {
    pub const DEFAULT_SAMPLES: usize = 64;

    pub fn new(name: impl Into<String>, circle_radius: f64, samples_per_circle: usize) -> Result<Self, ModelError> {
        if !(circle_radius > 0.0) || !circle_radius.is_finite() {
            return Err(ModelError::NonPositiveCircleRadius(circle_radius));
        }
        if samples_per_circle < 16 {
            return Err(ModelError::TooFewSamples(samples_per_circle));
        }
        let r = circle_radius;
        let mut points = Vec::with_capacity(2 * samples_per_circle);
        for i in 0..samples_per_circle {
            let t = 2.0 * std::f64::consts::PI * i as f64 / samples_per_circle as f64;
            points.push(Vector3::new(-0.5 * r + r * t.cos(), r * t.sin(), 0.0));
        }
        for i in 0..samples_per_circle {
            let t = 2.0 * std::f64::consts::PI * i as f64 / samples_per_circle as f64;
            points.push(Vector3::new(0.5 * r + r * t.cos(), 0.0, r * t.sin()));
        }
        Ok(Self {
            name: name.into(),
            circle_radius,
            samples_per_circle,
            com: Vector3::zeros(),
            symmetry: SymmetryGroup::oloid(),
            points,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ParticleModel {
    Wireframe(WireframeModel),
    Oloid(OloidModel),
}

impl ParticleModel {
    pub fn name(&self) -> &str {
        match self {
            ParticleModel::Wireframe(w) => &w.name,
            ParticleModel::Oloid(o) => &o.name,
        }
    }

    pub fn com(&self) -> PurePoint {
        match self {
            ParticleModel::Wireframe(w) => w.com,
            ParticleModel::Oloid(o) => o.com,
        }
    }

    pub fn symmetry(&self) -> &SymmetryGroup {
        match self {
            ParticleModel::Wireframe(w) => &w.symmetry,
            ParticleModel::Oloid(o) => &o.symmetry,
        }
    }

    pub fn with_symmetry(mut self, symmetry: SymmetryGroup) -> Self {
        match &mut self {
            ParticleModel::Wireframe(w) => w.symmetry = symmetry,
            ParticleModel::Oloid(o) => o.symmetry = symmetry,
        }
        self
    }

    /// Points that determine the silhouette: wireframe vertices or circle samples.
    pub fn points(&self) -> &[PurePoint] {
        match self {
            ParticleModel::Wireframe(w) => &w.vertices,
            ParticleModel::Oloid(o) => &o.points,
        }
    }

    /// Radius of the smallest COM-centred sphere enclosing the body.
    pub fn bounding_radius(&self) -> f64 {
        let com = self.com();
        let r = self.points().iter().map(|p| (p - com).norm()).fold(0.0, f64::max);
        match self {
            ParticleModel::Wireframe(w) => r + w.tube_radius,
            ParticleModel::Oloid(_) => r,
        }
    }

    /// Characteristic arm length: the longest COM-to-point distance.
    pub fn arm_length(&self) -> f64 {
        let com = self.com();
        self.points().iter().map(|p| (p - com).norm()).fold(0.0, f64::max)
    }

    /// Rotates every point and the COM about the model origin.
    pub fn rotate(&self, q: &Quaternion) -> ParticleModel {
        match self {
            ParticleModel::Wireframe(w) => ParticleModel::Wireframe(WireframeModel {
                vertices: w.vertices.iter().map(|v| q.rotate(v)).collect(),
                com: q.rotate(&w.com),
                ..w.clone()
            }),
            ParticleModel::Oloid(o) => ParticleModel::Oloid(OloidModel {
                points: o.points.iter().map(|v| q.rotate(v)).collect(),
                com: q.rotate(&o.com),
                ..o.clone()
            }),
        }
    }

    /// Maps a model point to world coordinates for a particle whose COM sits
    /// at `position` with orientation `q`.
    pub fn to_world(&self, p: &PurePoint, q: &Quaternion, position: &Vector3<f64>) -> Vector3<f64> {
        position + q.rotate(&(p - self.com()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ModelError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|source| ModelError::Io { path: path.display().to_string(), source })?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self, ModelError> {
        let file: ModelFile = serde_json::from_str(text).map_err(|e| ModelError::Parse {
            line: e.line(),
            column: e.column(),
            msg: e.to_string(),
        })?;
        file.into_model()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&ModelFile::from_model(self)).expect("model serialises")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ModelError> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json())
            .map_err(|source| ModelError::Io { path: path.display().to_string(), source })
    }
}

/// Default geometry: right-handed chiral particle. A central bar along x,
/// each end continued by an arm along ±y and then along +z. The 180° turn
/// about z maps the particle onto itself.
pub const CHIRAL_HALF_BAR: f64 = 1.25;
pub const CHIRAL_ARM_Y: f64 = 1.5;
pub const CHIRAL_ARM_Z: f64 = 2.0;
pub const CHIRAL_TUBE_RADIUS: f64 = 0.4;
pub const TETRAD_ARM: f64 = 2.5;
pub const TETRAD_TUBE_RADIUS: f64 = 0.3;
pub const OLOID_RADIUS: f64 = 2.5;

pub fn builtin_model(kind: ParticleKind) -> ParticleModel {
    match kind {
        ParticleKind::ChiralRight | ParticleKind::ChiralLeft => {
            let (a, b, c) = (CHIRAL_HALF_BAR, CHIRAL_ARM_Y, CHIRAL_ARM_Z);
            let mut vertices = vec![
                Vector3::new(-a, 0.0, 0.0),
                Vector3::new(a, 0.0, 0.0),
                Vector3::new(a, b, 0.0),
                Vector3::new(-a, -b, 0.0),
                Vector3::new(a, b, c),
                Vector3::new(-a, -b, c),
            ];
            if kind == ParticleKind::ChiralLeft {
                for v in &mut vertices {
                    v.x = -v.x;
                }
            }
            let edges = vec![(0, 1), (1, 2), (2, 4), (0, 3), (3, 5)];
            let sym = SymmetryGroup::two_fold(&Vector3::z()).expect("unit axis");
            ParticleModel::Wireframe(
                WireframeModel::new(kind.as_str(), vertices, edges, CHIRAL_TUBE_RADIUS, None, sym)
                    .expect("valid builtin"),
            )
        }
        ParticleKind::Tetrad => {
            let mut vertices = vec![Vector3::zeros()];
            vertices.extend(crate::rotation::tetrahedron_vertices().iter().map(|v| v.normalize() * TETRAD_ARM));
            let edges = vec![(0, 1), (0, 2), (0, 3), (0, 4)];
            ParticleModel::Wireframe(
                WireframeModel::new("tetrad", vertices, edges, TETRAD_TUBE_RADIUS, None, SymmetryGroup::tetrahedral())
                    .expect("valid builtin"),
            )
        }
        ParticleKind::Oloid => ParticleModel::Oloid(
            OloidModel::new("oloid", OLOID_RADIUS, OloidModel::DEFAULT_SAMPLES).expect("valid builtin"),
        ),
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
enum ModelFile {
    Wireframe {
        format_version: u32,
        name: String,
        vertices: Vec<[f64; 3]>,
        edges: Vec<[usize; 2]>,
        tube_radius: f64,
        #[serde(default)]
        com: Option<[f64; 3]>,
        #[serde(default)]
        symmetry: Vec<[f64; 4]>,
    },
    Oloid {
        format_version: u32,
        name: String,
        circle_radius: f64,
        samples_per_circle: usize,
        #[serde(default)]
        symmetry: Vec<[f64; 4]>,
    },
}

fn symmetry_from(elements: &[[f64; 4]]) -> Result<SymmetryGroup, ModelError> {
    if elements.is_empty() {
        return Ok(SymmetryGroup::identity());
    }
    let qs = elements.iter().map(|a| Quaternion::from_array(*a)).collect::<Result<Vec<_>, _>>()?;
    Ok(SymmetryGroup::new(qs)?)
}

impl ModelFile {
    fn into_model(self) -> Result<ParticleModel, ModelError> {
        match self {
            ModelFile::Wireframe { format_version, name, vertices, edges, tube_radius, com, symmetry } => {
                if format_version != MODEL_FORMAT_VERSION {
                    return Err(ModelError::Version(format_version));
                }
                let model = WireframeModel::new(
                    name,
                    vertices.into_iter().map(Vector3::from).collect(),
                    edges.into_iter().map(|[a, b]| (a, b)).collect(),
                    tube_radius,
                    com.map(Vector3::from),
                    symmetry_from(&symmetry)?,
                )?;
                Ok(ParticleModel::Wireframe(model))
            }
            ModelFile::Oloid { format_version, name, circle_radius, samples_per_circle, symmetry } => {
                if format_version != MODEL_FORMAT_VERSION {
                    return Err(ModelError::Version(format_version));
                }
                let mut model = OloidModel::new(name, circle_radius, samples_per_circle)?;
                if !symmetry.is_empty() {
                    model.symmetry = symmetry_from(&symmetry)?;
                }
                Ok(ParticleModel::Oloid(model))
            }
        }
    }

    fn from_model(m: &ParticleModel) -> Self {
        let sym = m.symmetry().elements().iter().map(|q| q.to_array()).collect();
        match m {
            ParticleModel::Wireframe(w) => ModelFile::Wireframe {
                format_version: MODEL_FORMAT_VERSION,
                name: w.name.clone(),
                vertices: w.vertices.iter().map(|v| [v.x, v.y, v.z]).collect(),
                edges: w.edges.iter().map(|&(a, b)| [a, b]).collect(),
                tube_radius: w.tube_radius,
                com: Some([w.com.x, w.com.y, w.com.z]),
                symmetry: sym,
            },
            ParticleModel::Oloid(o) => ModelFile::Oloid {
                format_version: MODEL_FORMAT_VERSION,
                name: o.name.clone(),
                circle_radius: o.circle_radius,
                samples_per_circle: o.samples_per_circle,
                symmetry: sym,
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rotation::angle_between;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn pairwise(points: &[PurePoint]) -> Vec<f64> {
        let mut d = Vec::new();
        for i in 0..points.len() {
            for j in i + 1..points.len() {
                d.push((points[i] - points[j]).norm());
            }
        }
        d
    }

    #[test]
    fn tetrad_com_at_centre() {
        let m = builtin_model(ParticleKind::Tetrad);
        assert!(m.com().norm() < 1e-12);
    }

    #[test]
    fn oloid_com_between_circle_centres() {
        let ParticleModel::Oloid(o) = builtin_model(ParticleKind::Oloid) else { panic!() };
        let ca = Vector3::new(-0.5 * o.circle_radius, 0.0, 0.0);
        let cb = Vector3::new(0.5 * o.circle_radius, 0.0, 0.0);
        assert!((o.com - 0.5 * (ca + cb)).norm() < 1e-12);
        // Each circle passes through the other's centre.
        let n = o.samples_per_circle;
        assert!(o.points[..n].iter().any(|p| (p - cb).norm() < 1e-12));
        assert!(o.points[n..].iter().any(|p| (p - ca).norm() < 1e-12));
    }

    #[test]
    fn chiral_mirror_vertex_for_vertex() {
        let (ParticleModel::Wireframe(l), ParticleModel::Wireframe(r)) =
            (builtin_model(ParticleKind::ChiralLeft), builtin_model(ParticleKind::ChiralRight))
        else {
            panic!()
        };
        for (a, b) in l.vertices.iter().zip(&r.vertices) {
            assert_eq!(*a, Vector3::new(-b.x, b.y, b.z));
        }
        assert_eq!(l.edges, r.edges);
    }

    /// Handedness as the signed triple product along an arm; invariant under
    /// proper rotations, flips under reflection.
    fn handedness(w: &WireframeModel) -> f64 {
        let v = &w.vertices;
        let e1 = v[1] - v[0];
        let e2 = v[2] - v[1];
        let e3 = v[4] - v[2];
        e1.dot(&e2.cross(&e3))
    }

    #[test]
    fn chiral_models_not_related_by_rotation() {
        let (ParticleModel::Wireframe(l), ParticleModel::Wireframe(r)) =
            (builtin_model(ParticleKind::ChiralLeft), builtin_model(ParticleKind::ChiralRight))
        else {
            panic!()
        };
        assert!(handedness(&r) > 0.0 && handedness(&l) < 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let q = Quaternion::random(&mut rng);
            let ParticleModel::Wireframe(rot) = ParticleModel::Wireframe(l.clone()).rotate(&q) else { panic!() };
            assert!(handedness(&rot) < 0.0);
        }
    }

    #[test]
    fn com_is_length_weighted() {
        let ParticleModel::Wireframe(w) = builtin_model(ParticleKind::ChiralRight) else { panic!() };
        // Hand computation: bar 2a at z=0, y-arms at z=0, z-arms centred at c/2.
        let (a, b, c) = (CHIRAL_HALF_BAR, CHIRAL_ARM_Y, CHIRAL_ARM_Z);
        let z = 2.0 * c * (0.5 * c) / (2.0 * a + 2.0 * b + 2.0 * c);
        assert!((w.com - Vector3::new(0.0, 0.0, z)).norm() < 1e-9);
    }

    #[test]
    fn rotation_is_rigid() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for kind in ParticleKind::ALL {
            let m = builtin_model(kind);
            let before = pairwise(m.points());
            for _ in 0..100 {
                let q = Quaternion::random(&mut rng);
                let after = pairwise(m.rotate(&q).points());
                for (a, b) in before.iter().zip(&after) {
                    assert!((a - b).abs() <= 1e-10 * a.max(1e-12));
                }
            }
        }
    }

    #[test]
    fn rotate_identity_and_inverse() {
        let m = builtin_model(ParticleKind::ChiralRight);
        assert_eq!(m.rotate(&Quaternion::IDENTITY), m);
        let q = Quaternion::new(0.3, -0.2, 0.9, 0.1).unwrap();
        let back = m.rotate(&q).rotate(&q.conjugate());
        for (a, b) in back.points().iter().zip(m.points()) {
            assert!((a - b).norm() < 1e-10);
        }
    }

    #[test]
    fn tetrad_symmetry_maps_vertex_set() {
        let m = builtin_model(ParticleKind::Tetrad);
        for s in m.symmetry().elements() {
            let rotated = m.rotate(s);
            for p in rotated.points() {
                assert!(m.points().iter().any(|v| (v - p).norm() < 1e-9));
            }
        }
    }

    #[test]
    fn oloid_symmetry_maps_point_set() {
        let m = builtin_model(ParticleKind::Oloid);
        for s in m.symmetry().elements() {
            for p in m.rotate(s).points() {
                assert!(m.points().iter().any(|v| (v - p).norm() < 1e-9), "{s:?} {p:?}");
            }
        }
    }

    #[test]
    fn chiral_symmetry_maps_vertices_in_place() {
        let m = builtin_model(ParticleKind::ChiralRight);
        let s = m.symmetry().elements()[1];
        for p in m.rotate(&s).points() {
            assert!(m.points().iter().any(|v| (v - p).norm() < 1e-12));
        }
        assert!(angle_between(&s, &Quaternion::IDENTITY, m.symmetry()) < 1e-12);
    }

    #[test]
    fn save_load_round_trip() {
        for kind in ParticleKind::ALL {
            let m = builtin_model(kind);
            let back = ParticleModel::from_json(&m.to_json()).unwrap();
            assert_eq!(back.name(), m.name());
            assert_eq!(back.symmetry().len(), m.symmetry().len());
            for (a, b) in back.points().iter().zip(m.points()) {
                assert!((a - b).norm() < 1e-12);
            }
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tetrad.json");
        builtin_model(ParticleKind::Tetrad).save(&path).unwrap();
        assert_eq!(ParticleModel::load(&path).unwrap(), builtin_model(ParticleKind::Tetrad));
    }

    #[test]
    fn load_rejects_bad_edge_index() {
        let text = r#"{"kind":"wireframe","format_version":1,"name":"x",
            "vertices":[[0,0,0],[1,0,0]],"edges":[[0,1],[1,7]],"tube_radius":0.1}"#;
        let err = ParticleModel::from_json(text).unwrap_err();
        assert!(matches!(err, ModelError::EdgeIndexOutOfRange { edge: 1, index: 7, .. }));
        assert!(err.to_string().contains('7'));
    }

    #[test]
    fn load_rejects_bad_radius() {
        let text = r#"{"kind":"wireframe","format_version":1,"name":"x",
            "vertices":[[0,0,0],[1,0,0]],"edges":[[0,1]],"tube_radius":0.0}"#;
        assert!(matches!(ParticleModel::from_json(text), Err(ModelError::NonPositiveRadius(_))));
    }

    #[test]
    fn load_reports_parse_location() {
        let err = ParticleModel::from_json("{\n  \"kind\": \"wireframe\",\n  oops }").unwrap_err();
        assert!(matches!(err, ModelError::Parse { line: 3, .. }), "{err}");
    }

    #[test]
    fn unknown_kind_rejected() {
        assert!("hexagon".parse::<ParticleKind>().is_err());
        assert_eq!("tetrad".parse::<ParticleKind>().unwrap(), ParticleKind::Tetrad);
    }
}

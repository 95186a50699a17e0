//! Quaternion algebra for particle orientations.
//!
//! Orientations are unit quaternions `w + xi + yj + zk`. A point is rotated by
//! embedding it as a pure quaternion `p` and forming `q p q⁻¹`. The pair `q`,
//! `-q` describes the same orientation; every comparison in this module is
//! sign invariant, and stored quaternions are canonicalised to `w >= 0`.

use std::f64::consts::PI;
use std::ops::{Mul, Neg};

use nalgebra::Vector3;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// A 3D point in model or world units, the vector part of a pure quaternion.
pub type PurePoint = Vector3<f64>;

/// Tolerance on `|u| = 1` for rotation axes.
pub const AXIS_NORM_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Error)]
pub enum RotationError {
    #[error("rotation axis must have unit length, got |u| = {0}")]
    NonUnitAxis(f64),
    #[error("cannot normalise a quaternion of zero length")]
    ZeroNorm,
    #[error("symmetry group must contain the identity")]
    MissingIdentity,
    #[error("symmetry group is not closed under composition (element {0} * {1})")]
    NotClosed(usize, usize),
}

/// Unit quaternion `w + xi + yj + zk`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quaternion {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Quaternion {
    pub const IDENTITY: Self = Self { w: 1.0, x: 0.0, y: 0.0, z: 0.0 };

    /// Normalises `(w, x, y, z)` and canonicalises the sign to `w >= 0`.
    pub fn new(w: f64, x: f64, y: f64, z: f64) -> Result<Self, RotationError> {
        Self::raw(w, x, y, z).normalized()
    }

    /// Builds a quaternion without normalising. Only the optimiser and the
    /// algebra below should hold non-unit values.
    pub(crate) const fn raw(w: f64, x: f64, y: f64, z: f64) -> Self {
        Self { w, x, y, z }
    }

    pub fn from_array(a: [f64; 4]) -> Result<Self, RotationError> {
        Self::new(a[0], a[1], a[2], a[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.w, self.x, self.y, self.z]
    }

    /// `cos(θ/2) + u sin(θ/2)`.
    pub fn from_axis_angle(axis: &Vector3<f64>, theta: f64) -> Result<Self, RotationError> {
        let n = axis.norm();
        if !n.is_finite() || (n - 1.0).abs() > AXIS_NORM_TOL {
            return Err(RotationError::NonUnitAxis(n));
        }
        let (s, c) = (0.5 * theta).sin_cos();
        Ok(Self::raw(c, axis.x * s, axis.y * s, axis.z * s))
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn dot(&self, other: &Self) -> f64 {
        self.w * other.w + self.x * other.x + self.y * other.y + self.z * other.z
    }

    pub fn normalized(&self) -> Result<Self, RotationError> {
        let n = self.norm();
        if !(n > 0.0) || !n.is_finite() {
            return Err(RotationError::ZeroNorm);
        }
        Ok(Self::raw(self.w / n, self.x / n, self.y / n, self.z / n).canonical())
    }

    /// Same orientation with `w >= 0`. For `w == 0` the first non-zero
    /// imaginary component is made positive.
    pub fn canonical(self) -> Self {
        let flip = if self.w != 0.0 {
            self.w < 0.0
        } else if self.x != 0.0 {
            self.x < 0.0
        } else if self.y != 0.0 {
            self.y < 0.0
        } else {
            self.z < 0.0
        };
        if flip {
            -self
        } else {
            self
        }
    }

    pub fn conjugate(&self) -> Self {
        Self::raw(self.w, -self.x, -self.y, -self.z)
    }

    /// `q⁻¹ = q* / |q|²`.
    pub fn inverse(&self) -> Self {
        let n2 = self.dot(self);
        let c = self.conjugate();
        Self::raw(c.w / n2, c.x / n2, c.y / n2, c.z / n2)
    }

    pub fn imag(&self) -> Vector3<f64> {
        Vector3::new(self.x, self.y, self.z)
    }

    /// Rotation angle in `[0, π]`, sign invariant.
    pub fn angle(&self) -> f64 {
        2.0 * self.imag().norm().atan2(self.w.abs())
    }

    /// Rotates `p` by this quaternion (`q p q⁻¹`).
    pub fn rotate(&self, p: &PurePoint) -> PurePoint {
        // Expanded form of q p q* for unit q: p + 2w(v×p) + 2v×(v×p).
        let v = self.imag();
        let t = 2.0 * v.cross(p);
        p + self.w * t + v.cross(&t)
    }

    /// Exact product `q (0, p) q⁻¹` through the Hamilton product; used as an
    /// independent route to [`Quaternion::rotate`] in tests and for non-unit input.
    pub fn rotate_hamilton(&self, p: &PurePoint) -> PurePoint {
        let pq = Self::raw(0.0, p.x, p.y, p.z);
        (*self * pq * self.inverse()).imag()
    }

    /// Rotation matrix acting on column vectors.
    pub fn to_matrix(&self) -> nalgebra::Matrix3<f64> {
        let (w, x, y, z) = (self.w, self.x, self.y, self.z);
        nalgebra::Matrix3::new(
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        )
    }

    /// Uniform sample on SO(3) from a normalised 4D Gaussian.
    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        loop {
            let w: f64 = rng.sample(StandardNormal);
            let x: f64 = rng.sample(StandardNormal);
            let y: f64 = rng.sample(StandardNormal);
            let z: f64 = rng.sample(StandardNormal);
            if let Ok(q) = Self::new(w, x, y, z) {
                if q.norm() > 0.0 {
                    return q;
                }
            }
        }
    }

    /// Z-Y-X decomposition: `q = Rz(psi) Ry(theta) Rx(phi)`.
    pub fn to_euler_zyx(&self) -> EulerZYX {
        let (w, x, y, z) = (self.w, self.x, self.y, self.z);
        let sin_theta = 2.0 * (w * y - z * x);
        if sin_theta.abs() >= 1.0 - GIMBAL_EPS {
            // Only psi - phi (or psi + phi) is observable; pin phi to zero.
            let theta = PI / 2.0 * sin_theta.signum();
            let psi = wrap_angle(2.0 * z.atan2(w));
            return EulerZYX { psi, theta, phi: 0.0, gimbal_lock: true };
        }
        let phi = (2.0 * (w * x + y * z)).atan2(1.0 - 2.0 * (x * x + y * y));
        let theta = sin_theta.asin();
        let psi = (2.0 * (w * z + x * y)).atan2(1.0 - 2.0 * (y * y + z * z));
        EulerZYX { psi, theta, phi, gimbal_lock: false }
    }

    pub fn from_euler_zyx(e: &EulerZYX) -> Self {
        let qz = Self::from_axis_angle(&Vector3::z(), e.psi).expect("unit axis");
        let qy = Self::from_axis_angle(&Vector3::y(), e.theta).expect("unit axis");
        let qx = Self::from_axis_angle(&Vector3::x(), e.phi).expect("unit axis");
        (qz * qy * qx).canonical()
    }
}

const GIMBAL_EPS: f64 = 1e-12;

fn wrap_angle(a: f64) -> f64 {
    let mut a = a % (2.0 * PI);
    if a > PI {
        a -= 2.0 * PI;
    } else if a <= -PI {
        a += 2.0 * PI;
    }
    a
}

impl Mul for Quaternion {
    type Output = Quaternion;

    /// Hamilton product.
    fn mul(self, r: Quaternion) -> Quaternion {
        let l = self;
        Quaternion::raw(
            l.w * r.w - l.x * r.x - l.y * r.y - l.z * r.z,
            l.w * r.x + l.x * r.w + l.y * r.z - l.z * r.y,
            l.w * r.y - l.x * r.z + l.y * r.w + l.z * r.x,
            l.w * r.z + l.x * r.y - l.y * r.x + l.z * r.w,
        )
    }
}

impl Neg for Quaternion {
    type Output = Quaternion;

    fn neg(self) -> Quaternion {
        Quaternion::raw(-self.w, -self.x, -self.y, -self.z)
    }
}

impl Default for Quaternion {
    fn default() -> Self {
        Self::IDENTITY
    }
}

/// Euler angles in radians, applied Z first, then Y, then X (intrinsic).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EulerZYX {
    pub psi: f64,
    pub theta: f64,
    pub phi: f64,
    /// Set when `|theta| = π/2` and `phi` was pinned to zero.
    #[serde(default)]
    pub gimbal_lock: bool,
}

/// Finite rotation group mapping a particle onto itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SymmetryGroup {
    elements: Vec<Quaternion>,
}

impl Default for SymmetryGroup {
    fn default() -> Self {
        Self::identity()
    }
}

impl SymmetryGroup {
    const CLOSURE_TOL: f64 = 1e-9;

    pub fn identity() -> Self {
        Self { elements: vec![Quaternion::IDENTITY] }
    }

    /// Validates identity membership and closure (up to sign).
    pub fn new(elements: Vec<Quaternion>) -> Result<Self, RotationError> {
        let elements: Vec<Quaternion> = elements
            .into_iter()
            .map(|q| q.normalized())
            .collect::<Result<_, _>>()?;
        if !elements.iter().any(|q| q.angle() < Self::CLOSURE_TOL) {
            return Err(RotationError::MissingIdentity);
        }
        for (i, a) in elements.iter().enumerate() {
            for (j, b) in elements.iter().enumerate() {
                let p = *a * *b;
                if !elements.iter().any(|e| rotation_distance(&p, e) < Self::CLOSURE_TOL) {
                    return Err(RotationError::NotClosed(i, j));
                }
            }
        }
        Ok(Self { elements })
    }

    /// `{identity, 180° about axis}`.
    pub fn two_fold(axis: &Vector3<f64>) -> Result<Self, RotationError> {
        Self::new(vec![Quaternion::IDENTITY, Quaternion::from_axis_angle(axis, PI)?])
    }

    /// The 12 proper rotations of a regular tetrahedron whose vertices are
    /// `(1,1,1)`, `(1,-1,-1)`, `(-1,1,-1)`, `(-1,-1,1)`.
    pub fn tetrahedral() -> Self {
        let mut el = vec![Quaternion::IDENTITY];
        for axis in [Vector3::x(), Vector3::y(), Vector3::z()] {
            el.push(Quaternion::from_axis_angle(&axis, PI).expect("unit axis"));
        }
        for v in tetrahedron_vertices() {
            let u = v.normalize();
            for a in [2.0 * PI / 3.0, -2.0 * PI / 3.0] {
                el.push(Quaternion::from_axis_angle(&u, a).expect("unit axis").canonical());
            }
        }
        Self::new(el).expect("tetrahedral group is closed")
    }

    /// Rotation group of the standard oloid built by
    /// [`crate::geometry::OloidModel`]: circles centred at `(∓R/2, 0, 0)` in
    /// the x-y and x-z planes. Contains the half turn about the x axis and the
    /// two half turns about `(0, 1, ±1)/√2` that swap the circles.
    pub fn oloid() -> Self {
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let el = vec![
            Quaternion::IDENTITY,
            Quaternion::from_axis_angle(&Vector3::x(), PI).expect("unit axis"),
            Quaternion::from_axis_angle(&Vector3::new(0.0, s, s), PI).expect("unit axis"),
            Quaternion::from_axis_angle(&Vector3::new(0.0, s, -s), PI).expect("unit axis"),
        ];
        Self::new(el).expect("oloid group is closed")
    }

    pub fn elements(&self) -> &[Quaternion] {
        &self.elements
    }

    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }
}

pub(crate) fn tetrahedron_vertices() -> [Vector3<f64>; 4] {
    [
        Vector3::new(1.0, 1.0, 1.0),
        Vector3::new(1.0, -1.0, -1.0),
        Vector3::new(-1.0, 1.0, -1.0),
        Vector3::new(-1.0, -1.0, 1.0),
    ]
}

/// Angle of the relative rotation `q1 q2⁻¹`, in `[0, π]`.
///
/// Mathematically `2 asin(|imag(q1 q2⁻¹)|)`; evaluated with `atan2` so the
/// result stays accurate near `π`, where `asin` loses half its digits.
pub fn rotation_distance(q1: &Quaternion, q2: &Quaternion) -> f64 {
    let r = *q1 * q2.conjugate();
    let s = r.imag().norm().min(1.0);
    2.0 * s.atan2(r.w.abs())
}

/// Symmetry-reduced angle between two orientations: the smallest rotation
/// angle between `q1` and any `q2 s` with `s` in the group.
pub fn angle_between(q1: &Quaternion, q2: &Quaternion, sym: &SymmetryGroup) -> f64 {
    sym.elements
        .iter()
        .map(|s| rotation_distance(q1, &(*q2 * *s)))
        .fold(f64::INFINITY, f64::min)
}

/// Uniform random orientation, deterministic in `seed`.
pub fn random_orientation(seed: u64) -> Quaternion {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Quaternion::random(&mut rng)
}

/// `n` unit vectors on a Fibonacci spherical lattice.
pub fn fibonacci_axes(n: usize) -> Vec<Vector3<f64>> {
    let golden = PI * (3.0 - 5f64.sqrt());
    (0..n)
        .map(|i| {
            let z = 1.0 - (2.0 * i as f64 + 1.0) / n as f64;
            let r = (1.0 - z * z).max(0.0).sqrt();
            let phi = golden * i as f64;
            Vector3::new(r * phi.cos(), r * phi.sin(), z).normalize()
        })
        .collect()
}

//! Minimal 3D math: vectors, unit-quaternion rotations, and rigid poses.
//!
//! Everything is `f64` and deterministic; no SIMD, no platform-dependent
//! intrinsics. Rotations are camera-to-world unless stated otherwise.

use serde::{Deserialize, Serialize};
use std::ops::{Add, AddAssign, Mul, Neg, Sub};

/// 3-vector in meters (world or camera frame depending on context).
///
/// Serializes as a plain `[x, y, z]` array.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(into = "[f64; 3]", from = "[f64; 3]")]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl From<Vec3> for [f64; 3] {
    fn from(v: Vec3) -> Self {
        v.to_array()
    }
}

impl From<[f64; 3]> for Vec3 {
    fn from(a: [f64; 3]) -> Self {
        Vec3::from_array(a)
    }
}

impl Vec3 {
    pub const ZERO: Self = Self { x: 0.0, y: 0.0, z: 0.0 };

    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn dot(self, other: Vec3) -> f64 {
        self.x * other.x + self.y * other.y + self.z * other.z
    }

    pub fn cross(self, other: Vec3) -> Vec3 {
        Vec3::new(
            self.y * other.z - self.z * other.y,
            self.z * other.x - self.x * other.z,
            self.x * other.y - self.y * other.x,
        )
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn norm_squared(self) -> f64 {
        self.dot(self)
    }

    /// Unit vector in the same direction. Returns `None` for near-zero input.
    pub fn normalized(self) -> Option<Vec3> {
        let n = self.norm();
        if n < 1e-12 {
            None
        } else {
            Some(self * (1.0 / n))
        }
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        Self::new(a[0], a[1], a[2])
    }
}

impl Add for Vec3 {
    type Output = Vec3;
    fn add(self, rhs: Vec3) -> Vec3 {
        Vec3::new(self.x + rhs.x, self.y + rhs.y, self.z + rhs.z)
    }
}

impl AddAssign for Vec3 {
    fn add_assign(&mut self, rhs: Vec3) {
        *self = *self + rhs;
    }
}

impl Sub for Vec3 {
    type Output = Vec3;
    fn sub(self, rhs: Vec3) -> Vec3 {
        Vec3::new(self.x - rhs.x, self.y - rhs.y, self.z - rhs.z)
    }
}

impl Mul<f64> for Vec3 {
    type Output = Vec3;
    fn mul(self, s: f64) -> Vec3 {
        Vec3::new(self.x * s, self.y * s, self.z * s)
    }
}

impl Neg for Vec3 {
    type Output = Vec3;
    fn neg(self) -> Vec3 {
        Vec3::new(-self.x, -self.y, -self.z)
    }
}

/// Unit quaternion (w, x, y, z) representing a rotation.
///
/// Composition is `a * b`: apply `b` first, then `a`. Stored normalized;
/// constructors renormalize so drift from repeated composition stays below
/// the 1e-6 norm invariant. Serializes as `[w, x, y, z]` and renormalizes
/// on deserialization.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(into = "[f64; 4]", from = "[f64; 4]")]
pub struct Rotation {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl From<Rotation> for [f64; 4] {
    fn from(r: Rotation) -> Self {
        [r.w, r.x, r.y, r.z]
    }
}

impl From<[f64; 4]> for Rotation {
    fn from(a: [f64; 4]) -> Self {
        Rotation::renormalized(a[0], a[1], a[2], a[3])
    }
}

impl Rotation {
    pub const IDENTITY: Self = Self { w: 1.0, x: 0.0, y: 0.0, z: 0.0 };

    fn renormalized(w: f64, x: f64, y: f64, z: f64) -> Self {
        let n = (w * w + x * x + y * y + z * z).sqrt();
        Self { w: w / n, x: x / n, y: y / n, z: z / n }
    }

    /// Rotation of `angle` radians about `axis` (need not be unit length).
    pub fn from_axis_angle(axis: Vec3, angle: f64) -> Self {
        let axis = axis.normalized().unwrap_or(Vec3::new(0.0, 0.0, 1.0));
        let half = 0.5 * angle;
        let s = half.sin();
        Self::renormalized(half.cos(), axis.x * s, axis.y * s, axis.z * s)
    }

    /// Minimal rotation taking unit vector `from` onto unit vector `to`.
    pub fn from_rotation_arc(from: Vec3, to: Vec3) -> Self {
        let from = from.normalized().unwrap_or(Vec3::new(0.0, 0.0, 1.0));
        let to = to.normalized().unwrap_or(Vec3::new(0.0, 0.0, 1.0));
        let c = from.dot(to);
        if c > 1.0 - 1e-14 {
            return Self::IDENTITY;
        }
        if c < -1.0 + 1e-14 {
            // Antiparallel: pick any axis orthogonal to `from`.
            let ortho = if from.x.abs() < 0.9 {
                from.cross(Vec3::new(1.0, 0.0, 0.0))
            } else {
                from.cross(Vec3::new(0.0, 1.0, 0.0))
            };
            return Self::from_axis_angle(ortho, std::f64::consts::PI);
        }
        let axis = from.cross(to);
        let angle = axis.norm().atan2(c);
        Self::from_axis_angle(axis, angle)
    }

    /// Build from orthonormal column basis vectors (body axes in world coords).
    pub fn from_basis(x: Vec3, y: Vec3, z: Vec3) -> Self {
        // Shepperd's method: pick the largest diagonal branch for stability.
        let (m00, m01, m02) = (x.x, y.x, z.x);
        let (m10, m11, m12) = (x.y, y.y, z.y);
        let (m20, m21, m22) = (x.z, y.z, z.z);
        let trace = m00 + m11 + m22;
        let (w, qx, qy, qz);
        if trace > 0.0 {
            let s = (trace + 1.0).sqrt() * 2.0;
            w = 0.25 * s;
            qx = (m21 - m12) / s;
            qy = (m02 - m20) / s;
            qz = (m10 - m01) / s;
        } else if m00 > m11 && m00 > m22 {
            let s = (1.0 + m00 - m11 - m22).sqrt() * 2.0;
            w = (m21 - m12) / s;
            qx = 0.25 * s;
            qy = (m01 + m10) / s;
            qz = (m02 + m20) / s;
        } else if m11 > m22 {
            let s = (1.0 + m11 - m00 - m22).sqrt() * 2.0;
            w = (m02 - m20) / s;
            qx = (m01 + m10) / s;
            qy = 0.25 * s;
            qz = (m12 + m21) / s;
        } else {
            let s = (1.0 + m22 - m00 - m11).sqrt() * 2.0;
            w = (m10 - m01) / s;
            qx = (m02 + m20) / s;
            qy = (m12 + m21) / s;
            qz = 0.25 * s;
        }
        Self::renormalized(w, qx, qy, qz)
    }

    pub fn norm(self) -> f64 {
        (self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn inverse(self) -> Self {
        Self { w: self.w, x: -self.x, y: -self.y, z: -self.z }
    }

    /// Hamilton product; `self * other` applies `other` first.
    pub fn compose(self, other: Rotation) -> Rotation {
        let (aw, ax, ay, az) = (self.w, self.x, self.y, self.z);
        let (bw, bx, by, bz) = (other.w, other.x, other.y, other.z);
        Self::renormalized(
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        )
    }

    /// Rotate a vector: q v q*.
    pub fn rotate(self, v: Vec3) -> Vec3 {
        let u = Vec3::new(self.x, self.y, self.z);
        let uv = u.cross(v);
        let uuv = u.cross(uv);
        v + (uv * self.w + uuv) * 2.0
    }

    pub fn is_finite(self) -> bool {
        self.w.is_finite() && self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }
}

impl Mul for Rotation {
    type Output = Rotation;
    fn mul(self, rhs: Rotation) -> Rotation {
        self.compose(rhs)
    }
}

/// Camera pose: world position plus camera-to-world orientation.
///
/// Camera frame is right-handed with +z the optical axis, +x image-right,
/// +y image-down.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub position: Vec3,
    pub orientation: Rotation,
}

impl Pose {
    pub fn new(position: Vec3, orientation: Rotation) -> Self {
        Self { position, orientation }
    }

    /// Pose at `eye` with the optical axis through `target`.
    ///
    /// World +z is treated as up, so +y (image-down) points toward -z where
    /// possible; a near-vertical view falls back to world +y as the up hint.
    pub fn look_at(eye: Vec3, target: Vec3) -> Self {
        let forward = (target - eye)
            .normalized()
            .unwrap_or(Vec3::new(1.0, 0.0, 0.0));
        let mut up = Vec3::new(0.0, 0.0, 1.0);
        if forward.cross(up).norm() < 1e-9 {
            up = Vec3::new(0.0, 1.0, 0.0);
        }
        let right = forward.cross(up).normalized().unwrap();
        let down = forward.cross(right);
        Self {
            position: eye,
            orientation: Rotation::from_basis(right, down, forward),
        }
    }

    /// World-frame direction of the optical axis.
    pub fn optical_axis(&self) -> Vec3 {
        self.orientation.rotate(Vec3::new(0.0, 0.0, 1.0))
    }

    /// Map a camera-frame vector into the world frame.
    pub fn camera_to_world(&self, v: Vec3) -> Vec3 {
        self.orientation.rotate(v)
    }

    /// Map a world point into the camera frame.
    pub fn world_to_camera(&self, p: Vec3) -> Vec3 {
        self.orientation.inverse().rotate(p - self.position)
    }
}

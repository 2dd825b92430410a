//! Unit quaternions for 3D pose and the rotation-angle metric.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on `|‖q‖ - 1|` accepted by [`quaternion_angle`].
pub const UNIT_TOLERANCE: f64 = 1e-6;

/// Rotation quaternion `w + xi + yj + zk`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quaternion {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Quaternion {
    pub const IDENTITY: Quaternion = Quaternion { w: 1.0, x: 0.0, y: 0.0, z: 0.0 };

    pub fn new(w: f64, x: f64, y: f64, z: f64) -> Self {
        Quaternion { w, x, y, z }
    }

    /// Rotation of `angle` radians about `axis` (normalized internally).
    pub fn from_axis_angle(axis: [f64; 3], angle: f64) -> Self {
        let n = (axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]).sqrt();
        let (s, c) = (angle / 2.0).sin_cos();
        Quaternion::new(c, s * axis[0] / n, s * axis[1] / n, s * axis[2] / n)
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.w, self.x, self.y, self.z]
    }

    pub fn from_slice(v: &[f64]) -> Self {
        Quaternion::new(v[0], v[1], v[2], v[3])
    }

    pub fn dot(self, o: Quaternion) -> f64 {
        self.w * o.w + self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn neg(self) -> Self {
        Quaternion::new(-self.w, -self.x, -self.y, -self.z)
    }

    /// Unit length with nonnegative scalar part. `q` and `-q` map to the same value.
    pub fn canonical(self) -> Self {
        let n = self.norm();
        let s = if self.w < 0.0 { -1.0 } else { 1.0 };
        Quaternion::new(s * self.w / n, s * self.x / n, s * self.y / n, s * self.z / n)
    }

    pub fn is_unit(self) -> bool {
        (self.norm() - 1.0).abs() <= UNIT_TOLERANCE
    }

    /// Hamilton product `self * o`.
    pub fn mul(self, o: Quaternion) -> Self {
        Quaternion::new(
            self.w * o.w - self.x * o.x - self.y * o.y - self.z * o.z,
            self.w * o.x + self.x * o.w + self.y * o.z - self.z * o.y,
            self.w * o.y - self.x * o.z + self.y * o.w + self.z * o.x,
            self.w * o.z + self.x * o.y - self.y * o.x + self.z * o.w,
        )
    }

    /// Rotates a 3-vector.
    pub fn rotate(self, v: [f64; 3]) -> [f64; 3] {
        let p = Quaternion::new(0.0, v[0], v[1], v[2]);
        let conj = Quaternion::new(self.w, -self.x, -self.y, -self.z);
        let r = self.mul(p).mul(conj);
        [r.x, r.y, r.z]
    }
}

/// Angle in degrees of the rotation taking `q` to `q_hat`: `2·acos(min(1, |q·q̂|))`.
pub fn quaternion_angle(q: Quaternion, q_hat: Quaternion) -> Result<f64> {
    for (name, v) in [("q", q), ("q_hat", q_hat)] {
        if !v.is_unit() {
            return Err(Error::Invalid(format!("{name} is not a unit quaternion (norm {})", v.norm())));
        }
    }
    // 2·arccos|q·q̂| written as 4·atan2(|q - s q̂|, |q + s q̂|), which stays exact near 0.
    let (a, b) = (q, q_hat);
    let s = if a.dot(b) < 0.0 { -1.0 } else { 1.0 };
    let [a, b] = [a.to_array(), b.to_array()];
    let diff = (0..4).map(|i| (a[i] - s * b[i]).powi(2)).sum::<f64>().sqrt();
    let sum = (0..4).map(|i| (a[i] + s * b[i]).powi(2)).sum::<f64>().sqrt();
    Ok((4.0 * diff.atan2(sum)).to_degrees())
}

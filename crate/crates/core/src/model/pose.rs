use serde::{Deserialize, Serialize};

use super::ModelError;

/// Quaternion stored as `[x, y, z, w]`.
pub type Quat = [f64; 4];

pub const IDENTITY_QUAT: Quat = [0.0, 0.0, 0.0, 1.0];

/// Normalizes `q` and flips its sign so that `w >= 0`.
///
/// Both `q` and `-q` encode the same rotation; picking the `w >= 0`
/// hemisphere gives every rotation a single representative, which is what
/// makes component-wise orientation errors meaningful.
pub fn canonicalize_quaternion(q: Quat) -> Result<Quat, ModelError> {
    let norm = q.iter().map(|c| c * c).sum::<f64>().sqrt();
    if !norm.is_finite() || norm <= 1e-12 {
        return Err(ModelError::InvalidQuaternion(q));
    }
    let sign = if q[3] < 0.0 { -1.0 } else { 1.0 };
    // already-unit input is left bit-identical so that canonicalization is
    // exactly idempotent
    let scale = if (norm - 1.0).abs() <= 4.0 * f64::EPSILON {
        1.0
    } else {
        norm
    };
    let mut out = [0.0; 4];
    for (o, c) in out.iter_mut().zip(q.iter()) {
        *o = sign * c / scale;
    }
    // w == -0.0 would survive the sign test above
    if out[3] == 0.0 {
        out[3] = 0.0;
    }
    Ok(out)
}

pub fn quat_dot(a: &Quat, b: &Quat) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

/// Returns `b` or `-b`, whichever lies in the same hemisphere as `a`.
pub fn sign_align(a: &Quat, b: &Quat) -> Quat {
    if quat_dot(a, b) < 0.0 {
        [-b[0], -b[1], -b[2], -b[3]]
    } else {
        *b
    }
}

/// Hamilton product `a ⊗ b`.
pub fn quat_mul(a: &Quat, b: &Quat) -> Quat {
    let [ax, ay, az, aw] = *a;
    let [bx, by, bz, bw] = *b;
    [
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
        aw * bw - ax * bx - ay * by - az * bz,
    ]
}

pub fn quat_conj(q: &Quat) -> Quat {
    [-q[0], -q[1], -q[2], q[3]]
}

/// Unit quaternion for a rotation of `angle` radians about `axis`.
pub fn quat_from_axis_angle(axis: [f64; 3], angle: f64) -> Quat {
    let n = (axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]).sqrt();
    if n < 1e-15 {
        return IDENTITY_QUAT;
    }
    let (s, c) = (angle * 0.5).sin_cos();
    [axis[0] / n * s, axis[1] / n * s, axis[2] / n * s, c]
}

/// Operator handle / end-effector pose: position in meters plus orientation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub position: [f64; 3],
    pub orientation: Quat,
}

impl Default for Pose {
    fn default() -> Self {
        Self {
            position: [0.0; 3],
            orientation: IDENTITY_QUAT,
        }
    }
}

impl Pose {
    /// Builds a pose, canonicalizing the orientation.
    pub fn new(position: [f64; 3], orientation: Quat) -> Result<Self, ModelError> {
        if position.iter().any(|c| !c.is_finite()) {
            return Err(ModelError::NonFinite);
        }
        Ok(Self {
            position,
            orientation: canonicalize_quaternion(orientation)?,
        })
    }

    pub fn from_position(position: [f64; 3]) -> Self {
        Self {
            position,
            orientation: IDENTITY_QUAT,
        }
    }

    /// `[lx, ly, lz, qx, qy, qz, qw]`
    pub fn to_array(&self) -> [f64; 7] {
        let p = self.position;
        let q = self.orientation;
        [p[0], p[1], p[2], q[0], q[1], q[2], q[3]]
    }

    pub fn from_array(v: [f64; 7]) -> Result<Self, ModelError> {
        Self::new([v[0], v[1], v[2]], [v[3], v[4], v[5], v[6]])
    }

    pub fn canonicalized(&self) -> Result<Self, ModelError> {
        Self::new(self.position, self.orientation)
    }

    pub fn position_distance(&self, other: &Pose) -> f64 {
        self.position
            .iter()
            .zip(other.position.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }
}

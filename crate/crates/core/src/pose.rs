//! Rigid transforms shared by the marker tracker, the arm model and teleop.

use nalgebra::{Isometry3, Point3, Quaternion, Translation3, Unit, UnitQuaternion, Vector3};
use serde::{de, Deserialize, Deserializer, Serialize, Serializer};

/// Rotation plus translation (metres). The quaternion is kept with `w >= 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose6D {
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vector3<f64>,
}

impl Default for Pose6D {
    fn default() -> Self {
        Self::identity()
    }
}

fn canonical(q: UnitQuaternion<f64>) -> UnitQuaternion<f64> {
    if q.w < 0.0 {
        Unit::new_unchecked(-q.into_inner())
    } else {
        q
    }
}

impl Pose6D {
    pub fn identity() -> Self {
        Self {
            rotation: UnitQuaternion::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation: canonical(rotation),
            translation,
        }
    }

    pub fn from_translation(x: f64, y: f64, z: f64) -> Self {
        Self::new(UnitQuaternion::identity(), Vector3::new(x, y, z))
    }

    pub fn from_isometry(iso: &Isometry3<f64>) -> Self {
        Self::new(iso.rotation, iso.translation.vector)
    }

    pub fn to_isometry(&self) -> Isometry3<f64> {
        Isometry3::from_parts(Translation3::from(self.translation), self.rotation)
    }

    /// `self ∘ other`: apply `other` first, then `self`.
    pub fn compose(&self, other: &Pose6D) -> Pose6D {
        Self::new(
            self.rotation * other.rotation,
            self.rotation * other.translation + self.translation,
        )
    }

    pub fn inverse(&self) -> Pose6D {
        let r = self.rotation.inverse();
        Self::new(r, -(r * self.translation))
    }

    pub fn transform_point(&self, p: &Point3<f64>) -> Point3<f64> {
        Point3::from(self.rotation * p.coords + self.translation)
    }

    pub fn is_finite(&self) -> bool {
        self.rotation
            .coords
            .iter()
            .chain(self.translation.iter())
            .all(|v| v.is_finite())
    }
}

/// Geodesic angle (rad) between two rotations, accurate near zero.
pub fn rotation_angle(a: &UnitQuaternion<f64>, b: &UnitQuaternion<f64>) -> f64 {
    let d = a.inverse() * b;
    2.0 * d.imag().norm().atan2(d.w.abs())
}

/// Rotation error in degrees and translation error in millimetres.
pub fn pose_error(est: &Pose6D, truth: &Pose6D) -> (f64, f64) {
    (
        rotation_angle(&est.rotation, &truth.rotation).to_degrees(),
        (est.translation - truth.translation).norm() * 1000.0,
    )
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PoseRepr {
    /// w, x, y, z
    rotation: [f64; 4],
    translation: [f64; 3],
}

impl Serialize for Pose6D {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let q = self.rotation;
        PoseRepr {
            rotation: [q.w, q.i, q.j, q.k],
            translation: [self.translation.x, self.translation.y, self.translation.z],
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for Pose6D {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let r = PoseRepr::deserialize(d)?;
        let [w, x, y, z] = r.rotation;
        let q = Quaternion::new(w, x, y, z);
        let n = q.norm();
        if !n.is_finite() || (n - 1.0).abs() > 1e-6 || r.translation.iter().any(|v| !v.is_finite()) {
            return Err(de::Error::custom("pose must be finite with a unit quaternion"));
        }
        // Already-unit quaternions pass through untouched so round trips are exact.
        let q = if (n - 1.0).abs() <= 1e-12 {
            Unit::new_unchecked(q)
        } else {
            Unit::new_normalize(q)
        };
        Ok(Pose6D::new(q, Vector3::from(r.translation)))
    }
}
